"""Re-id embeddings, the labeled lookup table / unlabeled circular queue, and OIM / triplet losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .head import assign_targets, grid_locations


@dataclass
class ReidConfig:
    temperature: float = 0.1
    momentum: float = 0.5
    queue_size: int = 5000
    samples_per_person: int = 5
    margin: float = 0.3
    focal: bool = True
    focal_gamma: float = 2.0
    use_triplet: bool = True
    use_lut_in_triplet: bool = True
    triplet_reduction: str = "sum"
    triplet_weight: float = 1.0
    oim_weight: float = 1.0


class ReidMemory:
    """Identity memory for OIM.

    ``lut`` holds one unit-norm row per labeled identity (row ``i`` is ``v_i``);
    ``queue`` holds up to ``Q`` unlabeled features, overwritten oldest first.
    Only filled queue slots take part in the softmax.
    """

    def __init__(self, num_identities: int, dim: int, queue_size: int, momentum: float = 0.5,
                 temperature: float = 0.1, seed: int = 0):
        if not 0.0 < momentum <= 1.0:
            raise ValueError("momentum must lie in (0, 1]")
        g = torch.Generator().manual_seed(seed)
        lut = torch.randn(num_identities, dim, generator=g)
        self.lut = F.normalize(lut, dim=1)
        self.queue = torch.zeros(queue_size, dim)
        self.head = 0
        self.filled = 0
        self.momentum = float(momentum)
        self.temperature = float(temperature)

    @property
    def num_identities(self) -> int:
        return self.lut.shape[0]

    @property
    def queue_size(self) -> int:
        return self.queue.shape[0]

    def active_queue(self) -> torch.Tensor:
        return self.queue[: self.filled]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {
            "lut": self.lut.numpy().copy(),
            "queue": self.queue.numpy().copy(),
            "head": np.array(self.head, dtype=np.int64),
            "filled": np.array(self.filled, dtype=np.int64),
            "momentum": np.array(self.momentum),
            "temperature": np.array(self.temperature),
        }

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.lut = torch.from_numpy(np.array(state["lut"], dtype=np.float32))
        self.queue = torch.from_numpy(np.array(state["queue"], dtype=np.float32))
        self.head = int(state["head"])
        self.filled = int(state["filled"])
        self.momentum = float(state["momentum"])
        self.temperature = float(state["temperature"])

    def clone(self) -> "ReidMemory":
        other = ReidMemory.__new__(ReidMemory)
        other.load_state_dict(self.state_dict())
        return other


def extract_embeddings(fm: torch.Tensor, locations) -> torch.Tensor:
    """L2-normalised channel vectors of a ``(D, H, W)`` map at ``(row, col)`` locations."""
    locations = torch.as_tensor(np.asarray(locations), dtype=torch.long).reshape(-1, 2)
    vecs = fm[:, locations[:, 0], locations[:, 1]].T
    return F.normalize(vecs, dim=1)


def oim_logits(x: torch.Tensor, mem: ReidMemory) -> torch.Tensor:
    """Scaled similarities of ``(N, D)`` features to all LUT rows then filled queue slots."""
    bank = torch.cat([mem.lut, mem.active_queue()], dim=0).to(x.dtype).detach()
    return x @ bank.T / mem.temperature


def oim_probability(x: torch.Tensor, mem: ReidMemory, i: int) -> torch.Tensor:
    """Probability that feature ``x`` belongs to labeled identity ``i``."""
    squeeze = x.dim() == 1
    logits = oim_logits(x.reshape(1, -1) if squeeze else x, mem)
    p = torch.softmax(logits, dim=1)[:, i]
    return p[0] if squeeze else p


def oim_loss(features: torch.Tensor, labels: torch.Tensor, mem: ReidMemory,
             focal: bool = True, gamma: float = 2.0) -> torch.Tensor:
    """Mean negative log-likelihood of the labeled features (label ``-1`` = unlabeled).

    With ``focal`` each term is weighted by ``(1 - p_t) ** gamma``.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    mask = labels >= 0
    if int(mask.sum()) == 0:
        return features.sum() * 0.0
    x = features[mask]
    t = labels[mask]
    logp = torch.log_softmax(oim_logits(x, mem), dim=1)
    logp_t = logp.gather(1, t[:, None]).squeeze(1)
    nll = -logp_t
    if focal:
        nll = (1 - torch.exp(logp_t)) ** gamma * nll
    return nll.mean()


@torch.no_grad()
def update_memory(mem: ReidMemory, features: torch.Tensor, labels) -> ReidMemory:
    """Momentum-update LUT rows for labeled features, push unlabeled ones to the queue.

    Updates ``mem`` in place and returns it. Features are processed in order.
    """
    labels = [int(v) for v in torch.as_tensor(labels).reshape(-1).tolist()]
    feats = features.detach().to(mem.lut.dtype)
    g = mem.momentum
    for x, t in zip(feats, labels):
        if t >= 0:
            v = g * mem.lut[t] + (1 - g) * x
            mem.lut[t] = v / v.norm().clamp(min=1e-12)
        elif mem.queue_size > 0:
            mem.queue[mem.head] = F.normalize(x, dim=0)
            mem.head = (mem.head + 1) % mem.queue_size
            mem.filled = min(mem.filled + 1, mem.queue_size)
    return mem


@dataclass
class PersonFeatureSet:
    identity: Optional[int]
    features: torch.Tensor           # (S', D) unit-norm
    locations: np.ndarray            # (S', 2) (row, col) grid indices
    lut_entry: Optional[torch.Tensor] = None


def person_locations(
    grid_hw: tuple[int, int],
    stride: int,
    boxes: np.ndarray,
    index: int,
    num_samples: int,
    radius: float = 1.5,
    eligible: Optional[np.ndarray] = None,
    valid_hw: Optional[tuple[int, int]] = None,
) -> np.ndarray:
    """Up to ``num_samples`` grid cells ``(row, col)`` nearest the centre of ``boxes[index]``.

    Candidates are the cells assigned to that person by :func:`assign_targets`
    (so overlapping persons get disjoint sets). Ordering is by Chebyshev
    distance to the centre, then Euclidean distance, then raster order. When
    no cell is assigned, the single nearest cell is returned.
    """
    h, w = grid_hw
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    locs = grid_locations(h, w, stride)
    tg = assign_targets(locs, boxes, stride, radius, eligible=eligible, valid_hw=valid_hw)
    cx = 0.5 * (boxes[index, 0] + boxes[index, 2])
    cy = 0.5 * (boxes[index, 1] + boxes[index, 3])
    dx = np.abs(locs[:, 0] - cx)
    dy = np.abs(locs[:, 1] - cy)
    cheb = np.maximum(dx, dy)
    eucl = dx * dx + dy * dy
    cand = np.nonzero(tg.gt_index == index)[0]
    if len(cand) == 0:
        cand = np.arange(len(locs))
        num_samples = 1
    order = np.lexsort((cand, eucl[cand], cheb[cand]))
    chosen = cand[order[:num_samples]]
    return np.stack([chosen // w, chosen % w], axis=1)


def sample_person_features(
    fm: torch.Tensor,
    stride: int,
    boxes: np.ndarray,
    index: int,
    identity: Optional[int],
    num_samples: int,
    mem: Optional[ReidMemory] = None,
    radius: float = 1.5,
    eligible: Optional[np.ndarray] = None,
) -> PersonFeatureSet:
    locs = person_locations(fm.shape[-2:], stride, boxes, index, num_samples, radius, eligible)
    feats = extract_embeddings(fm, locs)
    lut = None
    if identity is not None and mem is not None:
        lut = mem.lut[identity]
    return PersonFeatureSet(identity, feats, locs, lut)


def _pairwise_euclidean(x: torch.Tensor) -> torch.Tensor:
    diff = x[:, None, :] - x[None, :, :]
    return torch.sqrt((diff * diff).sum(-1).clamp(min=1e-12))


def triplet_loss(
    features: torch.Tensor,
    labels,
    margin: float = 0.3,
    lut: Optional[torch.Tensor] = None,
    reduction: str = "sum",
) -> torch.Tensor:
    """Batch-hard hinge triplet loss over sampled person features.

    ``features`` ``(N, D)`` carry identity ``labels`` ``(N,)``; when ``lut`` is
    given, the LUT row of every identity present joins the pool (as a constant).
    Every pool element anchors one triplet with its farthest same-identity
    element and nearest other-identity element.
    """
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    pool = features
    pool_labels = labels
    if lut is not None and len(labels):
        ids = torch.unique(labels)
        pool = torch.cat([features, lut[ids].to(features.dtype).detach()], dim=0)
        pool_labels = torch.cat([labels, ids])
    if len(torch.unique(pool_labels)) < 2:
        return features.sum() * 0.0
    dist = _pairwise_euclidean(pool)
    same = pool_labels[:, None] == pool_labels[None, :]
    eye = torch.eye(len(pool_labels), dtype=torch.bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    has = pos_mask.any(1) & neg_mask.any(1)
    if not bool(has.any()):
        return features.sum() * 0.0
    inf = torch.tensor(float("inf"), dtype=dist.dtype)
    d_pos = torch.where(pos_mask, dist, -inf).max(1).values
    d_neg = torch.where(neg_mask, dist, inf).min(1).values
    hinge = F.relu(margin + d_pos[has] - d_neg[has])
    return hinge.sum() if reduction == "sum" else hinge.mean()


def toim_loss(
    oim_features: torch.Tensor,
    oim_labels,
    tri_features: torch.Tensor,
    tri_labels,
    mem: ReidMemory,
    cfg: ReidConfig = ReidConfig(),
) -> dict[str, torch.Tensor]:
    """OIM plus triplet terms; returns ``{"oim", "tri", "total"}``."""
    oim = oim_loss(oim_features, oim_labels, mem, cfg.focal, cfg.focal_gamma)
    if cfg.use_triplet:
        tri = triplet_loss(
            tri_features, tri_labels, cfg.margin,
            lut=mem.lut if cfg.use_lut_in_triplet else None,
            reduction=cfg.triplet_reduction,
        )
    else:
        tri = oim * 0.0
    return {"oim": oim, "tri": tri, "total": cfg.oim_weight * oim + cfg.triplet_weight * tri}
