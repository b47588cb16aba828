import math

import numpy as np
import pytest
import torch

from alignps.core import iou_matrix
from alignps.head import (
    PRIOR_PROB,
    DetectionHead,
    HeadConfig,
    assign_targets,
    centerness_target,
    decode_detections,
    detection_loss,
    giou_loss,
    grid_locations,
    head_forward,
    sigmoid_focal_loss,
)
from helpers import brute_force_nms, grad_rel_error


def test_grid_locations_row_major():
    locs = grid_locations(2, 3, 8)
    assert locs.tolist() == [[4, 4], [12, 4], [20, 4], [4, 12], [12, 12], [20, 12]]


def assign_oracle(locs, boxes, stride, radius, eligible):
    out = []
    for x, y in locs:
        best, best_area = -1, math.inf
        for g, (x1, y1, x2, y2) in enumerate(boxes):
            if not eligible[g]:
                continue
            inside = min(x - x1, y - y1, x2 - x, y2 - y) > 0
            cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
            near = max(abs(x - cx), abs(y - cy)) < radius * stride
            area = (x2 - x1) * (y2 - y1)
            if inside and near and area < best_area:
                best, best_area = g, area
        out.append(best)
    return np.array(out)


@pytest.mark.parametrize("seed", range(12))
def test_assign_targets_matches_loop(seed):
    rng = np.random.default_rng(seed)
    stride = int(rng.choice([8, 16]))
    locs = grid_locations(8, 10, stride)
    n = int(rng.integers(0, 6))
    x1 = rng.uniform(0, 10 * stride, n)
    y1 = rng.uniform(0, 8 * stride, n)
    boxes = np.stack([x1, y1, x1 + rng.uniform(4, 60, n), y1 + rng.uniform(4, 90, n)], 1) if n else np.zeros((0, 4))
    eligible = rng.uniform(size=n) < 0.8
    tg = assign_targets(locs, boxes, stride, 1.5, eligible)
    want = assign_oracle(locs, boxes, stride, 1.5, eligible)
    assert np.array_equal(tg.gt_index, want)
    assert np.array_equal(tg.labels, (want >= 0).astype(int))
    pos = want >= 0
    if pos.any():
        b = boxes[want[pos]]
        p = locs[pos]
        ltrb = np.stack([p[:, 0] - b[:, 0], p[:, 1] - b[:, 1], b[:, 2] - p[:, 0], b[:, 3] - p[:, 1]], 1)
        assert np.allclose(tg.reg[pos], ltrb)
        assert np.all(tg.centerness[pos] > 0) and np.all(tg.centerness[pos] <= 1)
    assert np.all(tg.centerness[~pos] == 0)


def test_padding_locations_invalid():
    tg = assign_targets(grid_locations(4, 4, 8), np.array([[0, 0, 30, 30]]), 8, 1.5, valid_hw=(16, 24))
    valid = tg.valid.reshape(4, 4)
    assert valid[:2, :3].all() and not valid[2:].any() and not valid[:, 3].any()


def test_centerness_target_values():
    assert centerness_target(np.array([2.0, 3.0, 2.0, 3.0])) == pytest.approx(1.0)
    assert centerness_target(np.array([1.0, 1.0, 3.0, 1.0])) == pytest.approx(math.sqrt(1 / 3))


def test_focal_loss_oracle():
    rng = np.random.default_rng(0)
    z = rng.normal(size=50)
    t = (rng.uniform(size=50) < 0.3).astype(float)
    p = 1 / (1 + np.exp(-z))
    ref = np.where(t == 1, -0.25 * (1 - p) ** 2 * np.log(p), -0.75 * p ** 2 * np.log(1 - p))
    got = sigmoid_focal_loss(torch.tensor(z), torch.tensor(t), 0.25, 2.0).numpy()
    assert np.allclose(got, ref, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_giou_oracle(seed):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(0.5, 20, size=(8, 4))
    tgt = rng.uniform(0.5, 20, size=(8, 4))
    pb = np.stack([-pred[:, 0], -pred[:, 1], pred[:, 2], pred[:, 3]], 1)
    tb = np.stack([-tgt[:, 0], -tgt[:, 1], tgt[:, 2], tgt[:, 3]], 1)
    ious = np.diag(iou_matrix(pb, tb))
    area = lambda b: (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    inter = ious * (area(pb) + area(tb)) / (1 + ious)
    union = area(pb) + area(tb) - inter
    enc = (np.maximum(pb[:, 2], tb[:, 2]) - np.minimum(pb[:, 0], tb[:, 0])) * (np.maximum(pb[:, 3], tb[:, 3]) - np.minimum(pb[:, 1], tb[:, 1]))
    ref = 1 - (ious - (enc - union) / enc)
    assert np.allclose(giou_loss(torch.tensor(pred), torch.tensor(tgt)).numpy(), ref, atol=1e-12)


def test_perfect_prediction_zero_reg_and_ctr():
    reg_t = torch.tensor([[3.0, 4.0, 5.0, 2.0], [1.0, 1.0, 1.0, 1.0]], dtype=torch.float64)
    ct = torch.tensor(centerness_target(reg_t.numpy()))
    ctr_logits = torch.logit(ct.clamp(max=1 - 1e-12))
    out = detection_loss(
        torch.tensor([5.0, 5.0], dtype=torch.float64), ctr_logits, reg_t.clone(),
        torch.tensor([1, 1]), reg_t, ct, torch.tensor([True, True]),
    )
    assert float(out["loss_reg"]) == pytest.approx(0.0, abs=1e-12)
    assert float(out["loss_ctr"]) == pytest.approx(0.0, abs=1e-6)


def test_loss_normalised_by_positive_count():
    z = torch.zeros(6, dtype=torch.float64)
    labels = torch.tensor([1, 1, 0, 0, 0, 0])
    valid = torch.ones(6, dtype=torch.bool)
    reg = torch.ones(6, 4, dtype=torch.float64)
    ct = torch.tensor([1.0, 1.0, 0, 0, 0, 0], dtype=torch.float64)
    out = detection_loss(z, z, reg, labels, reg, ct, valid)
    per = sigmoid_focal_loss(z, labels.double(), 0.25, 2.0)
    assert float(out["loss_cls"]) == pytest.approx(float(per.sum() / 2))


def test_invalid_locations_ignored():
    z = torch.tensor([0.0, 50.0], dtype=torch.float64)
    args = (torch.zeros(2, dtype=torch.float64), torch.ones(2, 4, dtype=torch.float64), torch.tensor([0, 0]),
            torch.ones(2, 4, dtype=torch.float64), torch.zeros(2, dtype=torch.float64))
    a = detection_loss(z, *args, torch.tensor([True, False]))
    b = detection_loss(z[:1], *(x[:1] for x in args), torch.tensor([True]))
    assert float(a["loss_cls"]) == pytest.approx(float(b["loss_cls"]))


@pytest.mark.parametrize("seed", range(20))
def test_detection_loss_gradient(seed):
    rng = np.random.default_rng(200 + seed)
    m = 12
    cls = torch.tensor(rng.normal(size=m), requires_grad=True)
    ctr = torch.tensor(rng.normal(size=m), requires_grad=True)
    reg = torch.tensor(rng.uniform(1, 10, size=(m, 4)), requires_grad=True)
    labels = torch.tensor((rng.uniform(size=m) < 0.5).astype(np.int64))
    labels[0] = 1
    reg_t = torch.tensor(rng.uniform(1, 10, size=(m, 4)))
    ct = torch.tensor(centerness_target(reg_t.numpy())) * labels
    valid = torch.tensor(rng.uniform(size=m) < 0.9)
    valid[0] = True

    def total():
        d = detection_loss(cls, ctr, reg, labels, reg_t, ct, valid)
        return d["loss_cls"] + d["loss_reg"] + d["loss_ctr"]

    assert grad_rel_error(total, [cls, ctr, reg]) <= 1e-3


def test_head_shapes_and_prior():
    head = DetectionHead(8, ("P3",))
    cls, ctr, reg = head_forward(torch.randn(2, 8, 5, 7), head)
    assert cls.shape == (2, 1, 5, 7) and ctr.shape == (2, 1, 5, 7) and reg.shape == (2, 4, 5, 7)
    assert float(reg.min()) > 0
    assert float(torch.sigmoid(head.cls_pred.bias)) == pytest.approx(PRIOR_PROB)


def decode_oracle(levels, hw, cfg):
    cand = []
    for li, lv in enumerate(levels.values()):
        H, W = lv["cls_prob"].shape
        s = lv["stride"]
        for i in range(H):
            for j in range(W):
                c = lv["cls_prob"][i, j]
                if c <= cfg.score_thresh:
                    continue
                x, y = s / 2 + j * s, s / 2 + i * s
                l, t, r, b = lv["reg"][:, i, j]
                box = [min(max(x - l, 0), hw[1]), min(max(y - t, 0), hw[0]), min(max(x + r, 0), hw[1]), min(max(y + b, 0), hw[0])]
                if box[2] > box[0] and box[3] > box[1]:
                    cand.append((box, c * lv["ctr_prob"][i, j]))
    if not cand:
        return []
    boxes = np.array([c[0] for c in cand])
    scores = np.array([c[1] for c in cand])
    return [(boxes[k].tolist(), scores[k]) for k in brute_force_nms(boxes, scores, cfg.nms_thresh)[: cfg.max_detections]]


@pytest.mark.parametrize("seed", range(10))
def test_decode_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    levels = {}
    for name, s, (h, w) in (("P3", 8, (4, 5)), ("P4", 16, (2, 3))):
        e = rng.normal(size=(3, h, w))
        levels[name] = {
            "stride": s,
            "cls_prob": rng.uniform(size=(h, w)) ** 2,
            "ctr_prob": rng.uniform(size=(h, w)),
            "reg": rng.uniform(1, 30, size=(4, h, w)),
            "embed": e / np.linalg.norm(e, axis=0, keepdims=True),
        }
    cfg = HeadConfig(score_thresh=0.1, max_detections=7)
    got = decode_detections(levels, (32, 40), cfg)
    want = decode_oracle(levels, (32, 40), cfg)
    assert len(got) == len(want)
    for d, (box, score) in zip(got, want):
        assert d.box.as_list() == pytest.approx(box, abs=1e-9)
        assert d.final_score == pytest.approx(score, abs=1e-12)
        assert np.linalg.norm(d.embedding) == pytest.approx(1.0)
