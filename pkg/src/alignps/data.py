"""Dataset manifests, image I/O, transforms and the synthetic scene generator."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import BoundingBox, PersonAnnotation, SceneImage, fit_within, hflip, iou_matrix, pad_to, resize_with_boxes


class SyntheticSizingError(ValueError):
    """The synthetic spec cannot place its persons in the requested image size."""


# --------------------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestPerson:
    bbox: tuple[float, float, float, float]
    identity: Optional[int]


@dataclass(frozen=True)
class ManifestImage:
    file: str
    persons: tuple[ManifestPerson, ...]
    width: Optional[int] = None
    height: Optional[int] = None


@dataclass(frozen=True)
class ManifestQuery:
    image: str
    bbox: tuple[float, float, float, float]
    identity: int
    gallery: tuple[str, ...]


@dataclass(frozen=True)
class DatasetManifest:
    split: str
    labeled_identity_count: int
    images: tuple[ManifestImage, ...]
    queries: tuple[ManifestQuery, ...] = ()
    meta: dict = field(default_factory=dict, hash=False, compare=True)

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")
        for img in self.images:
            for p in img.persons:
                if p.identity is not None and not 0 <= p.identity < self.labeled_identity_count:
                    raise ValueError(f"identity {p.identity} outside [0, {self.labeled_identity_count}) in {img.file}")
        files = {img.file for img in self.images}
        for q in self.queries:
            if q.image not in files:
                raise ValueError(f"query image {q.image} not in manifest")
            missing = [g for g in q.gallery if g not in files]
            if missing:
                raise ValueError(f"gallery of query in {q.image} references unknown images {missing[:3]}")

    def image(self, file: str) -> ManifestImage:
        return self._index()[file]

    def _index(self) -> dict[str, ManifestImage]:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {img.file: img for img in self.images}
            object.__setattr__(self, "_idx", idx)
        return idx

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "labeled_identity_count": self.labeled_identity_count,
            "images": [
                {
                    "file": img.file,
                    "width": img.width,
                    "height": img.height,
                    "persons": [{"bbox": list(p.bbox), "identity": p.identity} for p in img.persons],
                }
                for img in self.images
            ],
            "queries": [
                {"image": q.image, "bbox": list(q.bbox), "identity": q.identity, "gallery": list(q.gallery)}
                for q in self.queries
            ],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        images = tuple(
            ManifestImage(
                img["file"],
                tuple(ManifestPerson(tuple(float(v) for v in p["bbox"]), p["identity"]) for p in img["persons"]),
                img.get("width"),
                img.get("height"),
            )
            for img in d["images"]
        )
        queries = tuple(
            ManifestQuery(q["image"], tuple(float(v) for v in q["bbox"]), int(q["identity"]), tuple(q["gallery"]))
            for q in d.get("queries", [])
        )
        return cls(d["split"], int(d["labeled_identity_count"]), images, queries, d.get("meta", {}))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "DatasetManifest":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.loads(Path(path).read_text())

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def manifest_record_to_scene(rec: ManifestImage, pixels: np.ndarray) -> SceneImage:
    anns = tuple(PersonAnnotation(BoundingBox(*p.bbox), p.identity) for p in rec.persons)
    return SceneImage(pixels, rec.file, anns)


def save_image(path, pixels: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def load_scenes(manifest: DatasetManifest, root) -> dict[str, SceneImage]:
    """Read every image of ``manifest``; paths are relative to ``root``."""
    root = Path(root)
    return {rec.file: manifest_record_to_scene(rec, load_image(root / rec.file)) for rec in manifest.images}


# --------------------------------------------------------------------------- transforms


@dataclass(frozen=True)
class TransformProfile:
    train_long_side: tuple[int, int] = (667, 2000)
    test_size: tuple[int, int] = (1500, 900)
    flip_prob: float = 0.5


PAPER_PROFILE = TransformProfile()
DESK_PROFILE = TransformProfile(train_long_side=(160, 256), test_size=(192, 128))


def train_transform(img: SceneImage, rng: np.random.Generator, profile: TransformProfile = PAPER_PROFILE) -> SceneImage:
    lo, hi = profile.train_long_side
    target = int(rng.integers(lo, hi + 1))
    out = resize_with_boxes(img, target)
    if rng.random() < profile.flip_prob:
        out = hflip(out)
    return out


def test_transform(img: SceneImage, profile: TransformProfile = PAPER_PROFILE) -> SceneImage:
    """Fit the long edge within ``max(test_size)`` and the short edge within ``min(test_size)``."""
    long_max, short_max = max(profile.test_size), min(profile.test_size)
    h, w = img.valid_hw
    if w >= h:
        return fit_within(img, long_max, short_max)
    return fit_within(img, short_max, long_max)


def collate(images: Sequence[SceneImage]) -> tuple[np.ndarray, list[SceneImage]]:
    """Zero-pad a batch to a common shape; returns ``(N, 3, H, W)`` float32 and the padded scenes."""
    H = max(im.height for im in images)
    W = max(im.width for im in images)
    padded = [pad_to(im, H, W) for im in images]
    arr = np.stack([p.pixels.transpose(2, 0, 1) for p in padded]).astype(np.float32)
    return arr, padded


# --------------------------------------------------------------------------- synthetic scenes


PALETTE = np.array(
    [
        [0.85, 0.15, 0.15],
        [0.15, 0.65, 0.20],
        [0.15, 0.30, 0.85],
        [0.90, 0.80, 0.15],
        [0.70, 0.20, 0.75],
        [0.10, 0.75, 0.80],
        [0.95, 0.55, 0.10],
        [0.92, 0.92, 0.92],
    ],
    dtype=np.float64,
)
PATTERNS = ("plain", "hstripe", "vstripe")
SKIN = np.array([0.87, 0.68, 0.55])


@dataclass(frozen=True)
class SyntheticSpec:
    width: int = 192
    height: int = 128
    persons_per_image: tuple[int, int] = (2, 4)
    num_identities: int = 8
    labeled_prob: float = 0.75
    person_height: tuple[int, int] = (28, 72)
    aspect: tuple[float, float] = (0.36, 0.5)
    occlusion_prob: float = 0.0
    clutter_per_image: tuple[int, int] = (1, 3)
    brightness_jitter: float = 0.15
    noise_std: float = 0.03
    appearance_seed: int = 0

    def validate(self) -> None:
        if self.num_identities < 2:
            raise ValueError("num_identities must be >= 2")
        lo, hi = self.persons_per_image
        if lo < 1 or hi < lo:
            raise ValueError(f"bad persons_per_image {self.persons_per_image}")
        hmin, hmax = self.person_height
        if hmin < 8 or hmax < hmin:
            raise ValueError(f"bad person_height {self.person_height}")
        if hmax > self.height:
            raise SyntheticSizingError(f"persons up to {hmax}px tall cannot fit in {self.height}px images")
        if hmax * self.aspect[1] > self.width:
            raise SyntheticSizingError("persons wider than the image")
        footprint = lo * hmin * hmin * self.aspect[0]
        if self.occlusion_prob == 0 and footprint > 0.6 * self.width * self.height:
            raise SyntheticSizingError(
                f"{lo} non-overlapping persons of {hmin}px height do not fit in {self.width}x{self.height}"
            )
        if len(all_signatures()) < self.num_identities + 2:
            raise ValueError("not enough distinct appearance signatures")


@dataclass(frozen=True)
class Signature:
    top: int
    bottom: int
    pattern: int

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.top, self.bottom, self.pattern)


def all_signatures() -> list[Signature]:
    n = len(PALETTE)
    return [Signature(t, b, p) for t in range(n) for b in range(n) for p in range(len(PATTERNS)) if t != b]


def identity_signatures(spec: SyntheticSpec) -> tuple[list[Signature], list[Signature], list[Signature]]:
    """Labeled, train-distractor and test-distractor appearance signatures (pairwise distinct)."""
    sigs = all_signatures()
    rng = np.random.default_rng([spec.appearance_seed, 7])
    order = rng.permutation(len(sigs))
    sigs = [sigs[i] for i in order]
    labeled = sigs[: spec.num_identities]
    rest = sigs[spec.num_identities:]
    half = len(rest) // 2
    return labeled, rest[:half], rest[half:]


def render_person(canvas: np.ndarray, box: tuple[int, int, int, int], sig: Signature, rng: np.random.Generator,
                  jitter: float) -> None:
    """Paint a stick-like person filling ``box`` exactly (integer pixel corners, exclusive max)."""
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    gain = 1.0 + rng.uniform(-jitter, jitter)
    head_h = max(2, int(round(0.18 * h)))
    torso_end = max(head_h + 2, int(round(0.56 * h)))
    # head: centred block half the body width
    hx1 = x1 + int(round(0.25 * w))
    hx2 = max(hx1 + 1, x1 + int(round(0.75 * w)))
    canvas[y1:y1 + head_h, hx1:hx2] = np.clip(SKIN * gain, 0, 1)
    top = np.clip(PALETTE[sig.top] * gain, 0, 1)
    bottom = np.clip(PALETTE[sig.bottom] * gain, 0, 1)
    ty1, ty2 = y1 + head_h, y1 + torso_end
    region = np.broadcast_to(top, (ty2 - ty1, w, 3)).copy()
    period = max(2, int(round(h / 12)))
    if PATTERNS[sig.pattern] == "hstripe":
        rows = (np.arange(ty2 - ty1) // period) % 2 == 1
        region[rows] *= 0.35
    elif PATTERNS[sig.pattern] == "vstripe":
        cols = (np.arange(w) // period) % 2 == 1
        region[:, cols] *= 0.35
    canvas[ty1:ty2, x1:x2] = region
    # legs with a gap in the middle
    gap1 = x1 + int(round(0.42 * w))
    gap2 = max(gap1 + 1, x1 + int(round(0.58 * w)))
    canvas[ty2:y2, x1:gap1] = bottom
    canvas[ty2:y2, gap2:x2] = bottom


def _background(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    H, W = spec.height, spec.width
    base = rng.uniform(0.25, 0.6, size=3)
    tint = rng.uniform(-0.15, 0.15, size=3)
    grad = np.linspace(0, 1, H)[:, None, None]
    img = np.broadcast_to(base + grad * tint, (H, W, 3)).copy()
    return img


def _clutter(canvas: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator, avoid: list) -> None:
    H, W = spec.height, spec.width
    n = int(rng.integers(spec.clutter_per_image[0], spec.clutter_per_image[1] + 1))
    for _ in range(n):
        for _try in range(20):
            s = int(rng.integers(10, 30))
            sw = max(4, int(round(s * rng.uniform(0.8, 1.25))))
            x1 = int(rng.integers(0, W - sw))
            y1 = int(rng.integers(0, H - s))
            cand = np.array([[x1, y1, x1 + sw, y1 + s]], dtype=np.float64)
            if avoid and iou_matrix(cand, np.array(avoid)).max() > 0:
                continue
            colour = PALETTE[int(rng.integers(len(PALETTE)))] * rng.uniform(0.7, 1.1)
            canvas[y1:y1 + s, x1:x1 + sw] = np.clip(colour, 0, 1)
            break


def _place_persons(spec: SyntheticSpec, rng: np.random.Generator, n: int) -> list[tuple[int, int, int, int]]:
    H, W = spec.height, spec.width
    boxes: list[tuple[int, int, int, int]] = []
    for _ in range(n):
        placed = False
        for _try in range(200):
            h = int(rng.integers(spec.person_height[0], spec.person_height[1] + 1))
            w = max(4, int(round(h * rng.uniform(*spec.aspect))))
            x1 = int(rng.integers(0, W - w + 1))
            y1 = int(rng.integers(0, H - h + 1))
            cand = (x1, y1, x1 + w, y1 + h)
            if boxes:
                ious = iou_matrix(np.array([cand], dtype=np.float64), np.array(boxes, dtype=np.float64))[0]
                if rng.random() < spec.occlusion_prob:
                    if ious.max() > 0.3 or (ious > 0).sum() > 1:
                        continue
                elif ious.max() > 0:
                    continue
            boxes.append(cand)
            placed = True
            break
        if not placed:
            break
    return boxes


@dataclass
class SyntheticSplit:
    manifest: DatasetManifest
    images: dict[str, SceneImage]
    signatures: dict[str, list[Signature]]

    def scenes(self) -> list[SceneImage]:
        return [self.images[rec.file] for rec in self.manifest.images]


def generate_synthetic(spec: SyntheticSpec, n_images: int, rng_seed: int, split: str = "train",
                       default_gallery_size: int = 100) -> SyntheticSplit:
    """Deterministic synthetic person-search split.

    Labeled identities share their appearance across splits; unlabeled persons
    draw from a split-specific pool of distractor appearances.
    """
    spec.validate()
    labeled_sigs, train_distr, test_distr = identity_signatures(spec)
    distractors = train_distr if split == "train" else test_distr
    rng = np.random.default_rng([rng_seed, 0 if split == "train" else 1])
    records, images = [], {}
    lo, hi = spec.persons_per_image
    for k in range(n_images):
        n = int(rng.integers(lo, hi + 1))
        boxes = _place_persons(spec, rng, n)
        if len(boxes) < lo:
            raise SyntheticSizingError(f"could only place {len(boxes)} of {lo} persons in image {k}")
        canvas = _background(spec, rng)
        _clutter(canvas, spec, rng, [list(b) for b in boxes])
        ids = rng.permutation(spec.num_identities)
        persons = []
        next_id = 0
        for box in boxes:
            if rng.random() < spec.labeled_prob and next_id < len(ids):
                ident = int(ids[next_id])
                next_id += 1
                sig = labeled_sigs[ident]
            else:
                ident = None
                sig = distractors[int(rng.integers(len(distractors)))]
            render_person(canvas, box, sig, rng, spec.brightness_jitter)
            persons.append(ManifestPerson(tuple(float(v) for v in box), ident))
        canvas = canvas + rng.normal(0.0, spec.noise_std, canvas.shape)
        pixels = (np.clip(np.round(canvas * 255.0), 0, 255) / 255.0).astype(np.float32)
        file = f"images/{split}_{k:05d}.png"
        rec = ManifestImage(file, tuple(persons), spec.width, spec.height)
        records.append(rec)
        images[file] = manifest_record_to_scene(rec, pixels)
    queries = build_queries(records, rng_seed, default_gallery_size) if split == "test" else ()
    meta = {"generator": "synthetic", "spec": _spec_dict(spec), "seed": rng_seed}
    manifest = DatasetManifest(split, spec.num_identities, tuple(records), queries, meta)
    return SyntheticSplit(manifest, images, {"labeled": labeled_sigs, "distractor": distractors})


def _spec_dict(spec: SyntheticSpec) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}


def spec_from_dict(d: dict) -> SyntheticSpec:
    fields_ = SyntheticSpec.__dataclass_fields__
    unknown = set(d) - set(fields_)
    if unknown:
        raise ValueError(f"unknown synthetic spec fields: {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return SyntheticSpec(**kw)


def sample_gallery(query_image: str, gt_images: Sequence[str], pool: Sequence[str], size: int, seed: int) -> list[str]:
    """Gallery of ``size`` images: every image holding the query identity plus seeded distractor images.

    Galleries for increasing ``size`` are nested. The query's own image is excluded.
    """
    gt = [g for g in gt_images if g != query_image]
    gt_set = set(gt)
    others = sorted(p for p in pool if p not in gt_set and p != query_image)
    key = int(hashlib.sha256(f"{seed}:{query_image}".encode()).hexdigest()[:8], 16)
    perm = np.random.default_rng(key).permutation(len(others))
    fill = max(0, size - len(gt))
    return gt + [others[i] for i in perm[:fill]]


def build_queries(records: Sequence[ManifestImage], seed: int, gallery_size: int = 100) -> tuple[ManifestQuery, ...]:
    """Every labeled test person is a query, provided its identity appears in another image."""
    where: dict[int, list[str]] = {}
    for rec in records:
        for p in rec.persons:
            if p.identity is not None:
                where.setdefault(p.identity, []).append(rec.file)
    pool = [rec.file for rec in records]
    queries = []
    for rec in records:
        for p in rec.persons:
            if p.identity is None:
                continue
            gt = [f for f in where[p.identity] if f != rec.file]
            if not gt:
                continue
            gallery = sample_gallery(rec.file, gt, pool, gallery_size, seed)
            queries.append(ManifestQuery(rec.file, p.bbox, p.identity, tuple(gallery)))
    return tuple(queries)


def write_split(split: SyntheticSplit, out_dir, name: Optional[str] = None) -> Path:
    """Write images and ``<split>.json`` under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in split.manifest.images:
        save_image(out / rec.file, split.images[rec.file].pixels)
    path = out / f"{name or split.manifest.split}.json"
    split.manifest.save(path)
    return path


def appearance_oracle_embedding(img: SceneImage, box: BoundingBox, signatures: Sequence[Signature]) -> np.ndarray:
    """One-hot over ``signatures`` (plus an 'other' slot) by nearest top/bottom colour and stripe pattern.

    Reads only pixels, never labels.
    """
    x1, y1, x2, y2 = (int(round(v)) for v in box.as_list())
    crop = img.pixels[y1:y2, x1:x2].astype(np.float64)
    h, w = crop.shape[:2]
    torso = crop[int(0.25 * h): int(0.5 * h), int(0.1 * w): int(0.9 * w) or 1]
    legs = crop[int(0.65 * h): int(0.95 * h), : max(1, int(0.35 * w))]
    top_col = torso.max(axis=(0, 1)) if torso.size else np.zeros(3)
    bottom_col = np.median(legs.reshape(-1, 3), axis=0)
    row_var = torso.mean(axis=(1, 2)).std() if torso.size else 0.0
    col_var = torso.mean(axis=(0, 2)).std() if torso.size else 0.0
    if max(row_var, col_var) < 0.05:
        pattern = 0
    else:
        pattern = 1 if row_var > col_var else 2
    top_i = int(np.argmin(((PALETTE / PALETTE.max(1, keepdims=True) - top_col / max(top_col.max(), 1e-6)) ** 2).sum(1)))
    bot_i = int(np.argmin(((PALETTE / PALETTE.max(1, keepdims=True) - bottom_col / max(bottom_col.max(), 1e-6)) ** 2).sum(1)))
    emb = np.zeros(len(signatures) + 1)
    key = (top_i, bot_i, pattern)
    for i, s in enumerate(signatures):
        if s.as_tuple() == key:
            emb[i] = 1.0
            return emb
    emb[-1] = 1.0
    return emb


# --------------------------------------------------------------------------- real-dataset adapters


def load_prw(root, split: str = "test", gallery_size: int = 100, seed: int = 0) -> DatasetManifest:
    """Parse a PRW release (``frames/``, ``annotations/*.jpg.mat``, ``frame_{train,test}.mat``, ``query_info.txt``).

    Identity labels are remapped to dense indices; PRW's ``-2`` marks unlabeled persons.
    """
    from scipy.io import loadmat

    root = Path(root)
    key = "img_index_train" if split == "train" else "img_index_test"
    names = [str(a[0][0]) + ".jpg" for a in loadmat(root / f"frame_{split}.mat")[key]]
    raw = []
    for name in names:
        anno = loadmat(root / "annotations" / f"{name}.mat")
        key_box = next(k for k in ("box_new", "anno_file", "anno_previous") if k in anno)
        arr = np.asarray(anno[key_box], dtype=np.float64).reshape(-1, 5)
        raw.append((name, arr))
    pids = sorted({int(p) for _, arr in raw for p in arr[:, 0] if p >= 0})
    dense = {p: i for i, p in enumerate(pids)}
    records = []
    for name, arr in raw:
        persons = []
        for pid, x, y, w, h in arr:
            if w <= 0 or h <= 0:
                continue
            ident = dense.get(int(pid)) if pid >= 0 else None
            persons.append(ManifestPerson((x, y, x + w, y + h), ident))
        records.append(ManifestImage(f"frames/{name}", tuple(persons)))
    queries = ()
    if split == "test" and (root / "query_info.txt").exists():
        where: dict[int, list[str]] = {}
        for rec in records:
            for p in rec.persons:
                if p.identity is not None:
                    where.setdefault(p.identity, []).append(rec.file)
        pool = [r.file for r in records]
        qs = []
        for line in (root / "query_info.txt").read_text().split("\n"):
            parts = line.split()
            if len(parts) < 6:
                continue
            pid, x, y, w, h = int(parts[0]), *(float(v) for v in parts[1:5])
            image = f"frames/{parts[5]}.jpg"
            ident = dense.get(pid)
            if ident is None:
                continue
            gt = [f for f in where.get(ident, []) if f != image]
            qs.append(ManifestQuery(image, (x, y, x + w, y + h), ident, tuple(sample_gallery(image, gt, pool, gallery_size, seed))))
        queries = tuple(qs)
    return DatasetManifest(split, len(pids), tuple(records), queries, {"source": "PRW"})


def load_cuhk_sysu(root, split: str = "test", gallery_size: int = 100) -> DatasetManifest:
    """Parse a CUHK-SYSU release (``Image/SSM``, ``annotation/Images.mat``, ``pool.mat``,
    ``test/train_test/{Train,TestG<size>}.mat``), using the official per-query galleries.
    """
    from scipy.io import loadmat

    ann = Path(root) / "annotation"
    all_imgs = loadmat(ann / "Images.mat")["Img"].squeeze()
    boxes_by_name: dict[str, np.ndarray] = {}
    for name, _, boxes in all_imgs:
        b = np.asarray([bb[0] for bb in boxes[0]], dtype=np.float64).reshape(-1, 4)
        boxes_by_name[str(name[0])] = b[(b[:, 2] > 0) & (b[:, 3] > 0)]
    pool = [str(a[0]) for a in loadmat(ann / "pool.mat")["pool"].squeeze()]
    names = pool if split == "test" else sorted(set(boxes_by_name) - set(pool))
    ids_by_name = {n: [None] * len(boxes_by_name[n]) for n in names}

    def tag(name, box, ident):
        if name not in ids_by_name:
            return
        for i, b in enumerate(boxes_by_name[name]):
            if np.allclose(b, box):
                ids_by_name[name][i] = ident
                return

    queries_raw = []
    if split == "train":
        train = loadmat(ann / "test" / "train_test" / "Train.mat")["Train"].squeeze()
        for index, item in enumerate(train):
            for name, box, _ in item[0, 0][2].squeeze():
                tag(str(name[0]), np.asarray(box, dtype=np.float64).squeeze(), index)
        count = len(train)
    else:
        key = f"TestG{gallery_size}"
        protoc = loadmat(ann / "test" / "train_test" / f"{key}.mat")[key].squeeze()
        for index, item in enumerate(protoc):
            qname = str(item["Query"][0, 0][0][0])
            qbox = np.asarray(item["Query"][0, 0][1], dtype=np.float64).squeeze()
            tag(qname, qbox, index)
            gallery = []
            for gname, gbox, _ in item["Gallery"].squeeze():
                gname = str(gname[0])
                gallery.append(gname)
                if np.asarray(gbox).size:
                    tag(gname, np.asarray(gbox, dtype=np.float64).squeeze(), index)
            queries_raw.append((qname, qbox, index, gallery))
        count = len(protoc)
    records = []
    for n in names:
        persons = tuple(
            ManifestPerson((x, y, x + w, y + h), ident)
            for (x, y, w, h), ident in zip(boxes_by_name[n], ids_by_name[n])
        )
        records.append(ManifestImage(f"Image/SSM/{n}", persons))
    queries = tuple(
        ManifestQuery(f"Image/SSM/{q}", (b[0], b[1], b[0] + b[2], b[1] + b[3]), i, tuple(f"Image/SSM/{g}" for g in gal))
        for q, b, i, gal in queries_raw
    )
    return DatasetManifest(split, count, tuple(records), queries, {"source": "CUHK-SYSU"})
