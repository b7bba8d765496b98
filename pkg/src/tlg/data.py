"""Episodes, fold splits, CAM pseudo-mask normalization and datasets.

A dataset here is a flat, immutable collection of images with a category id,
a soft pseudo-mask and (when available) an exact ground-truth mask.  Episodes
are drawn from it through a :class:`FoldSplit`, and the triple
``(fold_id, seed, index)`` fully determines each episode.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import yaml
from scipy.ndimage import uniform_filter

from .errors import DataValidationError, EpisodeSamplingError, MaskLoadError


def normalize_cam(raw_activation) -> np.ndarray:
    """relu(x) / max(relu(x)); an all-zeros map when nothing is positive."""
    x = np.asarray(raw_activation, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataValidationError("activation map contains non-finite values")
    x = np.maximum(x, 0.0)
    peak = x.max() if x.size else 0.0
    if peak <= 0.0:
        return np.zeros_like(x)
    return x / peak


@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    train_categories: frozenset
    test_categories: frozenset
    n_categories: int

    def __post_init__(self):
        train, test = frozenset(self.train_categories), frozenset(self.test_categories)
        object.__setattr__(self, "train_categories", train)
        object.__setattr__(self, "test_categories", test)
        if train & test:
            raise DataValidationError(f"fold {self.fold_id}: train/test overlap {sorted(train & test)}")
        if train | test != frozenset(range(self.n_categories)):
            missing = sorted(set(range(self.n_categories)) - (train | test))
            raise DataValidationError(f"fold {self.fold_id}: categories not covered {missing}")
        if not test:
            raise DataValidationError(f"fold {self.fold_id}: empty test split")

    def categories(self, partition: str) -> frozenset:
        if partition == "train":
            return self.train_categories
        if partition == "test":
            return self.test_categories
        raise ValueError(f"unknown partition {partition!r}")


def make_folds(n_categories: int, n_folds: int) -> list[FoldSplit]:
    """Contiguous category blocks per fold, the Pascal-5i/COCO-20i convention."""
    if n_folds > n_categories:
        raise DataValidationError(f"{n_folds} folds need at least {n_folds} categories")
    per = math.ceil(n_categories / n_folds)
    folds = []
    for f in range(n_folds):
        test = set(range(f * per, min((f + 1) * per, n_categories)))
        folds.append(FoldSplit(f, frozenset(set(range(n_categories)) - test), frozenset(test), n_categories))
    return folds


def load_folds(path: str | Path, n_categories: int) -> list[FoldSplit]:
    """Read ``folds: {0: [test ids], 1: [...]}`` from a YAML file."""
    doc = yaml.safe_load(Path(path).read_text()) or {}
    spec = doc.get("folds")
    if not isinstance(spec, dict) or not spec:
        raise DataValidationError(f"{path}: expected a 'folds' mapping")
    all_ids = frozenset(range(n_categories))
    out = []
    for fold_id in sorted(spec, key=int):
        test = frozenset(int(c) for c in spec[fold_id])
        out.append(FoldSplit(int(fold_id), all_ids - test, test, n_categories))
    return out


@dataclass(frozen=True)
class SegmentationDataset:
    """Images (N,3,H,W) in [0,1], pseudo-masks (N,H,W) in [0,1], optional gt masks."""

    images: np.ndarray
    pseudo_masks: np.ndarray
    category_ids: np.ndarray
    category_names: tuple
    image_ids: tuple
    gt_masks: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.images)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DataValidationError(f"images must be (N,3,H,W), got {self.images.shape}")
        if self.pseudo_masks.shape != (n,) + self.images.shape[2:]:
            raise DataValidationError("pseudo-mask shape does not match images")
        if self.pseudo_masks.min(initial=0) < 0 or self.pseudo_masks.max(initial=0) > 1:
            raise DataValidationError("pseudo-mask values outside [0,1]")
        if len(self.category_ids) != n or len(self.image_ids) != n:
            raise DataValidationError("category/image id count does not match images")
        for arr in (self.images, self.pseudo_masks, self.category_ids, self.gt_masks):
            if arr is not None:
                arr.setflags(write=False)

    def __len__(self):
        return len(self.images)

    @property
    def n_categories(self) -> int:
        return len(self.category_names)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[-1])

    def indices_of(self, category_id: int) -> np.ndarray:
        return np.flatnonzero(self.category_ids == category_id)


@dataclass(frozen=True)
class Episode:
    support_images: np.ndarray        # (K,3,H,W)
    support_pseudo_masks: np.ndarray  # (K,H,W)
    query_image: np.ndarray           # (3,H,W)
    query_pseudo_mask: np.ndarray     # (H,W)
    category_id: int
    fold_id: int
    shot_count: int
    query_gt_mask: np.ndarray | None = None
    support_gt_masks: np.ndarray | None = None
    key: tuple = field(default=(0, 0))  # (seed, index)

    def __post_init__(self):
        if len(self.support_images) != self.shot_count or len(self.support_pseudo_masks) != self.shot_count:
            raise DataValidationError("shot_count does not match support lists")
        size = self.query_image.shape[-2:]
        if self.support_images.shape[-2:] != size or self.support_pseudo_masks.shape[-2:] != size \
                or self.query_pseudo_mask.shape != size:
            raise DataValidationError("episode images differ in spatial size")
        for m in (self.support_pseudo_masks, self.query_pseudo_mask):
            if m.min() < 0 or m.max() > 1:
                raise DataValidationError("pseudo-mask values outside [0,1]")


def episode_rng(fold_id: int, seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, fold_id, index])


def sample_episode(dataset: SegmentationDataset, split: FoldSplit, shot_count: int, seed: int,
                   index: int = 0, partition: str = "test") -> Episode:
    """Draw one 1-way K-shot episode; all images come from one category of ``partition``."""
    cats = sorted(split.categories(partition))
    for c in cats:
        have = len(dataset.indices_of(c))
        if have < shot_count + 1:
            name = dataset.category_names[c] if c < dataset.n_categories else str(c)
            raise EpisodeSamplingError(
                f"category {c} ({name}) has {have} exemplars; {shot_count}-shot needs {shot_count + 1}")
    rng = episode_rng(split.fold_id, seed, index)
    cat = cats[int(rng.integers(len(cats)))]
    pick = rng.choice(dataset.indices_of(cat), size=shot_count + 1, replace=False)
    s, q = pick[:shot_count], pick[shot_count]
    gt = dataset.gt_masks
    return Episode(
        support_images=dataset.images[s],
        support_pseudo_masks=dataset.pseudo_masks[s],
        query_image=dataset.images[q],
        query_pseudo_mask=dataset.pseudo_masks[q],
        category_id=int(cat),
        fold_id=split.fold_id,
        shot_count=shot_count,
        query_gt_mask=None if gt is None else gt[q],
        support_gt_masks=None if gt is None else gt[s],
        key=(seed, index),
    )


# --- synthetic shapes -------------------------------------------------------

def _rot(yy, xx, cy, cx, theta):
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    return c * dx + s * dy, -s * dx + c * dy


def _disk(u, v, s):
    return u ** 2 + v ** 2 < s ** 2


def _bar(u, v, s):
    return (np.abs(u) < s) & (np.abs(v) < 0.3 * s)


def _ring(u, v, s):
    r2 = u ** 2 + v ** 2
    return (r2 < s ** 2) & (r2 > (0.55 * s) ** 2)


def _triangle(u, v, s):
    inside = np.ones_like(u, dtype=bool)
    for k in range(3):
        a = 2 * math.pi * k / 3
        inside &= (u * math.cos(a) + v * math.sin(a)) < 0.5 * s
    return inside


def _cross(u, v, s):
    return ((np.abs(u) < s) & (np.abs(v) < 0.28 * s)) | ((np.abs(v) < s) & (np.abs(u) < 0.28 * s))


def _square(u, v, s):
    return (np.abs(u) < 0.75 * s) & (np.abs(v) < 0.75 * s)


def _ellipse(u, v, s):
    return (u / s) ** 2 + (v / (0.5 * s)) ** 2 < 1


def _star(u, v, s):
    r = np.sqrt(u ** 2 + v ** 2)
    phi = np.arctan2(v, u)
    return r < s * (0.6 + 0.4 * np.cos(5 * phi))


SHAPES: dict[str, Callable] = {
    "disk": _disk, "bar": _bar, "ring": _ring, "triangle": _triangle,
    "cross": _cross, "square": _square, "ellipse": _ellipse, "star": _star,
}


def soften_mask(mask: np.ndarray, radius: int = 2) -> np.ndarray:
    """Box-blur a binary mask and renormalize it like a CAM."""
    m = mask.astype(np.float64)
    if radius > 0:
        m = uniform_filter(m, size=2 * radius + 1, mode="constant")
    return normalize_cam(m)


# per-category stripe period (pixels) of the foreground texture; backgrounds stay smooth
_STRIPE_PERIOD = {"disk": 6.0, "bar": 9.0, "ring": 5.0, "triangle": 7.0,
                  "cross": 8.0, "square": 4.0, "ellipse": 10.0, "star": 6.5}


def _render(rng, name, size, fg_range=(0.05, 0.6), max_tries=200):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    shape_fn = SHAPES[name]
    for _ in range(max_tries):
        s = size * rng.uniform(0.15, 0.42)
        cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
        theta = rng.uniform(0, 2 * math.pi)
        u, v = _rot(yy, xx, cy, cx, theta)
        mask = shape_fn(u, v, s)
        if fg_range[0] <= mask.mean() <= fg_range[1]:
            break
    else:
        raise RuntimeError("could not place a shape within the foreground fraction bounds")

    fg = rng.uniform(0.2, 0.8, size=3)
    stripes = 0.2 * np.sin(2 * math.pi * u / _STRIPE_PERIOD[name] + rng.uniform(0, 2 * math.pi))
    while True:
        bg_a, bg_b = rng.uniform(0, 1, size=(2, 3))
        if min(np.linalg.norm(fg - bg_a), np.linalg.norm(fg - bg_b)) > 0.45:
            break
    d = rng.normal(size=2)
    d /= np.linalg.norm(d)
    t = ((yy * d[0] + xx * d[1]) / size + 1) / 2
    img = bg_a[:, None, None] * (1 - t) + bg_b[:, None, None] * t
    img = np.where(mask[None], fg[:, None, None] + stripes[None], img)
    img = img + rng.normal(scale=0.03, size=img.shape)
    return np.clip(img, 0, 1).astype(np.float32), mask


def make_synthetic_dataset(n_categories: int = 4, exemplars_per_category: int = 20, image_size: int = 64,
                           rng_seed: int = 0, blur_radius: int = 2) -> SegmentationDataset:
    """Each category is one parametric shape with random pose and background.

    Foregrounds have a random colour and a striped texture whose period
    depends on the category; backgrounds are smooth gradients.
    Pseudo-masks are the ground truth box-blurred and renormalized.
    """
    if image_size < 32:
        raise DataValidationError(f"image_size must be >= 32, got {image_size}")
    if n_categories > len(SHAPES):
        raise DataValidationError(f"only {len(SHAPES)} shape generators available, asked for {n_categories}")
    names = list(SHAPES)[:n_categories]
    rng = np.random.default_rng(rng_seed)
    images, masks, soft, cats, ids = [], [], [], [], []
    for c, name in enumerate(names):
        for e in range(exemplars_per_category):
            img, m = _render(rng, name, image_size)
            images.append(img)
            masks.append(m.astype(np.uint8))
            soft.append(soften_mask(m, blur_radius).astype(np.float32))
            cats.append(c)
            ids.append(f"{name}_{e:04d}")
    return SegmentationDataset(
        images=np.stack(images), pseudo_masks=np.stack(soft), category_ids=np.array(cats),
        category_names=tuple(names), image_ids=tuple(ids), gt_masks=np.stack(masks))


# --- on-disk layout ---------------------------------------------------------
# root/images/<id>.png, root/masks/<id>.png (8-bit, /255 on load),
# root/categories.csv (id, category_name, category_id), optional root/ground_truth/<id>.png

def _read_categories(root: Path) -> list[tuple[str, str, int]]:
    path = root / "categories.csv"
    if not path.is_file():
        raise MaskLoadError(f"missing {path}")
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return [(r["id"], r["category_name"], int(r["category_id"])) for r in rows]
    except (KeyError, ValueError) as err:
        raise DataValidationError(f"{path}: bad row ({err}); columns are id, category_name, category_id") from None


def _read_mask(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        m = np.load(path).astype(np.float64)
    else:
        from PIL import Image

        with Image.open(path) as im:
            m = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    if not np.all(np.isfinite(m)) or m.min() < 0 or m.max() > 1:
        raise DataValidationError(f"{path}: mask values outside [0,1]")
    return m


def load_precomputed_masks(directory_path: str | Path) -> dict[str, np.ndarray]:
    """Pseudo-masks keyed by image id, validated to [0,1]."""
    root = Path(directory_path)
    rows = _read_categories(root)
    out, missing = {}, []
    for image_id, _, _ in rows:
        hits = [root / "masks" / f"{image_id}{ext}" for ext in (".png", ".npy")]
        hit = next((p for p in hits if p.is_file()), None)
        if hit is None:
            missing.append(image_id)
            continue
        out[image_id] = _read_mask(hit)
    if missing:
        raise MaskLoadError(f"no pseudo-mask for {len(missing)} image(s): {', '.join(missing)}")
    return out


def load_dataset_dir(root: str | Path) -> SegmentationDataset:
    from PIL import Image

    root = Path(root)
    rows = _read_categories(root)
    masks = load_precomputed_masks(root)
    n_cat = max(c for _, _, c in rows) + 1
    names = [str(c) for c in range(n_cat)]
    images, soft, gts, cats, ids = [], [], [], [], []
    have_gt = (root / "ground_truth").is_dir()
    for image_id, name, cat in rows:
        names[cat] = name
        p = root / "images" / f"{image_id}.png"
        if not p.is_file():
            raise MaskLoadError(f"missing image {p}")
        with Image.open(p) as im:
            images.append(np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0)
        soft.append(masks[image_id].astype(np.float32))
        if have_gt:
            gts.append((_read_mask(root / "ground_truth" / f"{image_id}.png") > 0.5).astype(np.uint8))
        cats.append(cat)
        ids.append(image_id)
    return SegmentationDataset(
        images=np.stack(images), pseudo_masks=np.stack(soft), category_ids=np.array(cats),
        category_names=tuple(names), image_ids=tuple(ids), gt_masks=np.stack(gts) if have_gt else None)


def save_dataset_dir(dataset: SegmentationDataset, root: str | Path) -> Path:
    """Write ``dataset`` in the on-disk layout read by :func:`load_dataset_dir`."""
    from PIL import Image

    root = Path(root)
    for sub in ("images", "masks") + (("ground_truth",) if dataset.gt_masks is not None else ()):
        (root / sub).mkdir(parents=True, exist_ok=True)
    with (root / "categories.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "category_name", "category_id"])
        for i, image_id in enumerate(dataset.image_ids):
            c = int(dataset.category_ids[i])
            w.writerow([image_id, dataset.category_names[c], c])
            img = (dataset.images[i].transpose(1, 2, 0) * 255).round().astype(np.uint8)
            Image.fromarray(img).save(root / "images" / f"{image_id}.png")
            m = (dataset.pseudo_masks[i] * 255).round().astype(np.uint8)
            Image.fromarray(m).save(root / "masks" / f"{image_id}.png")
            if dataset.gt_masks is not None:
                Image.fromarray(dataset.gt_masks[i].astype(np.uint8) * 255).save(root / "ground_truth" / f"{image_id}.png")
    return root


def collate(episodes: Sequence[Episode], device=None, dtype=None) -> Mapping:
    """Stack same-shot episodes into torch tensors."""
    import torch

    dtype = dtype or torch.get_default_dtype()
    shots = {e.shot_count for e in episodes}
    if len(shots) != 1:
        raise DataValidationError(f"cannot batch mixed shot counts {sorted(shots)}")

    def t(x):
        return torch.as_tensor(np.ascontiguousarray(x), dtype=dtype, device=device)

    batch = {
        "support_images": t(np.stack([e.support_images for e in episodes])),
        "support_masks": t(np.stack([e.support_pseudo_masks for e in episodes])),
        "query_image": t(np.stack([e.query_image for e in episodes])),
        "query_mask": t(np.stack([e.query_pseudo_mask for e in episodes])),
        "category_id": torch.tensor([e.category_id for e in episodes], dtype=torch.long, device=device),
    }
    if all(e.query_gt_mask is not None for e in episodes):
        batch["query_gt"] = t(np.stack([e.query_gt_mask for e in episodes]))
    return batch
