"""Episodic training, fold-wise meta-testing, checkpoints and ablations."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .config import Config, build_config
from .data import FoldSplit, SegmentationDataset, collate, load_folds, make_folds, sample_episode
from .errors import CheckpointError, ConfigError, NonFiniteLossError
from .head import LossWeights, episode_loss
from .model import TLGModel, build_model
from .runs import RunDir

log = logging.getLogger(__name__)

# seed-stream offsets so train, validation and test episodes never coincide
_VAL_STREAM = 1_000_003
_TRAIN_STREAM = 7_919


def compute_iou(pred_mask, gt_mask) -> float:
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def count_learnable_parameters(model: torch.nn.Module) -> int:
    """Trainable parameters only; the frozen backbone and text buffers are excluded."""
    seen = set()
    total = 0
    for p in model.parameters():
        if p.requires_grad and id(p) not in seen:
            seen.add(id(p))
            total += p.numel()
    return total


def module_parameter_counts(model: TLGModel) -> dict[str, int]:
    out = {}
    for name in ("ha", "ht", "hc", "head"):
        m = getattr(model, name, None)
        out[name] = 0 if m is None else count_learnable_parameters(m)
    return out


def folds_for(cfg: Config, n_categories: int) -> list[FoldSplit]:
    if cfg.data.folds_file:
        return load_folds(cfg.data.folds_file, n_categories)
    return make_folds(n_categories, cfg.data.n_folds)


def split_for(cfg: Config, n_categories: int) -> FoldSplit:
    folds = folds_for(cfg, n_categories)
    for f in folds:
        if f.fold_id == cfg.data.fold:
            return f
    raise ConfigError(f"fold {cfg.data.fold} not defined", [f"data.fold: available {[f.fold_id for f in folds]}"])


def dataset_for(cfg: Config) -> SegmentationDataset:
    from .data import load_dataset_dir, make_synthetic_dataset

    d = cfg.data
    if d.dataset == "synthetic":
        return make_synthetic_dataset(d.n_categories, d.exemplars_per_category, d.image_size, d.seed, d.blur_radius)
    ds = load_dataset_dir(d.dataset)
    if ds.image_size != d.image_size:
        raise ConfigError("dataset image size mismatch",
                          [f"data.image_size: config says {d.image_size}, dataset has {ds.image_size}"])
    return ds


@dataclass
class EvalReport:
    fold_miou: dict
    mean_miou: float
    per_category_iou: dict
    episode_count: int
    shot: int
    config_hash: str
    seed: int
    wall_clock: float
    learnable_parameters: int | None = None
    episode_ious: list = field(default_factory=list, repr=False)

    def to_dict(self, with_episodes: bool = False) -> dict:
        d = asdict(self)
        if not with_episodes:
            d.pop("episode_ious")
        d["fold_miou"] = {str(k): v for k, v in self.fold_miou.items()}
        d["per_category_iou"] = {str(k): v for k, v in self.per_category_iou.items()}
        return d

    def fold_rows(self) -> list[dict]:
        return [{"fold": k, "miou": v} for k, v in sorted(self.fold_miou.items())]


def _episodes(dataset, split, shot, seed, n, partition):
    return [sample_episode(dataset, split, shot, seed, i, partition) for i in range(n)]


def _gt(batch):
    return batch["query_gt"] if "query_gt" in batch else (batch["query_mask"] > 0.5).to(batch["query_mask"].dtype)


def evaluate(model, dataset: SegmentationDataset, split: FoldSplit, shot_count: int, n_episodes: int,
             seed: int, batch_size: int = 16, partition: str = "test", config_hash: str = "") -> EvalReport:
    """Mean query IoU per category, averaged over the fold's categories."""
    if not split.categories(partition):
        raise ValueError(f"fold {split.fold_id} has no {partition} categories")
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    start = time.perf_counter()
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    dtype = next(iter(model.parameters())).dtype if hasattr(model, "parameters") else torch.float32
    ious, cats = [], []
    with torch.no_grad():
        for lo in range(0, n_episodes, batch_size):
            eps = [sample_episode(dataset, split, shot_count, seed, i, partition)
                   for i in range(lo, min(lo + batch_size, n_episodes))]
            batch = collate(eps, dtype=dtype)
            pred = model.predict_batch(batch).query.hard_mask.cpu().numpy()
            gt = _gt(batch).cpu().numpy()
            for i, e in enumerate(eps):
                ious.append(compute_iou(pred[i], gt[i]))
                cats.append(e.category_id)
    if was_training:
        model.train()
    per_cat = {}
    for c in sorted(set(cats)):
        vals = [v for v, k in zip(ious, cats) if k == c]
        per_cat[c] = float(np.mean(vals))
    fold_miou = float(np.mean(list(per_cat.values())))
    return EvalReport({split.fold_id: fold_miou}, fold_miou, per_cat, len(ious), shot_count, config_hash, seed,
                      time.perf_counter() - start,
                      count_learnable_parameters(model) if isinstance(model, torch.nn.Module) else None, ious)


def combine_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Merge single-fold reports; the mean is the arithmetic mean of fold mIoUs."""
    fold = {}
    per_cat = {}
    for r in reports:
        fold.update(r.fold_miou)
        per_cat.update(r.per_category_iou)
    hashes = sorted({r.config_hash for r in reports})
    return EvalReport(fold, float(np.mean(list(fold.values()))), per_cat, sum(r.episode_count for r in reports),
                      reports[0].shot, ",".join(hashes), reports[0].seed, sum(r.wall_clock for r in reports),
                      reports[0].learnable_parameters, [v for r in reports for v in r.episode_ious])


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(model: TLGModel, cfg: Config, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "state_dict": model.state_dict(),
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "category_names": list(getattr(model, "category_names", [])),
        "extra": extra or {},
    }, path)
    return path


def load_checkpoint(path: str | Path, cfg: Config | None = None) -> tuple[TLGModel, Config]:
    """Rebuild the model; with ``cfg`` given, refuse a checkpoint trained under another config."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    stored = build_config(blob["config"])
    if stored.config_hash() != blob["config_hash"]:
        raise CheckpointError(f"{path}: stored config does not match its recorded hash")
    if cfg is not None and cfg.config_hash() != blob["config_hash"]:
        raise CheckpointError(f"{path}: config hash {cfg.config_hash()} does not match checkpoint "
                              f"hash {blob['config_hash']}; the checkpoint was trained under a different config")
    model = build_model(stored, blob["category_names"])
    model.category_names = tuple(blob["category_names"])
    model.load_state_dict(blob["state_dict"])
    return model, stored


# --- training ---------------------------------------------------------------

@dataclass
class TrainResult:
    model: TLGModel
    metrics: list
    best_val: float
    best_epoch: int
    checkpoint: Path | None = None
    run_dir: Path | None = None


def _batches(dataset, split, shot, seed, n, batch_size):
    for lo in range(0, n, batch_size):
        eps = [sample_episode(dataset, split, shot, seed, i, "train") for i in range(lo, min(lo + batch_size, n))]
        yield eps


def train(cfg: Config, dataset: SegmentationDataset, model: TLGModel | None = None, run: RunDir | None = None,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Episodic AdamW training; the best-on-validation weights are restored at the end.

    Validation episodes come from the fold's training categories on a separate
    seed stream, so the held-out categories never influence model selection.
    """
    tc = cfg.train
    split = split_for(cfg, dataset.n_categories)
    torch.manual_seed(tc.seed)
    if model is None:
        model = build_model(cfg, dataset.category_names)
    model.category_names = tuple(dataset.category_names)
    dtype = next(model.parameters()).dtype
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=tc.learning_rate, weight_decay=tc.weight_decay)
    weights = LossWeights(cfg.loss.alpha, cfg.loss.beta)
    shot = cfg.data.shot

    metrics = []
    best_val, best_epoch, best_state = -1.0, -1, None
    for epoch in range(tc.epochs):
        t0 = time.perf_counter()
        model.train()
        losses = []
        ep_seed = tc.seed * _TRAIN_STREAM + epoch
        for eps in _batches(dataset, split, shot, ep_seed, tc.episodes_per_epoch, tc.batch_size):
            batch = collate(eps, dtype=dtype)
            out = model.predict_batch(batch)
            loss = episode_loss(out.support, batch["support_masks"], out.query, batch["query_mask"], weights,
                                cfg.loss.eps, cfg.loss.binarize_targets)
            if not torch.isfinite(loss):
                ids = [(e.fold_id,) + tuple(e.key) for e in eps]
                if run is not None:
                    run.write_json("nonfinite_episode.json", {"epoch": epoch, "episodes": ids,
                                                              "loss": float(loss.detach())})
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}; episodes (fold, seed, index): {ids}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        val = evaluate(model, dataset, split, shot, tc.val_episodes, tc.seed + _VAL_STREAM,
                       batch_size=tc.batch_size, partition="train").mean_miou
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_miou": val,
               "seconds": round(time.perf_counter() - t0, 3)}
        metrics.append(row)
        log.info("epoch %d loss %.4f val mIoU %.4f", epoch, row["train_loss"], val)
        if progress:
            progress(row)
        if val > best_val:
            best_val, best_epoch = val, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()

    ckpt = None
    if run is not None:
        run.write_csv("metrics.csv", metrics)
        ckpt = save_checkpoint(model, cfg, run.path / "checkpoint.pt",
                               {"best_epoch": best_epoch, "best_val_miou": best_val})
    return TrainResult(model, metrics, best_val, best_epoch, ckpt, run.path if run else None)


# --- ablations --------------------------------------------------------------

TABLE4_ROWS = (("0-12", "0-12"), ("0,4,10", "3,9,12"), ("3,9,12", "0,4,10"), ("3,9,12", "2,7,11"))
TABLE3_ROWS = (
    ("backbone", dict(ha=False, ht=False, hc=False)),
    ("+HA", dict(ha=True, ht=False, hc=False)),
    ("+HA+HT", dict(ha=True, ht=True, hc=False)),
    ("+HA+HC", dict(ha=True, ht=False, hc=True)),
    ("+HA+HT+HC", dict(ha=True, ht=True, hc=True)),
)
FIG7_ROWS = ((1.0, 1.0), (1.0, 0.6), (0.6, 1.0), (1.0, 1.4), (1.4, 1.0), (1.4, 0.6), (0.6, 1.4))


def grid_points(preset: str) -> list[tuple[str, list[str]]]:
    """(label, overrides) pairs for a named ablation grid."""
    if preset == "layers":
        return [(f"S[{s}] Q[{q}]", [f"layers.support={s}", f"layers.query={q}"]) for s, q in TABLE4_ROWS]
    if preset == "modules":
        return [(name, [f"modules.{k}={str(v).lower()}" for k, v in t.items()]) for name, t in TABLE3_ROWS]
    if preset == "loss":
        return [(f"alpha={a} beta={b}", [f"loss.alpha={a}", f"loss.beta={b}"]) for a, b in FIG7_ROWS]
    raise ConfigError(f"unknown ablation preset {preset!r}", ["choose one of: layers, modules, loss"])


def run_ablation(base: Config, points: Iterable[tuple[str, list[str]]], dataset: SegmentationDataset | None = None,
                 run: RunDir | None = None, evaluate_fn: Callable | None = None,
                 folds: Sequence[int] | None = None) -> list[dict]:
    """Train and evaluate every grid point; invalid points are logged and skipped."""
    rows = []
    base_raw = base.to_dict()
    for label, overrides in points:
        try:
            cfg = build_config(base_raw, overrides)
        except ConfigError as err:
            log.warning("skipping ablation point %s: %s", label, err)
            rows.append({"point": label, "status": "skipped", "reason": str(err).splitlines()[0]})
            continue
        ds = dataset if dataset is not None else dataset_for(cfg)
        fold_ids = list(folds) if folds is not None else [cfg.data.fold]
        reports = []
        for f in fold_ids:
            fcfg = build_config(cfg.to_dict(), [f"data.fold={f}"])
            if evaluate_fn is not None:
                reports.append(evaluate_fn(fcfg, ds))
                continue
            result = train(fcfg, ds)
            reports.append(evaluate(result.model, ds, split_for(fcfg, ds.n_categories), fcfg.data.shot,
                                    fcfg.train.eval_episodes, fcfg.train.seed, fcfg.train.batch_size,
                                    config_hash=fcfg.config_hash()))
        rep = combine_reports(reports)
        row = {"point": label, "status": "ok", "support_layers": cfg.layers.support, "query_layers": cfg.layers.query,
               "ha": cfg.modules.ha, "ht": cfg.modules.ht, "hc": cfg.modules.hc,
               "alpha": cfg.loss.alpha, "beta": cfg.loss.beta, "mean_miou": rep.mean_miou,
               "learnable_parameters": rep.learnable_parameters, "config_hash": cfg.config_hash()}
        row.update({f"fold{k}": v for k, v in sorted(rep.fold_miou.items())})
        row["report"] = rep
        rows.append(row)
    if run is not None:
        run.write_csv("ablation.csv", [{k: v for k, v in r.items() if k != "report"} for r in rows])
    return rows
