"""Static PNG renderings of one episode: tap features, attention, transport plan, masks."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import torch  # noqa: E402


def _energy(feature: torch.Tensor):
    # channel-RMS map of the first image in the batch
    return feature[0].pow(2).mean(dim=0).sqrt().cpu().numpy()


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def render_taps(taps: dict, branch: str, out_dir: Path, only=None) -> list[Path]:
    paths = []
    for t, feat in sorted(taps.items()):
        if only is not None and t not in only:
            continue
        fig, ax = plt.subplots(figsize=(3, 3))
        ax.imshow(_energy(feat), cmap="viridis")
        ax.set_title(f"{branch} tap {t} ({feat.shape[1]} ch)")
        ax.axis("off")
        paths.append(_save(fig, out_dir / f"{branch}_tap{t:02d}.png"))
    return paths


def render_attention(attn: torch.Tensor, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(attn[0].cpu().numpy(), cmap="magma")
    ax.set_xlabel("key position")
    ax.set_ylabel("query position")
    ax.set_title("query-branch attention")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def render_plan(plan, path: Path) -> tuple[Path, dict]:
    """Heat map of the coupling with its row sums drawn alongside; returns the row-sum check."""
    tau = plan.plan[0].detach().cpu().double()
    rows = tau.sum(dim=1)
    target = plan.row_marginal[0].detach().cpu().double() if plan.row_marginal.dim() > 1 \
        else plan.row_marginal.detach().cpu().double()
    deviation = float((rows - target).abs().max())
    fig, (ax, side) = plt.subplots(1, 2, figsize=(6, 4), gridspec_kw={"width_ratios": [5, 1]})
    ax.imshow(tau.numpy(), cmap="Blues")
    ax.set_title("transport plan")
    side.barh(range(len(rows)), rows.numpy(), color="tab:blue")
    side.invert_yaxis()
    side.set_title("row sums", fontsize=8)
    side.set_yticks([])
    fig.suptitle(f"max |row sum - marginal| = {deviation:.2e}", fontsize=8)
    return _save(fig, path), {"row_sum_max_deviation": deviation, "row_marginal": float(target.mean()),
                              "iterations_used": plan.iterations_used}


def render_masks(query_image, pred_fg, pseudo, path: Path) -> Path:
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    axes[0].imshow(query_image[0].permute(1, 2, 0).cpu().numpy())
    axes[0].set_title("query")
    axes[1].imshow(pred_fg[0].cpu().numpy(), cmap="gray", vmin=0, vmax=1)
    axes[1].set_title("predicted foreground")
    axes[2].imshow(pseudo[0].cpu().numpy(), cmap="gray", vmin=0, vmax=1)
    axes[2].set_title("pseudo-mask")
    for a in axes:
        a.axis("off")
    return _save(fig, path)


def render_episode(model, batch, out_dir, taps=None) -> tuple[list[Path], dict]:
    """Run one collated episode through ``model`` and write its PNGs into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    with torch.no_grad():
        out = model.predict_batch(batch, keep_intermediates=True)
    ex = out.extras
    if taps is not None:
        known = set(ex["support_taps"]) | set(ex["query_taps"])
        missing = sorted(set(taps) - known)
        if missing:
            raise ValueError(f"taps {missing} are not read by this model; available {sorted(known)}")
    paths = render_taps(ex["support_taps"], "support", out_dir, taps)
    paths += render_taps(ex["query_taps"], "query", out_dir, taps)
    summary = {"taps": sorted(set(ex["support_taps"]) | set(ex["query_taps"])) if taps is None else taps}
    if "transport" in ex:
        info = ex["transport"]["query"]
        paths.append(render_attention(info["attention"], out_dir / "attention.png"))
        p, check = render_plan(info["plan"], out_dir / "transport_plan.png")
        paths.append(p)
        summary["transport"] = check
    paths.append(render_masks(batch["query_image"], out.query.foreground, batch["query_mask"],
                              out_dir / "masks.png"))
    return paths, summary
