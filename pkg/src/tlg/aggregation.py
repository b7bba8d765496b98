"""Heterogeneous aggregation of support and query tap features.

Each tap is reduced by a 1x1 convolution to ``channels / 2**alpha``
(alpha = 4, 2, 1 for low, middle, high), resized to the canonical grid and
equalized to a common width so the three levels can be summed.  Per-level
cosine correlation volumes between the branches are squeezed by a small
center-pivot 4D convolution stack into a 2D map that is concatenated to the
summed feature.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .backbone import LEVEL_ALPHA, LEVELS, LayerSelection
from .errors import ConfigError


def resize(x: torch.Tensor, size: int) -> torch.Tensor:
    if tuple(x.shape[-2:]) == (size, size):
        return x
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)


def reduced_channels(channels: int, level: str) -> int:
    factor = 2 ** LEVEL_ALPHA[level]
    if channels % factor:
        raise ConfigError(f"{level}-level tap has {channels} channels, not divisible by {factor}")
    return channels // factor


def project_and_align(tap_feature: torch.Tensor, level: str, proj: nn.Conv2d, grid: int) -> torch.Tensor:
    """1x1 reduction then bilinear resize to the ``grid`` x ``grid`` canonical grid.

    On backbones whose low taps already sit on the grid (ResNet50 at stride 8)
    the low level is projected only; the resize is a no-op there.
    """
    expected = reduced_channels(tap_feature.shape[1], level)
    if proj.out_channels != expected:
        raise ConfigError(f"projection for {level} level outputs {proj.out_channels}, expected {expected}")
    return resize(proj(tap_feature), grid)


def sum_levels(aligned) -> torch.Tensor:
    aligned = list(aligned)
    shapes = {tuple(a.shape) for a in aligned}
    if len(shapes) != 1:
        raise RuntimeError(f"cannot sum level features of shapes {sorted(shapes)}")
    return torch.stack(aligned).sum(0)


def cosine_correlation(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Raw 4D volume (B, Ha, Wa, Hb, Wb) of clamped cosine similarities.

    Zero-norm feature vectors give zero similarity.
    """
    B, C, ha, wa = a.shape
    hb, wb = b.shape[-2:]
    an = a.flatten(2)
    bn = b.flatten(2)
    an = an / an.norm(dim=1, keepdim=True).clamp_min(1e-12)
    bn = bn / bn.norm(dim=1, keepdim=True).clamp_min(1e-12)
    corr = torch.bmm(an.transpose(1, 2), bn)
    return corr.clamp(min=0).view(B, ha, wa, hb, wb)


class CenterPivotConv4d(nn.Module):
    """4D convolution as the sum of two 2D convolutions pivoting on each half."""

    def __init__(self, cin: int, cout: int, kernel: int = 3):
        super().__init__()
        self.conv_a = nn.Conv2d(cin, cout, kernel, padding=kernel // 2)
        self.conv_b = nn.Conv2d(cin, cout, kernel, padding=kernel // 2, bias=False)

    def forward(self, x):  # (B, C, Ha, Wa, Hb, Wb)
        B, C, ha, wa, hb, wb = x.shape
        xa = x.permute(0, 4, 5, 1, 2, 3).reshape(B * hb * wb, C, ha, wa)
        ya = self.conv_a(xa)
        O = ya.shape[1]
        ya = ya.view(B, hb, wb, O, ha, wa).permute(0, 3, 4, 5, 1, 2)
        xb = x.permute(0, 2, 3, 1, 4, 5).reshape(B * ha * wa, C, hb, wb)
        yb = self.conv_b(xb).view(B, ha, wa, O, hb, wb).permute(0, 3, 1, 2, 4, 5)
        return ya + yb


class CorrelationSqueeze(nn.Module):
    """Two center-pivot stages, then a mean over the other branch's positions."""

    def __init__(self, n_layers: int, width: int = 16):
        super().__init__()
        self.conv1 = CenterPivotConv4d(n_layers, width)
        self.conv2 = CenterPivotConv4d(width, width)
        self.out_channels = width

    def forward(self, volume):  # (B, L, Ha, Wa, Hb, Wb)
        x = F.relu(self.conv1(volume))
        x = F.relu(self.conv2(x))
        return x.mean(dim=(-2, -1))


def correlate(own_levels, other_levels, squeeze: CorrelationSqueeze, other_mask=None) -> torch.Tensor:
    """Per-level correlation of one branch against another, squeezed to 2D.

    ``other_mask`` (B, Hb, Wb) restricts the other branch to its foreground,
    which is how the support pseudo-mask conditions the query branch.
    """
    vols = []
    for own, other in zip(own_levels, other_levels):
        if other_mask is not None:
            other = other * other_mask[:, None]
        vols.append(cosine_correlation(own, other))
    return squeeze(torch.stack(vols, dim=1))


def assemble_support(f_sum: torch.Tensor, corr: torch.Tensor, init: torch.Tensor | None) -> torch.Tensor:
    base = f_sum if init is None else f_sum + init
    return torch.cat([base, corr], dim=1)


def assemble_query(f_sum: torch.Tensor, corr: torch.Tensor) -> torch.Tensor:
    return torch.cat([f_sum, corr], dim=1)


class BranchProjector(nn.Module):
    """Reduce/align/equalize every selected tap of one branch."""

    def __init__(self, taps_by_level: dict, channels: tuple, c_ha: int):
        super().__init__()
        self.taps_by_level = {lv: tuple(t) for lv, t in taps_by_level.items()}
        self.reduce = nn.ModuleDict()
        self.equalize = nn.ModuleDict()
        for lv in LEVELS:
            for t in self.taps_by_level[lv]:
                r = reduced_channels(channels[t], lv)
                self.reduce[str(t)] = nn.Conv2d(channels[t], r, 1)
                self.equalize[str(t)] = nn.Conv2d(r, c_ha, 1)

    @property
    def taps(self):
        return tuple(t for lv in LEVELS for t in self.taps_by_level[lv])

    def forward(self, taps: dict, grid: int) -> list[torch.Tensor]:
        levels = []
        for lv in LEVELS:
            parts = []
            for t in self.taps_by_level[lv]:
                aligned = project_and_align(taps[t], lv, self.reduce[str(t)], grid)
                parts.append(self.equalize[str(t)](aligned))
            levels.append(sum_levels(parts) if len(parts) > 1 else parts[0])
        return levels


class HeterogeneousAggregation(nn.Module):
    """Builds A_s and A_q from the two branches' tap features.

    With ``heterogeneous=False`` (the backbone-only ablation) both branches
    read the support taps through one shared projector, and neither the
    correlation nor the Gaussian offset is used.
    """

    def __init__(self, selection: LayerSelection, channels: tuple, grid: int, c_ha: int = 64,
                 init_std: float = 0.02, init_seed: int = 0, squeeze_channels: int = 16,
                 corr_mode: str = "cross", heterogeneous: bool = True):
        super().__init__()
        self.grid = grid
        self.heterogeneous = heterogeneous
        self.corr_mode = corr_mode
        self.c_ha = c_ha
        self.support_proj = BranchProjector(selection.by_level("support"), channels, c_ha)
        if heterogeneous:
            self.query_proj = BranchProjector(selection.by_level("query"), channels, c_ha)
            self.support_squeeze = CorrelationSqueeze(len(LEVELS), squeeze_channels)
            self.query_squeeze = CorrelationSqueeze(len(LEVELS), squeeze_channels)
            g = torch.Generator().manual_seed(init_seed)
            self.init = nn.Parameter(torch.randn(c_ha, grid, grid, generator=g) * init_std)
            self.out_channels = c_ha + squeeze_channels
        else:
            self.query_proj = self.support_proj
            self.out_channels = c_ha

    @property
    def support_taps(self):
        return self.support_proj.taps

    @property
    def query_taps(self):
        return self.query_proj.taps

    def forward(self, support_taps: dict, query_taps: dict, support_mask: torch.Tensor, shots: int):
        """support_taps: maps of shape (B*K, C, h, w); query_taps: (B, C, h, w).

        Returns A_s (B*K, C', G, G), A_q (B, C', G, G) and the aligned levels.
        """
        fs = self.support_proj(support_taps, self.grid)
        fq = self.query_proj(query_taps, self.grid)
        fs_sum, fq_sum = sum_levels(fs), sum_levels(fq)
        aligned = {"support": fs, "query": fq}
        if not self.heterogeneous:
            return fs_sum, fq_sum, aligned

        B = fq_sum.shape[0]
        mask = resize(support_mask[:, None], self.grid)[:, 0]  # (B*K, G, G)
        fq_rep = [f.repeat_interleave(shots, dim=0) for f in fq]
        if self.corr_mode == "cross":
            corr_s = correlate(fs, fq_rep, self.support_squeeze)
            corr_q = correlate(fq_rep, fs, self.query_squeeze, other_mask=mask)
        else:
            corr_s = correlate(fs, fs, self.support_squeeze)
            corr_q = correlate(fq_rep, fq_rep, self.query_squeeze)
        corr_q = corr_q.view(B, shots, *corr_q.shape[1:]).mean(1)
        A_s = assemble_support(fs_sum, corr_s, self.init)
        A_q = assemble_query(fq_sum, corr_q)
        return A_s, A_q, aligned
