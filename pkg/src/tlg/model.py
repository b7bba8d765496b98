"""Assembly of the full support/query network from the configured modules."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .aggregation import HeterogeneousAggregation
from .backbone import LayerSelection, ToyBackbone
from .config import Config
from .head import MaskPrediction, SegmentationHead
from .prompts import HeterogeneousCLIP, build_prompt_bank
from .transport import HeterogeneousTransport


@dataclass
class ModelOutput:
    support: MaskPrediction  # logits (B, K, 2, H, W)
    query: MaskPrediction    # logits (B, 2, H, W)
    extras: dict = field(default_factory=dict)


def build_backbone(cfg: Config) -> nn.Module:
    return ToyBackbone(cfg.backbone.seed, cfg.backbone.width_multiplier)


class TLGModel(nn.Module):
    def __init__(self, cfg: Config, category_names, backbone: nn.Module | None = None):
        super().__init__()
        self.cfg = cfg
        self.image_size = cfg.data.image_size
        self.grid = cfg.grid_size
        self.selection = LayerSelection.parse(cfg.layers.support, cfg.layers.query)
        if not cfg.modules.ha:
            # homogeneous baseline: the query reads the support's taps
            self.selection = LayerSelection(self.selection.support_layers, self.selection.support_layers)
        self.backbone = backbone if backbone is not None else build_backbone(cfg)
        channels = self.backbone.channels

        self.ha = HeterogeneousAggregation(
            self.selection, channels, self.grid, c_ha=cfg.ha.c_ha, init_std=cfg.ha.init_std,
            init_seed=cfg.ha.init_seed, squeeze_channels=cfg.ha.squeeze_channels,
            corr_mode=cfg.ha.corr_mode, heterogeneous=cfg.modules.ha)
        width = self.ha.out_channels

        self.ht = None
        if cfg.modules.ht:
            h = cfg.ht
            self.ht = HeterogeneousTransport(
                width, channels[h.support_residual_tap], channels[h.query_residual_tap],
                d_k=h.d_k, lam=h.lam, tol=h.tol, max_iters=h.max_iters, unrolled_iters=h.unrolled_iters,
                cost_threshold=h.cost_threshold, pool_size=h.pool_size)

        self.hc = None
        if cfg.modules.hc:
            bank = build_prompt_bank(list(category_names), cfg.hc.bank)
            self.hc = HeterogeneousCLIP(bank, width, cfg.hc.d_text, cfg.hc.bottleneck_ratio,
                                        cfg.hc.rho_init, cfg.hc.match_source)

        self.head = SegmentationHead(width, cfg.train.head_channels)

    def support_taps(self):
        taps = set(self.ha.support_taps)
        if self.ht is not None:
            taps.add(self.cfg.ht.support_residual_tap)
        return sorted(taps)

    def query_taps(self):
        taps = set(self.ha.query_taps)
        if self.ht is not None:
            taps.add(self.cfg.ht.query_residual_tap)
        return sorted(taps)

    def aggregate(self, support_images, support_masks, query_image):
        """HA stage only; returns (A_s, A_q, taps, aligned)."""
        B, K = support_images.shape[:2]
        s_imgs = support_images.flatten(0, 1)
        with torch.no_grad():
            s_taps = self.backbone(s_imgs, self.support_taps())
            q_taps = self.backbone(query_image, self.query_taps())
        A_s, A_q, aligned = self.ha(s_taps, q_taps, support_masks.flatten(0, 1), K)
        return A_s, A_q, (s_taps, q_taps), aligned

    def forward(self, support_images, support_masks, query_image, category_id=None,
                keep_intermediates: bool = False) -> ModelOutput:
        B, K = support_images.shape[:2]
        A_s, A_q, (s_taps, q_taps), aligned = self.aggregate(support_images, support_masks, query_image)
        extras = {}
        if keep_intermediates:
            extras.update(A_s=A_s, A_q=A_q, aligned=aligned, support_taps=s_taps, query_taps=q_taps)

        if self.ht is not None:
            v_s, v_q, info = self.ht(A_s, A_q, s_taps[self.cfg.ht.support_residual_tap],
                                     q_taps[self.cfg.ht.query_residual_tap])
            if keep_intermediates:
                extras["transport"] = info
        else:
            v_s, v_q = A_s, A_q

        if self.hc is not None:
            if category_id is None:
                category_id = torch.zeros(B, dtype=torch.long, device=A_q.device)
            v_s, v_q, matched = self.hc(v_s, v_q, category_id, K)
            if keep_intermediates:
                extras["matched"] = matched

        pred_s = self.head(v_s, self.image_size)
        pred_q = self.head(v_q, self.image_size)
        support = MaskPrediction(pred_s.logits.view(B, K, *pred_s.logits.shape[1:]))
        return ModelOutput(support, pred_q, extras)

    def predict_batch(self, batch, **kw) -> ModelOutput:
        return self(batch["support_images"], batch["support_masks"], batch["query_image"],
                    batch.get("category_id"), **kw)


def build_model(cfg: Config, category_names, backbone=None) -> TLGModel:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(cfg.train.seed)
    try:
        return TLGModel(cfg, category_names, backbone)
    finally:
        torch.random.set_rng_state(gen_state)
