"""Heterogeneous transport: attention, Sinkhorn denoising and pooled residuals."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from .aggregation import resize


class SinkhornConvergenceWarning(RuntimeWarning):
    pass


@dataclass
class TransportPlan:
    plan: torch.Tensor              # (..., n, m), nonnegative
    cost: torch.Tensor
    row_marginal: torch.Tensor
    col_marginal: torch.Tensor
    lam: float
    iterations_used: int
    marginal_violation: float
    tol: float = 0.0
    log_domain: bool = False
    objective_trace: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.marginal_violation < self.tol


def entropic_objective(plan: torch.Tensor, cost: torch.Tensor, lam: float) -> torch.Tensor:
    """sum(plan * cost) - H(plan) / lam, with H(plan) = -sum(plan log plan) and 0 log 0 = 0."""
    plogp = torch.where(plan > 0, plan * torch.log(plan.clamp_min(_tiny(plan))), torch.zeros_like(plan))
    return (plan * cost).sum(dim=(-2, -1)) + plogp.sum(dim=(-2, -1)) / lam


def round_to_marginals(plan: torch.Tensor, r: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """Closest feasible coupling in the rounding sense of Altschuler et al. (2017)."""
    tiny = _tiny(plan)
    x = torch.clamp(r / plan.sum(-1).clamp_min(tiny), max=1.0)
    p = plan * x[..., :, None]
    y = torch.clamp(c / p.sum(-2).clamp_min(tiny), max=1.0)
    p = p * y[..., None, :]
    er = r - p.sum(-1)
    ec = c - p.sum(-2)
    denom = er.sum(-1, keepdim=True).clamp_min(tiny)
    return p + er[..., :, None] * ec[..., None, :] / denom[..., None]


def _tiny(x: torch.Tensor) -> float:
    return torch.finfo(x.dtype).tiny


def _uniform(n, like):
    return torch.full(like.shape[:-2] + (n,), 1.0 / n, dtype=like.dtype, device=like.device)


def sinkhorn(cost: torch.Tensor, lam: float = 10.0, r=None, c=None, max_iters: int = 200, tol: float = 1e-6,
             unrolled: bool = False, log_domain: bool | None = None, record_objective: bool = False) -> TransportPlan:
    """Entropic OT by alternating scaling: plan = diag(u) exp(-lam*cost) diag(v).

    ``unrolled`` runs exactly ``max_iters`` iterations with no data-dependent
    stopping, which keeps the result a fixed differentiable function of the
    cost.  Otherwise iteration stops once the largest marginal violation drops
    below ``tol``.  The log-domain path is used when the kernel underflows
    (or when forced with ``log_domain=True``).
    ``objective_trace`` records the entropic objective of the feasible
    rounding of each iterate.
    """
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if not torch.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite values")
    n, m = cost.shape[-2:]
    r = _uniform(n, cost) if r is None else torch.as_tensor(r, dtype=cost.dtype, device=cost.device).expand(cost.shape[:-1])
    c = _uniform(m, cost) if c is None else torch.as_tensor(c, dtype=cost.dtype, device=cost.device).expand(cost.shape[:-2] + (m,))
    if (r <= 0).any() or (c <= 0).any():
        raise ValueError("marginals must be strictly positive")

    log_k = -lam * cost
    if log_domain is None:
        k = torch.exp(log_k)
        log_domain = bool((k.sum(-1) == 0).any() or (k.sum(-2) == 0).any())
    trace = []
    violation = float("inf")
    it = 0
    if log_domain:
        log_r, log_c = torch.log(r), torch.log(c)
        f = torch.zeros_like(r)
        g = torch.zeros_like(c)
        for it in range(1, max_iters + 1):
            f = log_r - torch.logsumexp(log_k + g[..., None, :], dim=-1)
            g = log_c - torch.logsumexp(log_k + f[..., :, None], dim=-2)
            if not unrolled or record_objective:
                plan = torch.exp(f[..., :, None] + log_k + g[..., None, :])
            if record_objective:
                trace.append(float(entropic_objective(round_to_marginals(plan.detach(), r, c), cost, lam).sum()))
            if not unrolled:
                violation = float((plan.detach().sum(-1) - r).abs().max())
                if violation < tol:
                    break
        plan = torch.exp(f[..., :, None] + log_k + g[..., None, :])
    else:
        k = torch.exp(log_k)
        v = torch.ones_like(c)
        for it in range(1, max_iters + 1):
            u = r / (k @ v[..., None])[..., 0]
            v = c / (k.transpose(-2, -1) @ u[..., None])[..., 0]
            if not unrolled or record_objective:
                plan = u[..., :, None] * k * v[..., None, :]
            if record_objective:
                trace.append(float(entropic_objective(round_to_marginals(plan.detach(), r, c), cost, lam).sum()))
            if not unrolled:
                violation = float((plan.detach().sum(-1) - r).abs().max())
                if violation < tol:
                    break
        plan = u[..., :, None] * k * v[..., None, :]
    with torch.no_grad():
        violation = float(torch.maximum((plan.sum(-1) - r).abs().max(), (plan.sum(-2) - c).abs().max()))
    if not unrolled and violation >= tol:
        warnings.warn(f"Sinkhorn stopped after {it} iterations with marginal violation {violation:.3e}",
                      SinkhornConvergenceWarning, stacklevel=2)
    return TransportPlan(plan, cost, r, c, lam, it, violation, tol, log_domain, trace)


def foreground_cost(feature: torch.Tensor) -> torch.Tensor:
    """1 - max(cos, 0) between every pair of spatial positions; (B, HW, HW) in [0, 1].

    A zero vector has similarity 0 with everything, itself included.
    """
    x = feature.flatten(2)  # (B, C, HW)
    x = x / x.norm(dim=1, keepdim=True).clamp_min(1e-12)
    sim = torch.bmm(x.transpose(1, 2), x).clamp(min=0, max=1)
    return 1.0 - sim


def contextualize(a_flat: torch.Tensor) -> torch.Tensor:
    """Parameter-free self-attention pass giving the attention-weight features A''.

    a_flat: (B, HW, C).
    """
    d = a_flat.shape[-1]
    w = torch.softmax(a_flat @ a_flat.transpose(1, 2) / math.sqrt(d), dim=-1)
    return w @ a_flat


def cross_attention(a_flat: torch.Tensor, attention_weights: torch.Tensor, w_q: torch.Tensor,
                    w_k: torch.Tensor, w_v: torch.Tensor):
    """softmax((A'' Wq)(A' Wk)^T / sqrt(d_k)) (A' Wv).

    a_flat, attention_weights: (B, HW, C); w_q, w_k: (C, d_k); w_v: (C, C_out).
    Returns the attended features (B, HW, C_out) and the row-stochastic matrix.
    """
    d_k = w_k.shape[-1]
    q = attention_weights @ w_q
    k = a_flat @ w_k
    attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(d_k), dim=-1)
    return attn @ (a_flat @ w_v), attn


def ot_denoise(feature: torch.Tensor, plan: TransportPlan | torch.Tensor, cost: torch.Tensor | None = None,
               threshold: float = 0.5) -> torch.Tensor:
    """Scale each position by the share of its transported mass that uses low-cost edges.

    feature: (B, C, H, W); plan, cost: (B, HW, HW).
    """
    if isinstance(plan, TransportPlan):
        cost = plan.cost if cost is None else cost
        plan = plan.plan
    B, C, H, W = feature.shape
    if plan.shape[-1] != H * W or plan.shape[-2] != H * W:
        raise ValueError(f"plan of shape {tuple(plan.shape)} does not match {H}x{W} feature")
    keep = (cost < threshold).to(plan.dtype)
    row = plan.sum(-1)
    weight = (plan * keep).sum(-1) / row.clamp_min(_tiny(plan))
    return feature * weight.view(B, 1, H, W)


def select_third(x: torch.Tensor) -> torch.Tensor:
    """Every third channel starting at 0: ceil(C/3) channels."""
    return x[:, ::3]


def avg_pool_same(x, k=3):
    return F.avg_pool2d(x, k, stride=1, padding=k // 2, count_include_pad=False)


def max_pool_same(x, k=3):
    return F.max_pool2d(x, k, stride=1, padding=k // 2)


class HeterogeneousResidual(nn.Module):
    """OT + pool(select_third(tap)) projected and resized to OT's shape."""

    def __init__(self, tap_channels: int, out_channels: int, pool: str, pool_size: int = 3):
        super().__init__()
        self.pool = avg_pool_same if pool == "avg" else max_pool_same
        self.pool_size = pool_size
        self.proj = nn.Conv2d(len(range(0, tap_channels, 3)), out_channels, 1)

    def pooled(self, tap):
        return self.pool(select_third(tap), self.pool_size)

    def forward(self, ot, tap):
        return ot + resize(self.proj(self.pooled(tap)), ot.shape[-1])


def residual_support(ot_s, tap9_feature, residual: HeterogeneousResidual):
    return residual(ot_s, tap9_feature)


def residual_query(ot_q, tap4_feature, residual: HeterogeneousResidual):
    return residual(ot_q, tap4_feature)


class BranchTransport(nn.Module):
    """Attention, Sinkhorn denoising and residual for one branch."""

    def __init__(self, channels: int, tap_channels: int, pool: str, d_k: int | None = None,
                 lam: float = 10.0, tol: float = 1e-6, max_iters: int = 200, unrolled_iters: int = 20,
                 cost_threshold: float = 0.5, pool_size: int = 3):
        super().__init__()
        d_k = d_k or channels
        scale = 1.0 / math.sqrt(channels)
        self.w_q = nn.Parameter(torch.randn(channels, d_k) * scale)
        self.w_k = nn.Parameter(torch.randn(channels, d_k) * scale)
        self.w_v = nn.Parameter(torch.eye(channels) + torch.randn(channels, channels) * scale * 0.1)
        self.residual = HeterogeneousResidual(tap_channels, channels, pool, pool_size)
        self.lam, self.tol, self.max_iters = lam, tol, max_iters
        self.unrolled_iters = unrolled_iters
        self.cost_threshold = cost_threshold

    def forward(self, A: torch.Tensor, tap: torch.Tensor):
        B, C, H, W = A.shape
        a_flat = A.flatten(2).transpose(1, 2)
        attended, attn = cross_attention(a_flat, contextualize(a_flat), self.w_q, self.w_k, self.w_v)
        attended = attended.transpose(1, 2).reshape(B, -1, H, W)
        cost = foreground_cost(A)
        if self.training:
            plan = sinkhorn(cost, self.lam, max_iters=self.unrolled_iters, unrolled=True)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", SinkhornConvergenceWarning)
                plan = sinkhorn(cost, self.lam, max_iters=self.max_iters, tol=self.tol)
        ot = ot_denoise(attended, plan, threshold=self.cost_threshold)
        out = self.residual(ot, tap)
        return out, {"attention": attn, "plan": plan}


class HeterogeneousTransport(nn.Module):
    def __init__(self, channels: int, support_tap_channels: int, query_tap_channels: int, **kw):
        super().__init__()
        self.support = BranchTransport(channels, support_tap_channels, "avg", **kw)
        self.query = BranchTransport(channels, query_tap_channels, "max", **kw)

    def forward(self, A_s, A_q, support_tap, query_tap):
        os_, info_s = self.support(A_s, support_tap)
        oq, info_q = self.query(A_q, query_tap)
        return os_, oq, {"support": info_s, "query": info_q}
