import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import bce_loop
from tlg.errors import PromptBankError
from tlg.head import LossWeights, MaskPrediction, SegmentationHead, bce, episode_loss
from tlg.prompts import (
    Adapter,
    HeterogeneousCLIP,
    adapt_query,
    build_prompt_bank,
    encode_text,
    match_indices,
    max_match,
    read_bank_file,
    stub_encode,
)


def test_builtin_banks_are_complete():
    for name, n in (("synthetic", 8), ("pascal", 20), ("coco", 80)):
        rows = read_bank_file(name)
        assert len(rows) == n
        bank = build_prompt_bank([r["category_name"] for r in rows], name)
        for i in bank:
            r = bank[i]
            assert r.background_prompts[0] != r.background_prompts[1]
            assert all(r.background_prompts) and r.fine_grained_prompt


def test_pascal_bird_backgrounds():
    bank = build_prompt_bank(["aeroplane", "bicycle", "bird"], "pascal")
    assert set(bank.by_name("bird").background_prompts) == {"tree", "sky"}


def test_bank_errors(tmp_path):
    with pytest.raises(PromptBankError, match="unicorn"):
        build_prompt_bank(["disk", "unicorn"])
    p = tmp_path / "bank.csv"
    p.write_text("category_id,category_name,fine_grained_prompt,bg1,bg2\n0,disk,,sky,sky\n")
    with pytest.raises(PromptBankError, match="distinct"):
        build_prompt_bank(["disk"], p)
    p.write_text("category_id,category_name,fine_grained_prompt,bg1,bg2\n0,disk,,sky,grass\n")
    assert build_prompt_bank(["disk"], p)[0].fine_grained_prompt == "a photo of a disk"
    with pytest.raises(PromptBankError):
        read_bank_file(tmp_path / "missing.csv")


def test_stub_encoder_deterministic_and_normalized():
    a = encode_text(["a photo of a bird", "a photo of a cat"], 64).matrix
    b = encode_text(["a photo of a bird", "a photo of a cat"], 64).matrix
    assert torch.equal(a, b)
    assert torch.allclose(a.norm(dim=1), torch.ones(2, dtype=a.dtype))
    assert float(a[0] @ a[1]) < 0.99
    assert stub_encode("Bird!", 16).shape == (16,)
    with pytest.raises(PromptBankError):
        encode_text(["ok", "  "])


def test_external_encoder_interface():
    emb = encode_text(["x", "y"], encoder=lambda ps: torch.ones(len(ps), 3) * 2)
    assert emb.source == "external" and torch.allclose(emb.matrix.norm(dim=1), torch.ones(2, dtype=torch.float64))


def test_max_match_picks_argmax_and_lowest_index_on_ties():
    fg = torch.eye(3)
    bg = torch.arange(18.0).view(3, 2, 3)
    res = max_match(torch.tensor([0.1, 0.9, 0.2]), fg, bg)
    assert res.category_index == 1 and torch.equal(res.backgrounds, bg[1])
    tie = torch.stack([fg[0], fg[0], fg[1]])
    assert int(match_indices(torch.tensor([[1.0, 0.0, 0.0]]), tie)[0]) == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_match_indices_agrees_with_loop(seed):
    g = torch.Generator().manual_seed(seed)
    fg = torch.nn.functional.normalize(torch.randn(6, 5, generator=g, dtype=torch.float64), dim=1)
    s = torch.randn(5, generator=g, dtype=torch.float64)
    sims = [float(fg[i] @ s) for i in range(6)]
    assert int(match_indices(s[None], fg)[0]) == sims.index(max(sims))


def test_adapter_mixing_coefficient():
    torch.manual_seed(0)
    ad = Adapter(8, 4, ratio=4, rho_init=0.0)
    v, c = torch.randn(2, 8, 3, 3), torch.randn(2, 4)
    assert torch.equal(ad(v, c), v)
    with torch.no_grad():
        ad.rho.fill_(1.0)
    assert torch.allclose(ad(v, c), ad.bottleneck(v, c))
    assert ad.down.out_channels == 2
    with pytest.raises(ValueError):
        ad(v, torch.randn(2, 5))


def test_query_adapter_uses_averaged_backgrounds():
    torch.manual_seed(0)
    ad = Adapter(4, 6, rho_init=1.0)
    v = torch.randn(1, 4, 2, 2)
    fg = torch.randn(1, 3)
    bg = torch.randn(1, 2, 3)
    expected = ad(v, torch.cat([fg, torch.nn.functional.normalize(bg.mean(1), dim=-1)], dim=-1))
    assert torch.allclose(adapt_query(v, fg, bg, ad), expected)


def test_heterogeneous_clip_branch_conditioning():
    bank = build_prompt_bank(["disk", "bar", "ring", "triangle"])
    hc = HeterogeneousCLIP(bank, 16, d_text=32)
    assert hc.support_adapter.cond_dim == 32 and hc.query_adapter.cond_dim == 64
    assert all(not b.requires_grad for b in hc.buffers())
    vs, vq = torch.randn(4, 16, 4, 4), torch.randn(2, 16, 4, 4)
    ms, mq, idx = hc(vs, vq, torch.tensor([2, 0]), shots=2)
    assert ms.shape == vs.shape and mq.shape == vq.shape
    assert idx.tolist() == [2, 0]
    vis = HeterogeneousCLIP(bank, 16, d_text=32, match_source="visual")
    assert 0 <= int(vis.match(vq, None)[0]) < 4


def test_bce_matches_loop_and_clamps():
    g = torch.Generator().manual_seed(0)
    p = torch.rand(2, 5, 5, generator=g, dtype=torch.float64)
    y = torch.rand(2, 5, 5, generator=g, dtype=torch.float64)
    assert math.isclose(float(bce(p, y)), bce_loop(p.numpy(), y.numpy()), rel_tol=1e-12)
    hard = bce(torch.ones(1, 2, 2, dtype=torch.float64), torch.zeros(1, 2, 2, dtype=torch.float64))
    assert math.isfinite(float(hard)) and math.isclose(float(hard), -math.log(1e-7), rel_tol=1e-6)
    with pytest.raises(ValueError):
        bce(p, y[:, :4])


def test_bce_accepts_predictions_and_binarized_targets():
    logits = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    pred = MaskPrediction(logits)
    y = torch.rand(1, 4, 4, dtype=torch.float64)
    assert torch.equal(bce(pred, y), bce(torch.softmax(logits, 1)[:, 1], y))
    assert torch.equal(bce(pred, y, binarize=True), bce(pred, (y > 0.5).double()))


def test_episode_loss_weighting():
    g = torch.Generator().manual_seed(1)
    ps = torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64)
    ms = torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64)
    pq = torch.rand(2, 4, 4, generator=g, dtype=torch.float64)
    mq = torch.rand(2, 4, 4, generator=g, dtype=torch.float64)
    support = np.mean([bce_loop(ps[:, k].numpy(), ms[:, k].numpy()) for k in range(3)])
    query = bce_loop(pq.numpy(), mq.numpy())
    got = float(episode_loss(ps, ms, pq, mq, LossWeights(1.4, 0.6)))
    assert math.isclose(got, 1.4 * support + 0.6 * query, rel_tol=1e-12)
    assert math.isclose(float(episode_loss(ps, ms, pq, mq, LossWeights(0.0, 1.0))), query, rel_tol=1e-12)
    with pytest.raises(ValueError):
        LossWeights(-1.0, 1.0)


def test_segmentation_head_output():
    head = SegmentationHead(20, 8)
    pred = head(torch.randn(3, 20, 8, 8), 64)
    assert pred.logits.shape == (3, 2, 64, 64)
    assert torch.allclose(pred.probabilities.sum(1), torch.ones(3, 64, 64))
    assert pred.hard_mask.shape == (3, 64, 64)
