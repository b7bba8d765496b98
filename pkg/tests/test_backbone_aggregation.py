import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import cosine_volume_loop
from tlg.aggregation import (
    BranchProjector,
    CenterPivotConv4d,
    HeterogeneousAggregation,
    cosine_correlation,
    project_and_align,
    reduced_channels,
    sum_levels,
)
from tlg.backbone import (
    LEVEL_ALPHA,
    LEVEL_TAPS,
    RESNET50_TAPS,
    VGG16_TAPS,
    ExternalBackbone,
    LayerSelection,
    ToyBackbone,
    extract_taps,
    level_of,
)
from tlg.errors import ConfigError


@pytest.fixture(scope="module")
def bb():
    return ToyBackbone(seed=0)


def test_level_assignment():
    assert [level_of(t) for t in range(13)] == ["low"] * 4 + ["middle"] * 6 + ["high"] * 3
    with pytest.raises(ConfigError):
        level_of(13)


def test_layer_selection_parsing_and_validation():
    sel = LayerSelection.parse("3,9,12", "0,4,10")
    assert sel.by_level("query") == {"low": (0,), "middle": (4,), "high": (10,)}
    assert sel.swapped().support_layers == (0, 4, 10)
    full = LayerSelection.parse("0-12", "0-12")
    assert full.label("support") == "0-12" and not full.is_triple
    with pytest.raises(ConfigError, match="middle"):
        LayerSelection.parse("1,2,3", "0,4,10")
    with pytest.raises(ConfigError, match="duplicate"):
        LayerSelection.parse("3,3,9,12", "0,4,10")
    with pytest.raises(ConfigError):
        LayerSelection.parse("3,9,x", "0,4,10")
    with pytest.raises(ConfigError):
        LayerSelection.parse("3,9,13", "0,4,10")


def test_toy_backbone_tap_shapes(bb):
    feats = extract_taps(bb, torch.rand(2, 3, 64, 64), range(13))
    specs = bb.tap_specs(64)
    for t in range(13):
        assert tuple(feats[t].shape) == (2, specs[t].channels) + specs[t].spatial
    assert specs[0].spatial == (16, 16) and specs[4].spatial == (8, 8) and specs[12].spatial == (4, 4)


def test_toy_backbone_frozen_and_deterministic(bb):
    assert not any(p.requires_grad for p in bb.parameters())
    bb.train()
    assert not bb.training
    x = torch.rand(1, 3, 64, 64)
    other = ToyBackbone(seed=0)
    assert torch.equal(bb(x, [9])[9], other(x, [9])[9])
    assert not torch.equal(bb(x, [9])[9], ToyBackbone(seed=1)(x, [9])[9])
    single = extract_taps(bb, x[0], [4])
    assert single[4].shape == bb(x, [4])[4].shape[1:]


def test_toy_backbone_rejects_indivisible_size(bb):
    with pytest.raises(ConfigError):
        bb(torch.rand(1, 3, 60, 60), [0])


def test_reference_tap_tables_divide_by_level_factor():
    for table in (RESNET50_TAPS, VGG16_TAPS):
        for t, (ch, _) in enumerate(table):
            assert reduced_channels(ch, level_of(t)) * 2 ** LEVEL_ALPHA[level_of(t)] == ch


def test_external_backbone_wraps_callable():
    maps = [torch.zeros(1, c, 64 // s, 64 // s) for c, s in VGG16_TAPS]
    ext = ExternalBackbone(lambda x: maps, VGG16_TAPS)
    out = ext(torch.zeros(1, 3, 64, 64), [12, 0])
    assert sorted(out) == [0, 12] and ext.tap_specs(64)[12].spatial == (4, 4)
    with pytest.raises(ConfigError):
        ExternalBackbone(lambda x: maps, VGG16_TAPS[:5])


def test_reduced_channels_rejects_indivisible():
    with pytest.raises(ConfigError):
        reduced_channels(24, "low")


def test_project_and_align_lands_on_grid(bb):
    feats = bb(torch.rand(1, 3, 64, 64), range(13))
    for t in range(13):
        lv = level_of(t)
        proj = torch.nn.Conv2d(bb.channels[t], reduced_channels(bb.channels[t], lv), 1)
        out = project_and_align(feats[t], lv, proj, 8)
        assert out.shape == (1, bb.channels[t] // 2 ** LEVEL_ALPHA[lv], 8, 8)
    with pytest.raises(ConfigError):
        project_and_align(feats[0], "low", torch.nn.Conv2d(32, 4, 1), 8)


def test_sum_levels_checks_shapes():
    with pytest.raises(RuntimeError):
        sum_levels([torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 4, 4)])


def test_cosine_correlation_matches_loop():
    g = torch.Generator().manual_seed(0)
    a = torch.randn(2, 5, 3, 4, generator=g, dtype=torch.float64)
    b = torch.randn(2, 5, 2, 3, generator=g, dtype=torch.float64)
    b[1, :, 0, 0] = 0  # zero vector -> zero similarity
    vol = cosine_correlation(a, b)
    for i in range(2):
        assert np.abs(vol[i].numpy() - cosine_volume_loop(a[i].numpy(), b[i].numpy())).max() < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_cosine_correlation_bounded(seed):
    g = torch.Generator().manual_seed(seed)
    vol = cosine_correlation(torch.randn(1, 3, 4, 4, generator=g), torch.randn(1, 3, 4, 4, generator=g))
    assert (vol >= 0).all() and (vol <= 1 + 1e-6).all()


def test_center_pivot_conv_shapes_and_locality():
    conv = CenterPivotConv4d(2, 3)
    x = torch.randn(1, 2, 4, 4, 5, 5)
    assert conv(x).shape == (1, 3, 4, 4, 5, 5)


def _ha(sel, heterogeneous=True, grid=8):
    torch.manual_seed(0)
    return HeterogeneousAggregation(sel, ToyBackbone(0).channels, grid, c_ha=16,
                                    squeeze_channels=4, heterogeneous=heterogeneous)


def test_ha_forward_shapes_and_channel_arithmetic(bb):
    sel = LayerSelection()
    ha = _ha(sel)
    for lv, taps in LEVEL_TAPS.items():
        for t in sel.by_level("support")[lv] + sel.by_level("query")[lv]:
            proj = ha.support_proj.reduce[str(t)] if str(t) in ha.support_proj.reduce else ha.query_proj.reduce[str(t)]
            assert proj.out_channels * 2 ** LEVEL_ALPHA[lv] == proj.in_channels
    s_img, q_img = torch.rand(4, 3, 64, 64), torch.rand(2, 3, 64, 64)
    s_taps, q_taps = bb(s_img, ha.support_taps), bb(q_img, ha.query_taps)
    A_s, A_q, aligned = ha(s_taps, q_taps, torch.rand(4, 64, 64), shots=2)
    assert A_s.shape == (4, 20, 8, 8) and A_q.shape == (2, 20, 8, 8)
    assert all(f.shape[-2:] == (8, 8) for f in aligned["support"] + aligned["query"])
    assert ha.init.shape == (16, 8, 8)
    assert abs(float(ha.init.detach().std()) - 0.02) < 0.005


def test_query_correlation_ignores_support_background(bb):
    ha = _ha(LayerSelection())
    s_img, q_img = torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64)
    mask = torch.zeros(1, 64, 64)
    mask[:, 16:48, 16:48] = 1
    s2 = s_img.clone()
    s2[..., :4, :4] = torch.rand(3, 4, 4)  # perturb only where the resized mask is zero
    q_taps = bb(q_img, ha.query_taps)
    _, A_q1, _ = ha(bb(s_img, ha.support_taps), q_taps, mask, 1)
    _, A_q2, _ = ha(bb(s2, ha.support_taps), q_taps, mask, 1)
    corr = slice(16, None)
    # correlation channels see only masked support positions; receptive fields blur the border a little
    assert torch.allclose(A_q1[:, corr], A_q2[:, corr], atol=1e-2)


def test_homogeneous_ablation_shares_projector(bb):
    ha = _ha(LayerSelection((3, 9, 12), (3, 9, 12)), heterogeneous=False)
    assert ha.query_proj is ha.support_proj and ha.out_channels == 16
    x = torch.rand(1, 3, 64, 64)
    taps = bb(x, ha.support_taps)
    A_s, A_q, _ = ha(taps, taps, torch.ones(1, 64, 64), 1)
    assert torch.equal(A_s, A_q)


def test_swapped_layers_change_features(bb):
    sel = LayerSelection()
    probe_s, probe_q = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(1)), \
        torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(2))
    outs = []
    for s in (sel, sel.swapped()):
        ha = _ha(s)
        A_s, A_q, _ = ha(bb(probe_s, ha.support_taps), bb(probe_q, ha.query_taps), torch.ones(1, 64, 64), 1)
        outs.append(A_q)
    assert float((outs[0] - outs[1]).detach().norm()) > 0


def test_branch_projector_sums_multi_tap_levels(bb):
    proj = BranchProjector(LayerSelection.parse("0-12", "0-12").by_level("support"), bb.channels, 8)
    levels = proj(bb(torch.rand(1, 3, 64, 64), range(13)), 8)
    assert len(levels) == 3 and all(lv.shape == (1, 8, 8, 8) for lv in levels)
