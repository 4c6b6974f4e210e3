import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from instcolor.backbone import BackboneConfig, ConfigError, build_backbone, transfer_weights
from instcolor.detection import BoundingBox
from instcolor.fusion import (FusionBundle, FusionModule, WeightHead, blend_weights, fuse_layer,
                              fused_forward, retarget_instance)
from oracles import central_difference_check, naive_masked_softmax_fusion, random_bundle

CFG = BackboneConfig.toy([4, 6, 6, 4], base_resolution=16)


def test_zero_head_gives_zero_logits():
    head = WeightHead(5, zero_init=True)
    assert torch.count_nonzero(head(torch.randn(5, 7, 9))) == 0


def test_head_preserves_spatial_size():
    assert WeightHead(3)(torch.randn(3, 7, 9)).shape == (1, 7, 9)
    assert WeightHead(3)(torch.randn(2, 3, 7, 9)).shape == (2, 1, 7, 9)
    with pytest.raises(ValueError):
        WeightHead(3)(torch.randn(4, 7, 9))


def test_head_gradient_matches_finite_differences():
    torch.manual_seed(0)
    head = WeightHead(3, hidden=4).double()
    feat = torch.randn(3, 6, 5, dtype=torch.float64)
    err = central_difference_check(lambda: head(feat).sum(), list(head.parameters()))
    assert err < 1e-4


def test_full_box_retarget_has_no_padding():
    feat, logits = torch.randn(3, 4, 4), torch.randn(1, 4, 4)
    r = retarget_instance(feat, logits, BoundingBox(0, 0, 8, 6), (6, 8))
    assert bool(r.mask.all())
    from instcolor.detection import resize_bilinear
    assert torch.allclose(r.feature, resize_bilinear(feat, (6, 8)))


def test_one_pixel_box():
    r = retarget_instance(torch.full((2, 3, 3), 4.0), torch.ones(1, 3, 3),
                          BoundingBox(3, 2, 4, 3), (5, 5))
    assert torch.all(r.feature[:, 2, 3] == 4.0)
    r.feature[:, 2, 3] = 0
    assert torch.count_nonzero(r.feature) == 0
    assert int(r.mask.sum()) == 1


def test_constant_feature_into_box():
    r = retarget_instance(torch.full((1, 2, 2), 2.5), torch.zeros(1, 2, 2),
                          BoundingBox(2, 3, 5, 6), (8, 8))
    expected = torch.zeros(1, 8, 8)
    expected[:, 3:6, 2:5] = 2.5
    assert torch.allclose(r.feature, expected, atol=1e-6)
    assert torch.count_nonzero(r.feature[~r.mask.expand_as(r.feature)]) == 0


def test_retarget_rejects_box_outside_layer():
    with pytest.raises(ValueError):
        retarget_instance(torch.zeros(1, 2, 2), torch.zeros(1, 2, 2), BoundingBox(6, 6, 9, 9), (8, 8))


def test_no_instances_returns_full_feature():
    bundle = random_bundle(np.random.default_rng(0), 0, 3, 5, 5)
    assert fuse_layer(bundle) is bundle.full_feature


def test_equal_logits_average():
    full, inst = torch.randn(3, 4, 4, dtype=torch.float64), torch.randn(3, 4, 4, dtype=torch.float64)
    logits = torch.randn(1, 4, 4, dtype=torch.float64)
    from instcolor.fusion import RetargetedInstance
    bundle = FusionBundle(full, logits, [RetargetedInstance(inst, logits.clone(),
                                                            torch.ones(1, 4, 4, dtype=torch.bool))])
    assert torch.allclose(fuse_layer(bundle), (full + inst) / 2, atol=1e-15)


def test_two_overlapping_boxes_hand_set_logits():
    from instcolor.fusion import RetargetedInstance
    h = w = 4
    full = torch.arange(16, dtype=torch.float64).reshape(1, h, w)
    masks = [torch.zeros(1, h, w, dtype=torch.bool) for _ in range(2)]
    masks[0][:, 0:3, 0:3] = True
    masks[1][:, 1:4, 1:4] = True
    insts = [RetargetedInstance(torch.full((1, h, w), 100.0 * (i + 1), dtype=torch.float64) * m,
                                torch.full((1, h, w), float(i + 1), dtype=torch.float64) * m, m)
             for i, m in enumerate(masks)]
    bundle = FusionBundle(full, torch.zeros(1, h, w, dtype=torch.float64), insts)
    w_ref, f_ref = naive_masked_softmax_fusion(bundle)
    np.testing.assert_allclose(blend_weights(bundle).numpy(), w_ref, atol=1e-12)
    np.testing.assert_allclose(fuse_layer(bundle).numpy(), f_ref, atol=1e-12)
    # pixel (1,1) is covered by all three branches with logits 0, 1, 2
    e = np.exp([0.0, 1.0, 2.0])
    np.testing.assert_allclose(w_ref[:, 1, 1], e / e.sum(), atol=1e-15)
    # pixel (0,3) is covered by the full image only
    assert w_ref[0, 0, 3] == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 8), st.integers(1, 12), st.integers(1, 12), st.integers(0, 2 ** 31))
def test_weights_are_a_partition_of_unity(n, h, w, seed):
    bundle = random_bundle(np.random.default_rng(seed), n, 2, h, w, dtype=torch.float32)
    wts = blend_weights(bundle)
    assert wts.shape == (n + 1, h, w)
    assert torch.all((wts >= 0) & (wts <= 1))
    assert torch.allclose(wts.sum(0), torch.ones(h, w), atol=1e-5)
    for i, inst in enumerate(bundle.instances, start=1):
        assert torch.all(wts[i][~inst.mask[0]] == 0)


def test_zero_logit_padding_mode_differs_outside_boxes():
    bundle = random_bundle(np.random.default_rng(4), 2, 2, 6, 6)
    literal = blend_weights(bundle, zero_logit_padding=True)
    assert torch.allclose(literal.sum(0), torch.ones(6, 6, dtype=torch.float64))
    outside = ~(bundle.instances[0].mask | bundle.instances[1].mask)[0]
    if outside.any():
        assert torch.all(literal[0][outside] < 1)


def models(cfg=CFG, dtype=torch.float64):
    full = build_backbone(cfg).to(dtype)
    inst = transfer_weights(full)
    with torch.no_grad():
        for p in inst.parameters():
            p.add_(0.05 * torch.randn_like(p))
    fusion = FusionModule(cfg, hidden=4).to(dtype)
    return full, inst, fusion


def crops(rng, n, side=16, dtype=torch.float64):
    out = []
    for _ in range(n):
        x0, y0 = rng.integers(0, side - 2, size=2)
        x1, y1 = rng.integers(x0 + 2, side + 1), rng.integers(y0 + 2, side + 1)
        out.append((torch.as_tensor(rng.uniform(-1, 1, (1, side, side)), dtype=dtype),
                    BoundingBox(int(x0), int(y0), int(x1), int(y1))))
    return out


def test_no_instances_equals_plain_forward():
    full, inst, fusion = models()
    L = torch.rand(1, 16, 16, dtype=torch.float64)
    assert torch.equal(fused_forward(full, inst, fusion, L, []), full(L[None])[0])


def test_output_shape_and_permutation_invariance():
    rng = np.random.default_rng(2)
    full, inst, fusion = models()
    L = torch.as_tensor(rng.uniform(-1, 1, (1, 16, 16)))
    items = crops(rng, 3)
    a = fused_forward(full, inst, fusion, L, items)
    b = fused_forward(full, inst, fusion, L, items[::-1])
    assert a.shape == (1, 2, 16, 16)
    assert torch.allclose(a, b, atol=1e-6)


def test_record_receives_weights_per_layer():
    rng = np.random.default_rng(3)
    full, inst, fusion = models()
    record = {}
    fused_forward(full, inst, fusion, torch.zeros(1, 16, 16, dtype=torch.float64),
                  crops(rng, 2), record=record)
    assert sorted(record) == CFG.fusion_layers
    for j, (c, h, w) in enumerate(CFG.layer_shapes(16)):
        assert record[j].shape == (3, h, w)


def test_too_many_instances():
    full, inst, _ = models()
    fusion = FusionModule(CFG, max_instances=2).double()
    with pytest.raises(ValueError):
        fused_forward(full, inst, fusion, torch.zeros(1, 16, 16, dtype=torch.float64),
                      crops(np.random.default_rng(0), 3))


def test_architecture_mismatch():
    full = build_backbone(CFG)
    inst = build_backbone(BackboneConfig.toy([4, 6, 6, 5], base_resolution=16))
    with pytest.raises(ConfigError):
        fused_forward(full, inst, FusionModule(CFG), torch.zeros(1, 16, 16), [])


def test_layer_subset_leaves_other_layers_untouched():
    rng = np.random.default_rng(5)
    full, inst, fusion = models()
    L = torch.as_tensor(rng.uniform(-1, 1, (1, 16, 16)))
    items = crops(rng, 2)
    assert torch.equal(fused_forward(full, inst, fusion, L, items, layers=[]), full(L[None])[0])
