import numpy as np
import pytest
import torch

from instcolor.ablation import (AblationSpec, downsample_mask, fuse_layer_box_mask,
                                fuse_layer_gt_mask, placement_layers, run_ablation)
from instcolor.backbone import BackboneConfig, build_backbone, transfer_weights
from instcolor.data import generate_samples
from instcolor.evaluation import evaluate_full, evaluate_instance_level
from instcolor.fusion import FusionBundle, FusionModule, RetargetedInstance
from instcolor.pipeline import InstanceColorizer, full_only
from instcolor.training import BoxSelection
from oracles import random_bundle


def box_instance(feature_value, x0, y0, x1, y1, h=6, w=6, c=2):
    mask = torch.zeros(1, h, w, dtype=torch.bool)
    mask[:, y0:y1, x0:x1] = True
    return RetargetedInstance(torch.full((c, h, w), feature_value) * mask, torch.zeros(1, h, w) * mask,
                              mask)


def test_box_mask_without_instances():
    bundle = random_bundle(np.random.default_rng(0), 0, 2, 5, 5)
    assert torch.equal(fuse_layer_box_mask(bundle), bundle.full_feature)


def test_box_mask_single_and_overlap():
    full = torch.zeros(2, 6, 6)
    one = FusionBundle(full, torch.zeros(1, 6, 6), [box_instance(1.0, 0, 0, 3, 3)])
    out = fuse_layer_box_mask(one)
    assert torch.all(out[:, :3, :3] == 1.0) and torch.all(out[:, 3:, :] == 0)

    two = FusionBundle(full, torch.zeros(1, 6, 6),
                       [box_instance(1.0, 0, 0, 4, 4), box_instance(2.0, 2, 2, 6, 6)])
    expected = full.clone()
    for inst in two.instances:
        for y in range(6):
            for x in range(6):
                if inst.mask[0, y, x]:
                    expected[:, y, x] = inst.feature[:, y, x]
    assert torch.equal(fuse_layer_box_mask(two), expected)
    assert torch.all(fuse_layer_box_mask(two)[:, 3, 3] == 2.0)


def test_gt_mask_reductions():
    bundle = FusionBundle(torch.randn(2, 6, 6), torch.zeros(1, 6, 6),
                          [box_instance(1.0, 1, 1, 5, 5), box_instance(3.0, 0, 2, 3, 6)])
    zeros = [torch.zeros(1, 6, 6, dtype=torch.bool)] * 2
    assert torch.equal(fuse_layer_gt_mask(bundle, zeros), bundle.full_feature)
    boxes = [i.mask for i in bundle.instances]
    assert torch.equal(fuse_layer_gt_mask(bundle, boxes), fuse_layer_box_mask(bundle))
    with pytest.raises(ValueError):
        fuse_layer_gt_mask(bundle, zeros[:1])


def test_gt_mask_checkerboard():
    full = torch.randn(2, 6, 6)
    inst = box_instance(5.0, 0, 0, 6, 6)
    checker = torch.from_numpy((np.indices((6, 6)).sum(0) % 2 == 0))[None]
    out = fuse_layer_gt_mask(FusionBundle(full, torch.zeros(1, 6, 6), [inst]), [checker])
    for y in range(6):
        for x in range(6):
            want = inst.feature[:, y, x] if checker[0, y, x] else full[:, y, x]
            assert torch.equal(out[:, y, x], want)


def test_downsample_mask():
    m = np.zeros((8, 8), dtype=bool)
    m[:4, :4] = True
    small = downsample_mask(m, (4, 4))
    assert small.shape == (1, 4, 4) and small.dtype == torch.bool
    assert int(small.sum()) == 4 and bool(small[0, :2, :2].all())


def test_spec_validation():
    with pytest.raises(ValueError):
        AblationSpec(fusion_placement="middle")
    with pytest.raises(ValueError):
        AblationSpec(blend_mode="average")
    assert AblationSpec(box_strategy={"strategy": "random_k", "k": 2}).box_strategy.k == 2


def test_placement_layers():
    cfg = BackboneConfig.toy([4, 4, 4, 4, 4, 4], base_resolution=16)
    assert placement_layers("none", cfg.fusion_layers, cfg) == []
    enc = placement_layers("encoder_only", cfg.fusion_layers, cfg)
    dec = placement_layers("decoder_only", cfg.fusion_layers, cfg)
    assert enc == cfg.encoder_layers and dec == cfg.decoder_layers
    assert sorted(enc + dec) == placement_layers("both", cfg.fusion_layers, cfg)


@pytest.fixture(scope="module")
def model():
    cfg = BackboneConfig.toy([4, 6, 6, 4], base_resolution=32)
    full = build_backbone(cfg)
    inst = transfer_weights(full)
    with torch.no_grad():
        for p in inst.parameters():
            p.add_(0.1 * torch.randn_like(p))
    return InstanceColorizer(full, inst, FusionModule(cfg, hidden=4), instance_resolution=32)


@pytest.fixture(scope="module")
def samples():
    return generate_samples(3, 32, seed=5)


def rows(report):
    return [(r["id"], r["psnr_db"], r["ssim"]) for r in report.rows]


def test_default_spec_reproduces_pipeline(model, samples):
    report = run_ablation(AblationSpec(), model, samples)
    assert rows(report) == rows(evaluate_full(model, samples))
    inst = run_ablation(AblationSpec(), model, samples, protocol="instance_level")
    assert rows(inst) == rows(evaluate_instance_level(model, samples))
    assert report.tag["ablation"]["blend_mode"] == "learned_fusion"


def test_no_fusion_equals_full_branch(model, samples):
    report = run_ablation(AblationSpec(fusion_placement="none"), model, samples)
    assert rows(report) == rows(evaluate_full(full_only(model.full_net), samples))


def test_variants_run(model, samples):
    for spec in (AblationSpec("encoder_only"), AblationSpec("decoder_only"),
                 AblationSpec(box_strategy=BoxSelection("random_k", k=1, seed=3)),
                 AblationSpec(blend_mode="box_mask"), AblationSpec(blend_mode="gt_mask")):
        report = run_ablation(spec, model, samples)
        assert report.count == len(samples)


def test_gt_mask_needs_masks(model):
    bare = [s for s in generate_samples(1, 32, seed=5)]
    bare[0].masks = None
    with pytest.raises(ValueError):
        run_ablation(AblationSpec(blend_mode="gt_mask"), model, bare)
