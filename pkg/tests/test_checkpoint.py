import json

import pytest
import torch

from instcolor.backbone import BackboneConfig, build_backbone
from instcolor.checkpoint import (CheckpointError, archive_hash, is_valid_archive, load_archive,
                                  parameter_hash, read_manifest, save_archive)

CFG = BackboneConfig.toy()


def test_roundtrip(tmp_path):
    net = build_backbone(CFG)
    digest = save_archive(net, tmp_path / "a", CFG.config_hash(), meta={"stage": "full"})
    assert archive_hash(tmp_path / "a") == digest
    other = build_backbone(BackboneConfig.toy(seed=3))
    manifest = load_archive(other, tmp_path / "a", CFG.config_hash())
    assert manifest["meta"] == {"stage": "full"}
    assert parameter_hash(other) == parameter_hash(net)
    assert is_valid_archive(tmp_path / "a")


def test_config_hash_mismatch_names_both_hashes(tmp_path):
    save_archive(build_backbone(CFG), tmp_path / "a", "aaaa")
    with pytest.raises(CheckpointError, match="archive aaaa, expected bbbb"):
        load_archive(build_backbone(CFG), tmp_path / "a", "bbbb")


def test_corrupt_data_detected(tmp_path):
    save_archive(build_backbone(CFG), tmp_path / "a", "h")
    blob = bytearray((tmp_path / "a" / "params.bin").read_bytes())
    blob[0] ^= 0xFF
    (tmp_path / "a" / "params.bin").write_bytes(bytes(blob))
    assert not is_valid_archive(tmp_path / "a")
    with pytest.raises(CheckpointError, match="data hash mismatch"):
        load_archive(build_backbone(CFG), tmp_path / "a", "h")


def test_bad_manifest(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "a" / "manifest.json").write_text("{")
    with pytest.raises(CheckpointError):
        read_manifest(tmp_path / "a")
    (tmp_path / "a" / "manifest.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(CheckpointError, match="format"):
        read_manifest(tmp_path / "a")
    with pytest.raises(CheckpointError):
        read_manifest(tmp_path / "missing")


def test_wrong_module(tmp_path):
    save_archive(build_backbone(CFG), tmp_path / "a", "h")
    with pytest.raises(CheckpointError):
        load_archive(torch.nn.Linear(2, 2), tmp_path / "a", "h")
