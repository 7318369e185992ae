import json
import struct

import numpy as np
import pytest

from dyrank.adapter import AdapterConfig, attach_adapters
from dyrank.checkpoint import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointManifestError,
    CheckpointVersionError,
    checkpoint_bytes,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from dyrank.config import ExperimentConfig
from dyrank.tensor import no_grad

HEADER = 8 + 4 + 8


def _outputs(model, rng):
    imgs = rng.integers(0, 16, (16, 12))
    txts = rng.integers(0, 32, (16, 4))
    with no_grad():
        return model.encode_images(imgs).data, model.encode_texts(txts).data


def test_round_trip_is_bitwise(tiny_model, tmp_path):
    path = save_checkpoint(tiny_model, tmp_path / "m.ckpt")
    loaded = load_checkpoint(path)
    for a, b in zip(_outputs(tiny_model, np.random.default_rng(0)), _outputs(loaded, np.random.default_rng(0))):
        assert a.tobytes() == b.tobytes()
    again = save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert path.read_bytes() == again.read_bytes()


def test_round_trip_with_adapters(tiny_model, tmp_path, rng):
    attach_adapters(tiny_model, AdapterConfig(r_init=3), rng)
    for ad in tiny_model.adapters():
        ad.B.data = rng.normal(size=ad.B.shape)
    loaded = load_checkpoint(save_checkpoint(tiny_model, tmp_path / "a.ckpt"))
    assert len(loaded.adapters()) == 24
    for a, b in zip(_outputs(tiny_model, np.random.default_rng(1)), _outputs(loaded, np.random.default_rng(1))):
        assert a.tobytes() == b.tobytes()
    assert checkpoint_bytes(loaded) == checkpoint_bytes(tiny_model)


def test_manifest_layout(tiny_model):
    blob = checkpoint_bytes(tiny_model)
    assert blob[:8] == b"DYRKCKPT"
    manifest, tensors = parse_checkpoint(blob)
    entries = manifest["tensors"]
    assert len(entries) == len(list(tiny_model.named_parameters()))
    offset = 0
    for e in entries:
        assert e["offset"] == offset
        offset += e["length"]
    (mlen,) = struct.unpack_from("<Q", blob, 12)
    assert HEADER + mlen + offset + 4 == len(blob)


def test_corrupt_payload_byte(tiny_model, tmp_path):
    blob = bytearray(checkpoint_bytes(tiny_model))
    blob[-10] ^= 0x01
    path = tmp_path / "bad.ckpt"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointChecksumError):
        load_checkpoint(path)


@pytest.mark.parametrize("cut", [5, 30, 200, -1])
def test_truncated_file(tiny_model, tmp_path, cut):
    blob = checkpoint_bytes(tiny_model)
    path = tmp_path / "short.ckpt"
    path.write_bytes(blob[:cut])
    with pytest.raises(CheckpointManifestError):
        load_checkpoint(path)


def test_unknown_version(tiny_model, tmp_path):
    blob = bytearray(checkpoint_bytes(tiny_model))
    struct.pack_into("<I", blob, 8, 99)
    path = tmp_path / "v.ckpt"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_bad_magic_and_missing_file(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"NOTACKPT" + bytes(40))
    with pytest.raises(CheckpointManifestError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_shape_mismatch_against_config(tiny_model, tmp_path):
    blob = checkpoint_bytes(tiny_model)
    (mlen,) = struct.unpack_from("<Q", blob, 12)
    manifest = json.loads(blob[HEADER:HEADER + mlen])
    manifest["model"]["vision"]["embed_dim"] = 9
    new = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    forged = blob[:12] + struct.pack("<Q", len(new)) + new + blob[HEADER + mlen:]
    path = tmp_path / "f.ckpt"
    path.write_bytes(forged)
    with pytest.raises(CheckpointManifestError):
        load_checkpoint(path)


def test_distinct_error_classes():
    kinds = {CheckpointChecksumError, CheckpointManifestError, CheckpointVersionError}
    assert len(kinds) == 3 and all(issubclass(k, CheckpointError) for k in kinds)


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig().with_seed(3)
    text = cfg.dumps()
    again = ExperimentConfig.loads(text)
    assert again == cfg and again.dumps() == text
    path = tmp_path / "c.json"
    path.write_text(text)
    assert ExperimentConfig.load(path) == cfg
    assert again.train.global_seed == again.pretrain.seed == 3


def test_config_rejects_unknown_and_invalid():
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"train": {"iterations_per_task": 0}})
    d = ExperimentConfig().to_dict()
    d["data"]["stream"][0]["domain_id"] = 0
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict(d)
