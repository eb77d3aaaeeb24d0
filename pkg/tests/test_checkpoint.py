import struct

import numpy as np
import pytest

from vprprune import checkpoint
from vprprune.checkpoint import CheckpointError
from vprprune.layers import BackboneSpec, ConvBlock, build_model
from vprprune.pruning import prune_round
from vprprune.tensor import Tensor

ARCHS = ["gem", "convap", "mixvpr", "netvlad"]


def small(arch, seed=0):
    spec = BackboneSpec([ConvBlock(4, 3, 2), ConvBlock(6, 3, 1, "r"), ConvBlock(6, 3, 1, "r")], 3, (8, 8))
    return build_model(arch, spec, seed=seed, clusters=4)


@pytest.mark.parametrize("arch", ARCHS)
def test_save_load_save_identical_bytes(arch, tmp_path):
    raw = checkpoint.to_bytes(small(arch))
    checkpoint.save(checkpoint.from_bytes(raw), tmp_path / "m.vprc")
    assert (tmp_path / "m.vprc").read_bytes() == raw


@pytest.mark.parametrize("arch", ARCHS)
def test_loaded_model_computes_same_descriptors(arch):
    model = small(arch)
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 3, 8, 8)))
    back = checkpoint.from_bytes(checkpoint.to_bytes(model))
    assert back.forward(x).data.tobytes() == model.forward(x).data.tobytes()


@pytest.mark.parametrize("arch", ARCHS)
def test_pruned_model_round_trips_with_reduced_shapes(arch):
    model = small(arch)
    dense_shapes = {k: v.shape for k, v in model.params().items()}
    prune_round(model, 0.5, 0.5, seed=0)
    raw = checkpoint.to_bytes(model)
    table = dict(checkpoint.shape_table(raw))
    assert table == {k: v.shape for k, v in model.params().items()}
    assert any(table[k] != dense_shapes[k] for k in table)
    back = checkpoint.from_bytes(raw)
    assert back.dense_widths == model.dense_widths
    assert back.descriptor_dim == model.descriptor_dim


def test_header_layout():
    raw = checkpoint.to_bytes(small("gem"))
    assert raw[:4] == b"VPRC"
    assert struct.unpack("<I", raw[4:8])[0] == checkpoint.VERSION
    (n,) = struct.unpack("<I", raw[8:12])
    assert raw[12 : 12 + n] == b"gem"


def test_bad_magic_rejected():
    raw = bytearray(checkpoint.to_bytes(small("gem")))
    raw[:4] = b"NOPE"
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.from_bytes(bytes(raw))


def test_corrupted_crc_rejected():
    raw = bytearray(checkpoint.to_bytes(small("convap")))
    raw[len(raw) // 2] ^= 0xFF
    with pytest.raises(CheckpointError, match="CRC"):
        checkpoint.from_bytes(bytes(raw))


def test_truncation_rejected():
    raw = checkpoint.to_bytes(small("mixvpr"))
    for cut in (5, 100, len(raw) - 1):
        with pytest.raises(CheckpointError):
            checkpoint.from_bytes(raw[:cut])


def test_bad_version_rejected():
    import zlib

    raw = bytearray(checkpoint.to_bytes(small("gem")))
    raw[4:8] = struct.pack("<I", 99)
    body = bytes(raw[:-4])
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.from_bytes(body + struct.pack("<I", zlib.crc32(body)))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        checkpoint.load(tmp_path / "none.vprc")
