import struct
import zlib

import numpy as np
import pytest

from cumo import tensor as T
from cumo.aux_loss import SECTIONS
from cumo.checkpoint import (VERSION, FormatError, load_checkpoint, load_checkpoint_meta, load_dataset, model_to_bytes,
                             pack, save_checkpoint, save_dataset, unpack)
from cumo.data import gen_dataset, lm_batch
from cumo.model import build_model, co_upcycle, forward_lm
from cumo.pipeline import datasets_for, run_pipeline
from tiny import tiny_run


@pytest.fixture(scope="module")
def trained():
    cfg = tiny_run()
    data = datasets_for(cfg)
    return run_pipeline(cfg, data=data).model, data


def test_round_trip_bitwise(trained, tmp_path):
    model, _ = trained
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    a, b = dict(model.named_parameters()), dict(back.named_parameters())
    assert a.keys() == b.keys()
    assert all(a[n].data.tobytes() == b[n].data.tobytes() and a[n].data.dtype == b[n].data.dtype for n in a)
    assert back.stages_done == model.stages_done
    assert [m.name for m in back.moe_blocks()] == [m.name for m in model.moe_blocks()]


def test_save_load_save_identical(trained, tmp_path):
    model, _ = trained
    save_checkpoint(model, tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_loaded_model_computes_same_logits(trained, tmp_path):
    model, (_, evals) = trained
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    inputs, _, _ = lm_batch(evals, np.arange(4))
    with T.no_grad():
        assert forward_lm(model, evals.images[:4], inputs).data.tobytes() == \
            forward_lm(back, evals.images[:4], inputs).data.tobytes()


def test_flipped_payload_byte_fails_checksum(trained):
    blob = bytearray(model_to_bytes(trained[0]))
    blob[len(blob) // 2] ^= 0x01
    with pytest.raises(FormatError, match="checksum"):
        unpack(bytes(blob))


def test_bad_magic_reports_offset_zero(trained):
    blob = b"XUMO" + model_to_bytes(trained[0])[4:]
    with pytest.raises(FormatError) as e:
        unpack(blob)
    assert e.value.offset == 0


def test_version_mismatch_rejected(trained):
    blob = bytearray(model_to_bytes(trained[0]))
    blob[4:8] = struct.pack("<I", VERSION + 1)
    with pytest.raises(FormatError, match="version"):
        unpack(bytes(blob))


@pytest.mark.parametrize("cut", [3, 10, 100])
def test_truncation_rejected(trained, cut):
    blob = model_to_bytes(trained[0])
    with pytest.raises(FormatError):
        unpack(blob[:cut] if cut < 16 else blob[:-cut])


def test_truncated_table_with_valid_crc_reports_offset():
    # a well-formed checksum over a header that promises more than it holds
    body = b"CUMO" + struct.pack("<II", VERSION, 1) + struct.pack("<H", 5) + b"ab"
    blob = body + struct.pack("<I", zlib.crc32(body))
    with pytest.raises(FormatError, match="truncated") as e:
        unpack(blob)
    assert e.value.offset == 14


def test_pack_dtypes_round_trip():
    arrays = {"f": np.arange(6, dtype=np.float32).reshape(2, 3), "i": np.array([1, -2], dtype=np.int32),
              "l": np.array([1 << 40], dtype=np.int64)}
    back, meta = unpack(pack(arrays, {"x": 1}))
    assert meta == {"x": 1}
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and np.array_equal(back[k], arrays[k])
    with pytest.raises(TypeError):
        pack({"u": np.zeros(2, dtype=np.uint8)}, {})


def test_dense_checkpoint_then_upcycle_equivalence(tmp_path):
    cfg = tiny_run()
    train, evals = datasets_for(cfg)
    res = run_pipeline(cfg.__class__(**{**cfg.__dict__, "stages": cfg.stages[:2]}), tmp_path, data=(train, evals))
    dense = load_checkpoint(tmp_path / "prefinetune.ckpt")
    assert not dense.moe_blocks()
    inputs, _, _ = lm_batch(evals, np.arange(8))
    with T.no_grad():
        before = forward_lm(dense, evals.images[:8], inputs).data
        co_upcycle(dense, SECTIONS, 5)
        after = forward_lm(dense, evals.images[:8], inputs).data
    assert np.abs(before - after).max() <= 1e-4
    assert res.model.stages_done == ["pretrain", "prefinetune"]


def test_metadata_carries_stage_and_seed(tmp_path):
    cfg = tiny_run(steps=(1, 1, 1), seed=4)
    run_pipeline(cfg, tmp_path)
    _, meta = load_checkpoint_meta(tmp_path / "visual_instruction_tuning.ckpt")
    assert meta["stage"] == "visual_instruction_tuning" and meta["seed"] == 4 and meta["step"] == 1


def test_dataset_cache_round_trip(tmp_path):
    train, _ = gen_dataset(0, 20, 1)
    save_dataset(train, tmp_path / "d.bin")
    back = load_dataset(tmp_path / "d.bin")
    for f in ("images", "captions", "lengths", "scene_ids"):
        assert getattr(back, f).tobytes() == getattr(train, f).tobytes()
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "d.bin")


def test_fresh_model_round_trip_native_moe(tmp_path):
    from cumo.model import DecoderConfig, ModelConfig
    from cumo.upcycle import UpcycleSpec

    cfg = ModelConfig(decoder=DecoderConfig(moe=UpcycleSpec(2, 1, "scratch"), native_moe=True))
    model = build_model(cfg, 1)
    save_checkpoint(model, tmp_path / "n.ckpt")
    assert model_to_bytes(load_checkpoint(tmp_path / "n.ckpt")) == model_to_bytes(model)
