import struct
import zlib

import numpy as np
import pytest

from istpose.checkpoint import (Checkpoint, ConfigHashMismatch, checkpoint_bytes,
                                checkpoint_from_model, load_checkpoint, model_from_checkpoint,
                                parse_checkpoint, save_checkpoint)
from istpose.config import RunConfig
from istpose.model import ISTNet
from istpose.prior_baseline import PriorNet
from istpose.synthdata import ChecksumMismatch, FormatVersionMismatch, GenConfig, IoFailure, \
    generate_dataset
from istpose.training import train

TINY = dict(n_points=16, d=8, hidden=8, k=4, batch_size=8)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(GenConfig(count=24, n_points=16, n_model_points=128, seed=11))


@pytest.fixture(scope="module")
def trained(data):
    cfg = RunConfig(**TINY, epochs=2)
    model, opt, _ = train(cfg, data)
    return model, opt


def test_roundtrip_is_bitwise(trained, tmp_path):
    model, opt = trained
    path = tmp_path / "a.istc"
    save_checkpoint(checkpoint_from_model(model, 2, opt, {"note": 1}), path)
    ckpt = load_checkpoint(path)
    assert checkpoint_bytes(ckpt) == path.read_bytes()
    assert ckpt.epoch == 2 and ckpt.extra == {"note": 1}
    for k, v in model.params:
        assert np.array_equal(ckpt.state[k], v.data)
    assert ckpt.optimizer.step_count == opt.step_count
    assert ckpt.optimizer.learning_rate == opt.learning_rate
    for k in opt.m:
        assert np.array_equal(ckpt.optimizer.m[k], opt.m[k])
        assert np.array_equal(ckpt.optimizer.v[k], opt.v[k])


def test_rebuilt_model_predicts_identically(trained, data):
    model, opt = trained
    back = model_from_checkpoint(parse_checkpoint(checkpoint_bytes(checkpoint_from_model(model))))
    b = model.collate(data[:4], np.float32)
    a, c = model.inference(b["P"], b["C"]), back.inference(b["P"], b["C"])
    assert np.array_equal(a.R.data, c.R.data) and np.array_equal(a.t.data, c.t.data)


def test_prior_model_roundtrip():
    cfg = RunConfig(**TINY, variant="prior-case", prior_case="case3")
    model = PriorNet(cfg)
    back = model_from_checkpoint(parse_checkpoint(checkpoint_bytes(checkpoint_from_model(model))))
    assert isinstance(back, PriorNet) and back.case == "case3"


def test_resume_matches_uninterrupted_run(data):
    full_cfg = RunConfig(**TINY, epochs=4, decay_every=1)
    m_full, _, h_full = train(full_cfg, data)
    half_cfg = full_cfg.with_overrides({"epochs": 2})
    m_half, opt, h_half = train(half_cfg, data)
    ckpt = parse_checkpoint(checkpoint_bytes(checkpoint_from_model(m_half, 2, opt)))
    m_res, _, h_res = train(full_cfg, data, model=model_from_checkpoint(ckpt), opt=ckpt.optimizer,
                            start_epoch=ckpt.epoch)
    for a, b in zip(h_full[2:], h_res):
        assert a["total"] == b["total"]
    for k, v in m_full.params:
        assert np.array_equal(v.data, m_res.params[k].data)


def test_truncated_and_flipped(trained):
    blob = checkpoint_bytes(checkpoint_from_model(trained[0]))
    with pytest.raises(ChecksumMismatch):
        parse_checkpoint(blob[:-7])
    with pytest.raises(ChecksumMismatch):
        parse_checkpoint(blob[:20])
    bad = bytearray(blob)
    bad[len(blob) // 2] ^= 0x01
    with pytest.raises(ChecksumMismatch):
        parse_checkpoint(bytes(bad))


def test_wrong_magic_and_version(trained):
    blob = checkpoint_bytes(checkpoint_from_model(trained[0]))
    with pytest.raises(FormatVersionMismatch):
        parse_checkpoint(b"ISTD" + blob[4:])
    with pytest.raises(FormatVersionMismatch):
        parse_checkpoint(blob[:4] + struct.pack("<I", 9) + blob[8:])


def test_config_hash_checks(trained, tmp_path):
    model, _ = trained
    path = tmp_path / "c.istc"
    save_checkpoint(checkpoint_from_model(model), path)
    # training settings may change, architecture may not
    load_checkpoint(path, expect=model.cfg.with_overrides({"lr": 0.5, "epochs": 9}))
    with pytest.raises(ConfigHashMismatch):
        load_checkpoint(path, expect=model.cfg.with_overrides({"d": 16}))


def test_tampered_config_detected(trained):
    ckpt = checkpoint_from_model(trained[0])
    blob = checkpoint_bytes(Checkpoint(ckpt.config, ckpt.state))
    other = checkpoint_bytes(Checkpoint(ckpt.config.with_overrides({"hidden": 4}), {}))
    # splice the header hash of one config onto the body of another and fix the CRC
    spliced = other[:8] + blob[8:72] + other[72:-4]
    spliced += struct.pack("<I", zlib.crc32(spliced))
    with pytest.raises(ConfigHashMismatch):
        parse_checkpoint(spliced)


def test_missing_file(tmp_path):
    with pytest.raises(IoFailure):
        load_checkpoint(tmp_path / "nope.istc")


def test_load_state_shape_check():
    model = ISTNet(RunConfig(**TINY))
    state = model.params.state()
    state["geom.point.0.W"] = np.zeros((1, 1))
    with pytest.raises(ValueError):
        model.params.load_state(state)
