import math
import struct

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from radfm.core import (
    CHECKPOINT_MAGIC, ParameterStore, TrainSchedule, build_config, config_digest,
    cosine_schedule, load_checkpoint, parse_overrides, read_checkpoint_header,
    read_config_file, save_checkpoint, seed_everything,
)
from radfm.exceptions import ConfigError, DomainError, IntegrityError
from radfm.ssl import PretrainConfig


def test_cosine_endpoints_exact():
    assert cosine_schedule(0, 100, 0.994, 1.0) == 0.994
    assert cosine_schedule(100, 100, 0.994, 1.0) == 1.0
    assert cosine_schedule(50, 100, 0.0, 1.0) == pytest.approx(0.5)


def test_cosine_domain():
    with pytest.raises(DomainError):
        cosine_schedule(101, 100, 0, 1)
    with pytest.raises(DomainError):
        cosine_schedule(0, 0, 0, 1)


@given(st.integers(1, 500), st.data())
@settings(max_examples=50, deadline=None)
def test_schedule_monotone_and_bounded(total, data):
    s = TrainSchedule(total_steps=total, warmup_steps=data.draw(st.integers(0, total)),
                      teacher_temp_warmup_steps=data.draw(st.integers(0, total)))
    m = [s.momentum(i) for i in range(total + 1)]
    wd = [s.weight_decay(i) for i in range(total + 1)]
    tt = [s.teacher_temperature(i) for i in range(total + 1)]
    assert all(a <= b + 1e-15 for a, b in zip(m, m[1:]))
    assert all(a <= b + 1e-15 for a, b in zip(wd, wd[1:]))
    assert all(0.04 <= t <= 0.07 for t in tt)
    assert m[0] == 0.994 and m[-1] == 1.0
    lrs = [s.lr(i) for i in range(total + 1)]
    assert max(lrs) <= s.base_lr + 1e-15 and min(lrs) >= 0.0


def test_lr_warmup_then_cosine():
    s = TrainSchedule(total_steps=100, base_lr=1.0, min_lr=0.0, warmup_steps=10)
    assert s.lr(0) == 0.0
    assert s.lr(5) == pytest.approx(0.5)
    assert s.lr(10) == 1.0
    assert s.lr(100) == 0.0
    assert s.lr(55) == pytest.approx(0.5)


def test_teacher_temperature_ramp():
    s = TrainSchedule(total_steps=100, teacher_temp_warmup_steps=30)
    assert s.teacher_temperature(0) == 0.04
    assert s.teacher_temperature(15) == pytest.approx(0.055)
    assert s.teacher_temperature(30) == 0.07
    assert s.teacher_temperature(100) == 0.07


def _module():
    torch.manual_seed(1)
    m = nn.Sequential(nn.Linear(3, 4), nn.BatchNorm1d(4), nn.Linear(4, 2))
    m[0].weight.requires_grad_(False)
    return m


def test_parameter_store_roundtrip(tmp_path):
    m = _module()
    store = ParameterStore.from_module(m, step=7)
    assert "0.weight" in store.frozen and "1.running_mean" in store.frozen
    assert "2.weight" not in store.frozen
    path = save_checkpoint(store, tmp_path / "m.ckpt", config={"a": 1}, meta={"k": "v"})
    loaded, header = load_checkpoint(path, config={"a": 1})
    assert loaded.step == 7 and header["meta"] == {"k": "v"}
    assert loaded.frozen == store.frozen
    for k, v in store.entries.items():
        assert torch.equal(v, loaded.entries[k]), k
        assert loaded.entries[k].dtype == v.dtype
    fresh = nn.Sequential(nn.Linear(3, 4), nn.BatchNorm1d(4), nn.Linear(4, 2))
    loaded.load_into(fresh)
    assert not fresh[0].weight.requires_grad
    x = torch.randn(5, 3)
    m.eval(), fresh.eval()
    assert torch.equal(m(x), fresh(x))


def test_checkpoint_layout(tmp_path):
    path = save_checkpoint(ParameterStore.from_module(_module()), tmp_path / "m.ckpt")
    blob = path.read_bytes()
    assert blob[:8] == CHECKPOINT_MAGIC
    (n,) = struct.unpack("<Q", blob[8:16])
    header = read_checkpoint_header(path)
    assert len(blob) == 16 + n + header["payload_nbytes"]


def test_checkpoint_corruption(tmp_path):
    path = save_checkpoint(ParameterStore.from_module(_module()), tmp_path / "m.ckpt")
    blob = bytearray(path.read_bytes())
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXXXXXX" + bytes(blob[8:]))
    with pytest.raises(IntegrityError):
        load_checkpoint(bad)
    bad.write_bytes(bytes(blob[:-5]))
    with pytest.raises(IntegrityError):
        load_checkpoint(bad)
    blob[-1] ^= 0xFF
    bad.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError):
        load_checkpoint(bad)


def test_checkpoint_config_mismatch(tmp_path):
    path = save_checkpoint(ParameterStore.from_module(_module()), tmp_path / "m.ckpt",
                           config={"lr": 1.0})
    with pytest.raises(ConfigError):
        load_checkpoint(path, config={"lr": 2.0})


def test_load_into_mismatch():
    store = ParameterStore.from_module(_module())
    with pytest.raises(ConfigError):
        store.load_into(nn.Linear(3, 4))


def test_config_digest_order_independent():
    assert config_digest({"a": 1, "b": 2}) == config_digest({"b": 2, "a": 1})
    assert config_digest({"a": 1}) != config_digest({"a": 2})


def test_overrides_and_files(tmp_path):
    assert parse_overrides(["a=1", "b=0.5", "c=true", "d=x", "e=1,2"]) == {
        "a": 1, "b": 0.5, "c": True, "d": "x", "e": [1, 2]}
    with pytest.raises(ConfigError):
        parse_overrides(["novalue"])
    f = tmp_path / "c.cfg"
    f.write_text("epochs = 3  # comment\nbase_learning_rate=0.1\n")
    cfg = build_config(PretrainConfig, read_config_file(f))
    assert cfg.epochs == 3 and cfg.base_learning_rate == 0.1
    j = tmp_path / "c.json"
    j.write_text('{"epochs": 4}')
    assert read_config_file(j) == {"epochs": 4}
    with pytest.raises(ConfigError):
        build_config(PretrainConfig, {"no_such_key": 1})


def test_seed_everything_reproducible():
    seed_everything(3)
    a = torch.randn(4)
    seed_everything(3)
    assert torch.equal(a, torch.randn(4))
