"""Schedules, parameter stores, checkpoints, config files and seeding."""

from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
from torch import nn

from .exceptions import ConfigError, DomainError, IntegrityError

CHECKPOINT_MAGIC = b"RADFMCK1"

_DTYPES = {
    "float32": (torch.float32, np.dtype("<f4")),
    "int64": (torch.int64, np.dtype("<i8")),
}


# --------------------------------------------------------------------------
# schedules


def cosine_schedule(step: int, total: int, start: float, end: float) -> float:
    """Cosine interpolation from ``start`` (step 0) to ``end`` (step ``total``).

    Both endpoints are returned exactly rather than through the cosine
    formula, so ``cosine_schedule(total, total, a, b) == b`` bit for bit.
    """
    if total <= 0:
        raise DomainError(f"total must be positive, got {total}")
    if not 0 <= step <= total:
        raise DomainError(f"step {step} outside [0, {total}]")
    if step == 0:
        return float(start)
    if step == total:
        return float(end)
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * step / total))


def linear_warmup(step: int, warmup: int, start: float, end: float) -> float:
    if warmup <= 0 or step >= warmup:
        return float(end)
    return start + (end - start) * step / warmup


@dataclass
class TrainSchedule:
    """Per-step values for learning rate, weight decay, teacher momentum and
    teacher temperature.

    The learning rate warms up linearly from 0 to ``base_lr`` over
    ``warmup_steps`` and then follows a cosine decay to ``min_lr``. Weight
    decay and teacher momentum follow cosine curves over the whole run. The
    teacher temperature ramps linearly over ``teacher_temp_warmup_steps``
    and stays at its final value afterwards.
    """

    total_steps: int
    base_lr: float = 2e-4
    min_lr: float = 1e-6
    warmup_steps: int = 0
    weight_decay_start: float = 0.04
    weight_decay_end: float = 0.2
    momentum_start: float = 0.994
    momentum_end: float = 1.0
    warmup_teacher_temp: float = 0.04
    teacher_temp: float = 0.07
    teacher_temp_warmup_steps: int = 0

    def __post_init__(self):
        if self.total_steps <= 0:
            raise DomainError("total_steps must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise DomainError("warmup_steps must lie in [0, total_steps]")

    def _check(self, step):
        if not 0 <= step <= self.total_steps:
            raise DomainError(f"step {step} outside [0, {self.total_steps}]")

    def lr(self, step: int) -> float:
        self._check(step)
        if step < self.warmup_steps:
            return linear_warmup(step, self.warmup_steps, 0.0, self.base_lr)
        decay_total = self.total_steps - self.warmup_steps
        if decay_total == 0:
            return float(self.min_lr)
        return cosine_schedule(step - self.warmup_steps, decay_total, self.base_lr, self.min_lr)

    def weight_decay(self, step: int) -> float:
        self._check(step)
        return cosine_schedule(step, self.total_steps, self.weight_decay_start, self.weight_decay_end)

    def momentum(self, step: int) -> float:
        self._check(step)
        return cosine_schedule(step, self.total_steps, self.momentum_start, self.momentum_end)

    def teacher_temperature(self, step: int) -> float:
        self._check(step)
        return linear_warmup(
            step, self.teacher_temp_warmup_steps, self.warmup_teacher_temp, self.teacher_temp
        )

    def values(self, step: int) -> dict[str, float]:
        return {
            "lr": self.lr(step),
            "weight_decay": self.weight_decay(step),
            "momentum": self.momentum(step),
            "teacher_temp": self.teacher_temperature(step),
        }


# --------------------------------------------------------------------------
# parameter stores


@dataclass
class ParameterStore:
    """Named tensors with freeze flags, addressed by dotted path.

    Built from (and loaded back into) a :class:`torch.nn.Module`. Buffers such
    as batch-norm statistics are carried along and always flagged frozen.
    """

    entries: dict[str, torch.Tensor]
    frozen: set[str] = field(default_factory=set)
    step: int = 0

    @classmethod
    def from_module(cls, module: nn.Module, step: int = 0) -> "ParameterStore":
        entries = {}
        frozen = set()
        for name, p in module.named_parameters():
            entries[name] = p.detach().clone()
            if not p.requires_grad:
                frozen.add(name)
        for name, b in module.named_buffers():
            if b is None:
                continue
            entries[name] = b.detach().clone()
            frozen.add(name)
        return cls(entries, frozen, step)

    def load_into(self, module: nn.Module, strict: bool = True) -> None:
        own = dict(module.named_parameters())
        own.update({n: b for n, b in module.named_buffers() if b is not None})
        missing = set(own) - set(self.entries)
        unexpected = set(self.entries) - set(own)
        if strict and (missing or unexpected):
            raise ConfigError(
                f"store/module mismatch: missing={sorted(missing)[:5]} "
                f"unexpected={sorted(unexpected)[:5]}"
            )
        with torch.no_grad():
            for name, tensor in self.entries.items():
                if name not in own:
                    continue
                target = own[name]
                if tuple(target.shape) != tuple(tensor.shape):
                    raise ConfigError(
                        f"shape mismatch for {name}: {tuple(tensor.shape)} vs {tuple(target.shape)}"
                    )
                target.copy_(tensor)
        for name, p in module.named_parameters():
            if name in self.entries:
                p.requires_grad_(name not in self.frozen)

    def subset(self, prefix: str) -> "ParameterStore":
        keep = {k: v for k, v in self.entries.items() if k.startswith(prefix)}
        return ParameterStore(keep, {k for k in self.frozen if k in keep}, self.step)

    def n_trainable(self) -> int:
        return sum(t.numel() for k, t in self.entries.items() if k not in self.frozen)

    def __len__(self):
        return len(self.entries)


def count_parameters(module: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


# --------------------------------------------------------------------------
# checkpoints


def config_digest(config: Any) -> str:
    """SHA-256 of the canonical JSON form of ``config`` (dataclass or mapping)."""
    if config is None:
        return ""
    if dataclasses.is_dataclass(config):
        config = dataclasses.asdict(config)
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _dtype_name(t: torch.Tensor) -> str:
    if t.dtype.is_floating_point:
        return "float32"
    return "int64"


def save_checkpoint(
    store: ParameterStore,
    path,
    config: Any = None,
    rng_state: torch.Tensor | None = None,
    meta: dict | None = None,
) -> Path:
    """Write ``store`` as one file: magic, header length, JSON header, payload.

    The payload is every tensor as raw little-endian bytes in header order;
    floating tensors are stored as float32, integer tensors as int64.
    """
    path = Path(path)
    payloads = []
    tensors = []
    offset = 0
    for name, tensor in store.entries.items():
        dtype = _dtype_name(tensor)
        arr = tensor.detach().cpu().to(_DTYPES[dtype][0]).contiguous().numpy()
        raw = arr.astype(_DTYPES[dtype][1], copy=False).tobytes()
        tensors.append(
            {
                "path": name,
                "shape": list(arr.shape),
                "dtype": dtype,
                "frozen": name in store.frozen,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)
    payload = b"".join(payloads)
    if rng_state is None:
        rng_state = torch.get_rng_state()
    header = {
        "format": 1,
        "step": store.step,
        "config_digest": config_digest(config),
        "rng_state": base64.b64encode(rng_state.numpy().tobytes()).decode(),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "payload_nbytes": len(payload),
        "meta": meta or {},
        "tensors": tensors,
    }
    head = json.dumps(header).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(payload)
    return path


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    header, _ = _split(blob, path)
    return header


def _split(blob: bytes, path) -> tuple[dict, bytes]:
    if len(blob) < 16 or blob[:8] != CHECKPOINT_MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16 : 16 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt header ({exc})") from exc
    return header, blob[16 + hlen :]


def load_checkpoint(path, config: Any = None) -> tuple[ParameterStore, dict]:
    """Read a checkpoint written by :func:`save_checkpoint`.

    If ``config`` is given, its digest must match the stored one. Returns the
    store and the decoded header (which carries ``rng_state`` as a tensor).
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IntegrityError(f"{path}: unreadable ({exc})") from exc
    header, payload = _split(blob, path)
    if len(payload) != header.get("payload_nbytes"):
        raise IntegrityError(
            f"{path}: payload is {len(payload)} bytes, header says {header.get('payload_nbytes')}"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise IntegrityError(f"{path}: payload checksum mismatch")
    if config is not None and header["config_digest"] != config_digest(config):
        raise ConfigError(f"{path}: config digest mismatch")

    entries = {}
    frozen = set()
    for spec in header["tensors"]:
        torch_dtype, np_dtype = _DTYPES[spec["dtype"]]
        raw = payload[spec["offset"] : spec["offset"] + spec["nbytes"]]
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(spec["shape"])
        entries[spec["path"]] = torch.from_numpy(arr.copy()).to(torch_dtype)
        if spec["frozen"]:
            frozen.add(spec["path"])
    rng = np.frombuffer(base64.b64decode(header["rng_state"]), dtype=np.uint8)
    header["rng_state"] = torch.from_numpy(rng.copy())
    return ParameterStore(entries, frozen, header["step"]), header


# --------------------------------------------------------------------------
# config files


def _coerce(value: str):
    low = value.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    if "," in value:
        return [_coerce(v) for v in value.split(",") if v.strip()]
    return value.strip()


def parse_overrides(items) -> dict:
    """Parse ``key=value`` strings into a dict with scalars coerced."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = _coerce(value)
    return out


def read_config_file(path) -> dict:
    """Read a JSON object or a flat ``key=value`` file (``#`` comments)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            data = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return data
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    return parse_overrides([ln for ln in lines if ln])


def build_config(cls, *sources: Mapping | None):
    """Instantiate dataclass ``cls`` from layered mappings, rejecting unknown keys."""
    names = {f.name: f for f in dataclasses.fields(cls)}
    merged: dict = {}
    for src in sources:
        if not src:
            continue
        unknown = set(src) - set(names)
        if unknown:
            raise ConfigError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
        merged.update(src)
    for key, value in list(merged.items()):
        default = names[key].default
        if isinstance(default, tuple) and isinstance(value, list):
            merged[key] = tuple(value)
        elif isinstance(default, tuple) and isinstance(value, (int, float)):
            merged[key] = (value,)
    return cls(**merged)


# --------------------------------------------------------------------------
# RNG


def seed_everything(seed: int) -> torch.Generator:
    """Seed the global torch generator, which every training-time draw uses."""
    torch.manual_seed(seed)
    return torch.default_generator
