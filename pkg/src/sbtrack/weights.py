"""Binary weight files.

Layout (all integers little-endian u32):

    magic "SBTW" | version | tensor count
    per tensor: name length | UTF-8 name | rank | extent per axis | float32 payload

The model config travels inside the file as a reserved entry named
``__config__`` whose payload is the YAML config text, one character code
per float.  That keeps the container format uniform while letting
``load_weights(path)`` rebuild the model without a side channel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import model as md
from .model import Model

MAGIC = b"SBTW"
VERSION = 1
CONFIG_ENTRY = "__config__"


class FormatError(ValueError):
    """File is not a valid weight container."""


class LoadError(ValueError):
    """File is well-formed but incompatible with the target model."""


@dataclass
class LoadReport:
    """Outcome of loading a file into a model, tensor by tensor."""

    loaded: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)  # in file, not in model
    missing: list[str] = field(default_factory=list)  # in model, not in file

    @property
    def complete(self) -> bool:
        return not self.skipped and not self.missing

    def summary(self) -> str:
        lines = [f"loaded {len(self.loaded)} tensors"]
        if self.skipped:
            lines.append(f"skipped {len(self.skipped)} file tensors: "
                         + ", ".join(self.skipped[:8]) + ("..." if len(self.skipped) > 8 else ""))
        if self.missing:
            lines.append(f"left {len(self.missing)} model tensors at init: "
                         + ", ".join(self.missing[:8]) + ("..." if len(self.missing) > 8 else ""))
        return "\n".join(lines)


def _write_entry(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", arr.ndim))
    for ext in arr.shape:
        fh.write(struct.pack("<I", ext))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_weights(model: Model, path) -> None:
    """Write every named parameter plus the embedded config."""
    params = model.named_parameters()
    cfg_text = md.config_to_text(model.config)
    cfg_payload = np.frombuffer(cfg_text.encode("utf-8"), dtype=np.uint8).astype(np.float32)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(params) + 1))
        _write_entry(fh, CONFIG_ENTRY, cfg_payload)
        for name, t in params.items():
            _write_entry(fh, name, t.data)


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def read_weight_file(path) -> dict[str, np.ndarray]:
    """Raw named tensors, config entry included (as float char codes)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise FormatError("bad magic bytes")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(rank))
            n = int(np.prod(shape)) if shape else 1
            payload = _read_exact(fh, 4 * n)
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise FormatError("trailing bytes after last tensor")
    return out


def embedded_config(entries: dict[str, np.ndarray]) -> md.ModelConfig:
    if CONFIG_ENTRY not in entries:
        raise FormatError("file carries no embedded config")
    text = bytes(entries[CONFIG_ENTRY].astype(np.uint8)).decode("utf-8")
    return md.config_from_text(text)


def load_weights_into(model: Model, path) -> LoadReport:
    """Assign file tensors to model parameters by name.

    Partial loads are fine (a 3-stage tracker can pick up the shared stages
    of a 4-stage classifier file); a shape clash on a matching name is an
    error.  Returns what was loaded / skipped / left at init.
    """
    entries = read_weight_file(path)
    entries.pop(CONFIG_ENTRY, None)
    params = model.named_parameters()
    report = LoadReport()
    for name, arr in entries.items():
        t = params.get(name)
        if t is None:
            report.skipped.append(name)
            continue
        if tuple(arr.shape) != tuple(t.shape):
            raise LoadError(f"shape mismatch for {name}: file {arr.shape} vs model {t.shape}")
        t.data[:] = arr.astype(model.dtype)
        report.loaded.append(name)
    report.missing = [n for n in params if n not in entries]
    return report


def load_weights(path) -> Model:
    """Rebuild the model from a file written by `save_weights`.

    Uses the embedded config; every model tensor must be present.
    """
    entries = read_weight_file(path)
    cfg = embedded_config(entries)
    model = md.build_model(cfg, seed=0)
    report = load_weights_into(model, path)
    if report.missing:
        raise LoadError(f"file incomplete for its own config: missing {report.missing[:5]}")
    return model
