"""Toy crowd-density regressors and their checkpoint container.

Two built-in families:

* ``multi_column``: three parallel columns with 9/7/5 first-layer kernels,
  fused by a 1x1 convolution (output stride 4, ~50k parameters).
* ``dilated_single_column``: a VGG-style front end followed by dilated
  3x3 convolutions (output stride 8, ~200k parameters).

Anything else can be plugged in with :func:`register_external`.

Checkpoint file layout (all integers little-endian)::

    8 bytes   magic b"CCCKPT01"
    u32       header length, then that many bytes of UTF-8 JSON
              {"spec": {...}, "training_meta": {...}}
    u32       tensor count
    per tensor:
      u16 name length, name (UTF-8)
      u8 ndim, ndim x u32 dims
      u64 byte length, raw float32 data (row-major)
"""

from __future__ import annotations

import json
import logging
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .dataset import pad_to_multiple
from .errors import InterfaceError, LoadError, SpecError

FAMILIES = ("multi_column", "dilated_single_column", "external")
STRIDES = {"multi_column": 4, "dilated_single_column": 8}
CHECKPOINT_MAGIC = b"CCCKPT01"

EXTERNAL_MODELS: dict = {}

log = logging.getLogger(__name__)


def register_external(name):
    """Decorator registering ``factory(spec) -> nn.Module`` under ``name``."""

    def deco(factory):
        EXTERNAL_MODELS[name] = factory
        return factory

    return deco


@dataclass(frozen=True)
class ModelSpec:
    family: str = "multi_column"
    channels: float = 1.0
    downsample_factor: int | None = None
    in_channels: int = 3
    external_name: str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SpecError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if self.family == "external":
            if self.external_name is None or self.downsample_factor is None:
                raise SpecError("external models need external_name and downsample_factor")
        else:
            stride = STRIDES[self.family]
            if self.downsample_factor not in (None, stride):
                raise SpecError(f"{self.family} has fixed stride {stride}")
            object.__setattr__(self, "downsample_factor", stride)
        if self.channels <= 0:
            raise SpecError("channels multiplier must be positive")

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in build_model(self, 0).parameters())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def _w(base: int, mult: float) -> int:
    return max(1, int(round(base * mult)))


def _init_fuse(conv: nn.Conv2d, bias: float = 0.1) -> nn.Conv2d:
    # a positive bias keeps the rectified head alive at initialization
    nn.init.normal_(conv.weight, std=0.01)
    nn.init.constant_(conv.bias, bias)
    return conv


def _conv(cin, cout, k, dilation=1):
    return nn.Sequential(nn.Conv2d(cin, cout, k, padding=dilation * (k // 2), dilation=dilation), nn.ReLU())


class _Column(nn.Module):
    def __init__(self, cin, widths, k1, k2):
        super().__init__()
        a, b, c = widths
        self.body = nn.Sequential(
            _conv(cin, a, k1),
            nn.MaxPool2d(2),
            _conv(a, b, k2),
            nn.MaxPool2d(2),
            _conv(b, a, k2),
            _conv(a, c, k2),
        )
        self.out_channels = c

    def forward(self, x):
        return self.body(x)


class MultiColumnNet(nn.Module):
    """Three columns with different receptive fields, fused at stride 4."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        m, cin = spec.channels, spec.in_channels
        self.columns = nn.ModuleList([
            _Column(cin, (_w(9, m), _w(18, m), _w(9, m)), 9, 7),
            _Column(cin, (_w(11, m), _w(22, m), _w(11, m)), 7, 5),
            _Column(cin, (_w(13, m), _w(26, m), _w(13, m)), 5, 3),
        ])
        self.fuse = _init_fuse(nn.Conv2d(sum(c.out_channels for c in self.columns), 1, 1))
        self.head = nn.ReLU()
        self.spec = spec

    def forward(self, x):
        return self.head(self.fuse(torch.cat([c(x) for c in self.columns], dim=1)))


class DilatedColumnNet(nn.Module):
    """VGG-like front end (stride 8) + dilated back end."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        m, cin = spec.channels, spec.in_channels
        c1, c2, c3 = _w(18, m), _w(36, m), _w(70, m)
        self.frontend = nn.Sequential(
            _conv(cin, c1, 3), _conv(c1, c1, 3), nn.MaxPool2d(2),
            _conv(c1, c2, 3), _conv(c2, c2, 3), nn.MaxPool2d(2),
            _conv(c2, c3, 3), _conv(c3, c3, 3), nn.MaxPool2d(2),
        )
        self.backend = nn.Sequential(
            _conv(c3, c3, 3, 2), _conv(c3, c3, 3, 2), _conv(c3, c2, 3, 2), _conv(c2, c1, 3, 2),
        )
        self.fuse = _init_fuse(nn.Conv2d(c1, 1, 1))
        self.head = nn.ReLU()
        self.spec = spec

    def forward(self, x):
        return self.head(self.fuse(self.backend(self.frontend(x))))


def build_model(spec: ModelSpec, seed: int = 0) -> nn.Module:
    """Fresh model with deterministic initialization; global RNG untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if spec.family == "multi_column":
            model = MultiColumnNet(spec)
        elif spec.family == "dilated_single_column":
            model = DilatedColumnNet(spec)
        else:
            try:
                factory = EXTERNAL_MODELS[spec.external_name]
            except KeyError:
                raise SpecError(f"no external model registered as {spec.external_name!r}") from None
            model = factory(spec)
            model.spec = spec
    return model


def model_spec_of(model) -> ModelSpec:
    spec = getattr(model, "spec", None)
    if not isinstance(spec, ModelSpec):
        raise InterfaceError("model has no ModelSpec attached (build it with build_model)")
    return spec


def predict_density(model, image: np.ndarray) -> np.ndarray:
    """Predicted density map (H/stride x W/stride) for one H x W x C image."""
    spec = model_spec_of(model)
    if image.ndim != 3 or image.shape[2] != spec.in_channels:
        raise InterfaceError(f"expected H x W x {spec.in_channels} image, got shape {image.shape}")
    x = torch.from_numpy(pad_to_multiple(image, spec.downsample_factor).transpose(2, 0, 1).copy())
    model.eval()
    with torch.no_grad():
        out = model(x[None].float())
    return out[0, 0].numpy()


def predict_count(model, sample) -> float:
    """Estimated head count: the sum of the predicted density map."""
    return max(0.0, float(predict_density(model, sample.image).sum(dtype=np.float64)))


def translation_diagnostic(model, image: np.ndarray) -> dict:
    """Compare predictions for ``image`` and for ``image`` shifted by one output cell.

    The content is moved down/right by the stride (zero fill), so an exactly
    shift-equivariant model reproduces its map one cell over. Zero padding at
    the borders breaks this near the edges, so only cells at least one cell
    away from every border are compared. Informational only: the result is
    logged and returned, never asserted on.
    """
    s = model_spec_of(model).downsample_factor
    shifted = np.zeros_like(image)
    shifted[s:, s:] = image[:-s, :-s]
    p0, p1 = predict_density(model, image), predict_density(model, shifted)
    a, b = p0[1:-2, 1:-2], p1[2:-1, 2:-1]
    diff = np.abs(a.astype(np.float64) - b)
    ref = float(np.abs(a).sum(dtype=np.float64))
    out = {"max_abs": float(diff.max()) if diff.size else 0.0,
           "rel_l1": float(diff.sum()) / ref if ref > 0 else float(diff.sum()),
           "cells": int(diff.size)}
    log.info("translation diagnostic (shift %d px): %s", s, out)
    return out


# ------------------------------------------------------------ checkpoints


@dataclass
class ModelCheckpoint:
    spec: ModelSpec
    weights: "OrderedDict[str, np.ndarray]"
    training_meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, training_meta=None) -> "ModelCheckpoint":
        weights = OrderedDict(
            (k, v.detach().cpu().numpy().astype(np.float32, copy=True)) for k, v in model.state_dict().items()
        )
        return cls(model_spec_of(model), weights, dict(training_meta or {}))

    def build(self) -> nn.Module:
        model = build_model(self.spec, 0)
        state = model.state_dict()
        if set(state) != set(self.weights):
            raise InterfaceError("checkpoint tensors do not match the model's parameters")
        for k, v in self.weights.items():
            if tuple(state[k].shape) != v.shape:
                raise InterfaceError(f"tensor {k}: checkpoint {v.shape} vs model {tuple(state[k].shape)}")
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.weights.items()})
        model.eval()
        return model

    def to_bytes(self) -> bytes:
        header = json.dumps({"spec": self.spec.to_dict(), "training_meta": self.training_meta}).encode()
        parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(self.weights))]
        for name, arr in self.weights.items():
            raw_name = name.encode()
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            parts.append(struct.pack("<H", len(raw_name)) + raw_name)
            parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(struct.pack("<Q", len(data)) + data)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ModelCheckpoint":
        if buf[:8] != CHECKPOINT_MAGIC:
            raise LoadError(f"not a checkpoint (magic {buf[:8]!r})")
        try:
            pos = 8
            (hlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            header = json.loads(buf[pos:pos + hlen].decode())
            pos += hlen
            (count,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            weights = OrderedDict()
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", buf, pos)
                pos += 2
                name = buf[pos:pos + nlen].decode()
                pos += nlen
                (ndim,) = struct.unpack_from("<B", buf, pos)
                pos += 1
                shape = struct.unpack_from(f"<{ndim}I", buf, pos)
                pos += 4 * ndim
                (nbytes,) = struct.unpack_from("<Q", buf, pos)
                pos += 8
                weights[name] = np.frombuffer(buf[pos:pos + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
                pos += nbytes
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise LoadError(f"corrupt checkpoint: {exc}") from None
        return cls(ModelSpec.from_dict(header["spec"]), weights, header.get("training_meta", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    ckpt.save(path)


def load_checkpoint(path) -> ModelCheckpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from None
    return ModelCheckpoint.from_bytes(buf)
