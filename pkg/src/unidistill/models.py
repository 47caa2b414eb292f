"""Encoders, decoders, adapters, and the two network assemblies.

Teachers are single-task networks (one encoder, one decoder). The universal
student owns one shared encoder, a decoder per task, and a shape-preserving
adapter per task that projects student features into each teacher's
representation space. Adapters exist only for the training objective; the
inference path never touches them.

Student and teacher encoders share one architecture so features can be
compared without any projection beyond the adapter.
"""
from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn as nn

from .data import TaskSpec
from .errors import ConfigurationError, ShapeError
from .seeding import derive_seed

ADAPTER_KINDS = ("identity", "linear", "nonlinear")


class Encoder(nn.Module):
    """Four-block convolutional feature extractor.

    Dense mode keeps a spatial map at 1/4 resolution (two stride-2 blocks);
    classification mode downsamples in every block and global-average-pools
    to a C-vector.
    """

    def __init__(self, mode: str, channels: int):
        super().__init__()
        if mode not in ("dense", "classification"):
            raise ConfigurationError(f"unknown encoder mode: {mode!r}")
        if channels < 8:
            raise ConfigurationError(f"encoder channels must be >= 8, got {channels}")
        self.mode = mode
        self.channels = channels

        def block(cin, cout, stride):
            return [
                nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
            ]

        if mode == "dense":
            strides = (1, 2, 1, 2)
        else:
            strides = (2, 2, 2, 2)
        layers = []
        cin = 3
        for s in strides:
            layers += block(cin, channels, s)
            cin = channels
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        if self.mode == "dense" and (x.shape[2] % 4 or x.shape[3] % 4):
            raise ShapeError(
                f"dense mode needs H, W divisible by 4, got {tuple(x.shape[2:])}"
            )
        h = self.body(x)
        if self.mode == "classification":
            h = torch.nn.functional.adaptive_avg_pool2d(h, 1).flatten(1)
        return h


class DenseDecoder(nn.Module):
    """Two transposed-conv blocks: C x H/4 x W/4 feature back to O x H x W."""

    def __init__(self, channels: int, out_channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ConvTranspose2d(channels, channels, 4, stride=2, padding=1),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(channels, out_channels, 4, stride=2, padding=1),
        )

    def forward(self, feat):
        return self.body(feat)


class VectorDecoder(nn.Module):
    """Single affine layer on pooled features."""

    def __init__(self, channels: int, out_channels: int):
        super().__init__()
        self.fc = nn.Linear(channels, out_channels)

    def forward(self, feat):
        return self.fc(feat)


def build_decoder(task: TaskSpec, channels: int, seed: int) -> nn.Module:
    torch.manual_seed(derive_seed(seed, "decoder", task.id))
    if task.kind == "dense":
        return DenseDecoder(channels, task.out_channels)
    return VectorDecoder(channels, task.out_channels)


class IdentityAdapter(nn.Module):
    kind = "identity"

    def forward(self, feat):
        return feat


class LinearAdapter(nn.Module):
    """Per-location channel mixing: 1x1 conv on maps, affine map on vectors."""

    kind = "linear"

    def __init__(self, channels: int, mode: str):
        super().__init__()
        if mode == "dense":
            self.map = nn.Conv2d(channels, channels, 1)
        else:
            self.map = nn.Linear(channels, channels)

    def forward(self, feat):
        return self.map(feat)


class NonlinearAdapter(nn.Module):
    kind = "nonlinear"

    def __init__(self, channels: int, mode: str):
        super().__init__()
        if mode == "dense":
            self.map = nn.Sequential(
                nn.Conv2d(channels, channels, 1),
                nn.ReLU(inplace=True),
                nn.Conv2d(channels, channels, 1),
            )
        else:
            self.map = nn.Sequential(
                nn.Linear(channels, channels),
                nn.ReLU(inplace=True),
                nn.Linear(channels, channels),
            )

    def forward(self, feat):
        return self.map(feat)


def make_adapter(kind: str, channels: int, mode: str, seed: int = 0) -> nn.Module:
    if kind not in ADAPTER_KINDS:
        raise ConfigurationError(f"unknown adapter kind: {kind!r}")
    torch.manual_seed(seed)
    if kind == "identity":
        return IdentityAdapter()
    if kind == "linear":
        return LinearAdapter(channels, mode)
    return NonlinearAdapter(channels, mode)


class SingleTaskModel(nn.Module):
    """One encoder, one decoder, one task. The teacher unit."""

    def __init__(self, encoder: nn.Module, decoder: nn.Module, task: TaskSpec):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder
        self.task = task

    def features(self, x):
        return self.encoder(x)

    def forward(self, x):
        return self.decoder(self.encoder(x))


class UniversalModel(nn.Module):
    """Shared encoder + per-task decoders and adapters."""

    def __init__(self, encoder: nn.Module, decoders: dict, adapters: dict, tasks: list):
        super().__init__()
        self.encoder = encoder
        self.decoders = nn.ModuleDict(decoders)
        self.adapters = nn.ModuleDict(adapters)
        self.tasks = list(tasks)

    @property
    def task_ids(self):
        return [t.id for t in self.tasks]

    def task(self, task_id: str) -> TaskSpec:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise ConfigurationError(f"unknown task id: {task_id!r}")


def build_encoder(mode: str, channels: int, seed: int) -> Encoder:
    """Deterministically initialized encoder; same seed, same parameters."""
    torch.manual_seed(derive_seed(seed, "encoder"))
    return Encoder(mode, channels)


def build_single_task_model(task: TaskSpec, channels: int, seed: int) -> SingleTaskModel:
    enc = build_encoder(task.kind, channels, derive_seed(seed, "teacher", task.id))
    dec = build_decoder(task, channels, derive_seed(seed, "teacher", task.id))
    return SingleTaskModel(enc, dec, task)


def build_universal_model(
    tasks: list, channels: int, seed: int, adapter: str = "linear"
) -> UniversalModel:
    if not tasks:
        raise ConfigurationError("universal model needs at least one task")
    kinds = {t.kind for t in tasks}
    if len(kinds) != 1:
        raise ConfigurationError(f"tasks mix encoder modes: {sorted(kinds)}")
    mode = kinds.pop()
    enc = build_encoder(mode, channels, seed)
    decoders = {t.id: build_decoder(t, channels, seed) for t in tasks}
    adapters = {
        t.id: make_adapter(adapter, channels, mode, derive_seed(seed, "adapter", t.id))
        for t in tasks
    }
    return UniversalModel(enc, decoders, adapters, tasks)


def forward_universal(model: UniversalModel, x: torch.Tensor, with_adapters: bool) -> dict:
    """Run every task head on one shared encoding of x.

    Returns {task id: (prediction, raw_feature, adapted_feature)} where the
    raw feature is the same tensor object for every task and adapted_feature
    is None unless with_adapters is set.
    """
    if not model.tasks:
        raise ConfigurationError("universal model has no tasks")
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
    feat = model.encoder(x)
    out = {}
    for t in model.tasks:
        pred = model.decoders[t.id](feat)
        adapted = model.adapters[t.id](feat) if with_adapters else None
        out[t.id] = (pred, feat, adapted)
    return out


def param_checksum(module: nn.Module) -> int:
    """Order-stable hash over all parameter and buffer bytes, as uint64."""
    h = hashlib.blake2b(digest_size=8)
    state = module.state_dict()
    for name in sorted(state):
        t = state[name]
        arr = np.ascontiguousarray(t.detach().cpu().numpy())
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        h.update(name.encode())
        h.update(arr.tobytes())
    return int.from_bytes(h.digest(), "little")


def freeze_and_checksum(model: nn.Module) -> int:
    """Disable gradients, switch to eval mode, and fingerprint the weights."""
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return param_checksum(model)
