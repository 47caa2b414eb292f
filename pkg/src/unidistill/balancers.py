"""Pluggable loss-weighting and gradient-surgery strategies.

Weight strategies (uniform, uncertainty, dwa) replace the static per-task
weights of the training objective while the distillation weights stay fixed.
The surgery strategy (pcgrad) leaves weights at 1 and instead edits per-task
gradients: conflicting components are projected away in a random task order.

gradnorm, mgda, cagrad, and imtl_h are reserved names on the same plugin
surface; selecting them raises NotImplementedError.
"""
from __future__ import annotations

import math

import numpy as np
import torch

from .errors import ConfigurationError, NumericalError, ShapeError

WEIGHT_STRATEGIES = ("uniform", "uncertainty", "dwa")
SURGERY_STRATEGIES = ("pcgrad",)
RESERVED_STRATEGIES = ("gradnorm", "mgda", "cagrad", "imtl_h")


class Balancer:
    """Per-task weight provider owned by one training loop.

    uncertainty: weights are exp(-s_t) with learnable s_t (init 0) plus an
    additive sum(s_t) regularizer; s_t join the main optimizer.
    dwa: weights follow the ratio of the two most recent epoch-mean losses
    through a tempered softmax (temperature 2); the first two epochs are
    uniform by definition.
    """

    def __init__(self, strategy: str, task_ids, temperature: float = 2.0):
        if strategy in RESERVED_STRATEGIES:
            raise NotImplementedError(f"balancer {strategy!r} is reserved but not implemented")
        if strategy not in WEIGHT_STRATEGIES + SURGERY_STRATEGIES:
            raise ConfigurationError(f"unknown balancer strategy: {strategy!r}")
        if not task_ids:
            raise ConfigurationError("balancer needs at least one task id")
        self.strategy = strategy
        self.task_ids = list(task_ids)
        self.temperature = temperature
        self.log_vars = None
        if strategy == "uncertainty":
            self.log_vars = {
                tid: torch.nn.Parameter(torch.zeros(())) for tid in self.task_ids
            }
        self.epoch_losses = []  # per-epoch dict of mean task losses, for dwa

    def parameters(self):
        return list(self.log_vars.values()) if self.log_vars else []

    def extra_loss(self):
        """Regularizer added to the objective (uncertainty only)."""
        if self.strategy != "uncertainty":
            return 0.0
        return sum(self.log_vars[tid] for tid in self.task_ids)

    def note_epoch(self, mean_losses: dict):
        """Record one epoch's mean task losses (consumed by dwa)."""
        self.epoch_losses.append({tid: float(mean_losses[tid]) for tid in self.task_ids})

    def task_weights(self, losses: dict, epoch: int) -> dict:
        """Weights to apply to the task terms this step.

        `losses` holds the current per-task loss values; they must be finite.
        Uncertainty weights are returned as graph tensors so the s_t receive
        gradients; other strategies return plain floats.
        """
        for tid in self.task_ids:
            v = losses.get(tid)
            if v is None or not math.isfinite(float(v)):
                raise NumericalError(f"non-finite loss for task {tid!r}: {v!r}")
        if self.strategy == "uncertainty":
            return {tid: torch.exp(-self.log_vars[tid]) for tid in self.task_ids}
        if self.strategy == "dwa":
            if epoch < 2 or len(self.epoch_losses) < 2:
                return {tid: 1.0 for tid in self.task_ids}
            prev, prev2 = self.epoch_losses[-1], self.epoch_losses[-2]
            ratios = np.array(
                [prev[tid] / max(prev2[tid], 1e-12) for tid in self.task_ids]
            )
            e = np.exp(ratios / self.temperature)
            w = len(self.task_ids) * e / e.sum()
            return dict(zip(self.task_ids, w.tolist()))
        # uniform and pcgrad keep weights at 1
        return {tid: 1.0 for tid in self.task_ids}

    def state_dict(self) -> dict:
        state = {"strategy": self.strategy, "epoch_losses": self.epoch_losses}
        if self.log_vars:
            state["log_vars"] = {tid: float(p.detach()) for tid, p in self.log_vars.items()}
        return state

    def load_state_dict(self, state: dict):
        self.epoch_losses = [dict(d) for d in state.get("epoch_losses", [])]
        if self.log_vars and "log_vars" in state:
            with torch.no_grad():
                for tid, v in state["log_vars"].items():
                    self.log_vars[tid].fill_(v)


def make_balancer(strategy: str, task_ids, temperature: float = 2.0) -> Balancer:
    return Balancer(strategy, task_ids, temperature)


def pcgrad_surgery(grads, seed: int):
    """Project conflicting task gradients and return their sum.

    Visits tasks in a seed-determined random order; each task's gradient
    drops its component along any other task's original gradient it
    conflicts with (negative inner product), visiting the others in the same
    order. A single task is returned unchanged.
    """
    vecs = [torch.as_tensor(g, dtype=torch.float64).flatten() for g in grads]
    if not vecs:
        raise ConfigurationError("no gradients given to surgery")
    length = vecs[0].numel()
    if length == 0:
        raise ConfigurationError("zero-length gradients given to surgery")
    for v in vecs:
        if v.numel() != length:
            raise ShapeError(f"gradient lengths differ: {v.numel()} vs {length}")
    if len(vecs) == 1:
        return vecs[0].clone()

    order = np.random.default_rng(seed).permutation(len(vecs))
    combined = torch.zeros(length, dtype=torch.float64)
    for i in order:
        g = vecs[i].clone()
        for j in order:
            if j == i:
                continue
            gj = vecs[j]
            dot = torch.dot(g, gj)
            nj2 = torch.dot(gj, gj)
            if float(dot) < 0 and float(nj2) > 0:
                g = g - (dot / nj2) * gj
        combined += g
    return combined
