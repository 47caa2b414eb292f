"""Few-shot meta-test machinery and global retrieval.

Episodes draw disjoint support and query sets from the meta-test split of one
domain. Classification is nearest-centroid over cosine distance; optional
adaptation learns a square channel map, initialized to identity, by gradient
descent on the support set's own cross-entropy. The frozen encoder is never
touched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .data import DatasetSuite
from .errors import ConfigurationError, NumericalError, SamplingError
from .seeding import rng_for

EPS = 1e-12


@dataclass
class Episode:
    support: np.ndarray  # (N*K, ...) features or images
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    ways: int
    shots: int


def domain_pool(suite: DatasetSuite, domain: str, split: str = "meta_test_classes"):
    """(stacked images, labels) of one domain within a split."""
    samples = [s for s in suite.splits.get(split, []) if domain in s.labels]
    if not samples:
        raise SamplingError(f"domain {domain!r} has no samples in split {split!r}")
    images = np.stack([s.image for s in samples])
    labels = np.asarray([int(s.labels[domain]) for s in samples])
    return images, labels


def sample_episode(
    pool,
    labels,
    ways,
    shots: int,
    query_per_class: int,
    rng: np.random.Generator,
    ways_range=(2, 5),
) -> Episode:
    """Draw one N-way K-shot episode from a (pool, labels) collection.

    `pool` rows may be images or precomputed features. `ways` may be the
    string "varying", in which case the way count is drawn uniformly from
    ways_range (inclusive). Support and query are instance-disjoint.
    """
    pool = np.asarray(pool)
    labels = np.asarray(labels)
    if ways == "varying":
        ways = int(rng.integers(ways_range[0], ways_range[1] + 1))
    classes, counts = np.unique(labels, return_counts=True)
    need = shots + query_per_class
    eligible = classes[counts >= need]
    if len(eligible) < ways:
        raise SamplingError(
            f"need {ways} classes with >= {need} examples, "
            f"only {len(eligible)} of {len(classes)} qualify"
        )
    chosen = rng.choice(eligible, size=ways, replace=False)
    sup_idx, qry_idx = [], []
    for c in chosen:
        rows = np.flatnonzero(labels == c)
        picks = rng.choice(rows, size=need, replace=False)
        sup_idx.extend(picks[:shots])
        qry_idx.extend(picks[shots:])
    sup_idx = np.asarray(sup_idx)
    qry_idx = np.asarray(qry_idx)
    return Episode(
        pool[sup_idx], labels[sup_idx], pool[qry_idx], labels[qry_idx], int(ways), shots
    )


def _unit_rows(t: torch.Tensor) -> torch.Tensor:
    return t / t.norm(dim=1, keepdim=True).clamp_min(EPS)


def ncc_predict(support, support_labels, query, temperature: float = 1.0):
    """Nearest-centroid class probabilities over cosine distance.

    Returns (probs, classes): probs is (n_query, n_classes) with columns
    following `classes` (sorted unique support labels). Differentiable in the
    feature arguments.
    """
    support = torch.as_tensor(support)
    query = torch.as_tensor(query)
    labels = np.asarray(support_labels)
    if query.ndim != 2 or support.ndim != 2:
        raise ConfigurationError("ncc_predict expects (n, C) feature matrices")
    if bool((query.detach().norm(dim=1) < EPS).any()):
        raise NumericalError("zero query feature vector")
    classes = np.unique(labels)
    centroids = torch.stack(
        [support[torch.as_tensor(labels == c)].mean(dim=0) for c in classes]
    )
    cos = _unit_rows(query) @ _unit_rows(centroids).t()
    logits = temperature * (cos - 1.0)
    probs = torch.softmax(logits, dim=1)
    return probs, classes


def ncc_cross_entropy(features, labels, temperature: float = 1.0) -> torch.Tensor:
    """Cross-entropy of NCC predictions on the set that defines the centroids.

    The adaptation objective: each feature is classified against centroids
    computed from the same (mapped) set.
    """
    probs, classes = ncc_predict(features, labels, features, temperature)
    lab = np.asarray(labels)
    col = {c: i for i, c in enumerate(classes)}
    target = torch.as_tensor([col[l] for l in lab.tolist()], dtype=torch.long)
    return torch.nn.functional.nll_loss(torch.log(probs.clamp_min(EPS)), target)


@dataclass
class FewShotAdapter:
    """Square channel map applied to frozen features; identity at birth."""

    matrix: torch.Tensor
    loss_trace: list = field(default_factory=list)

    def apply(self, features) -> torch.Tensor:
        f = torch.as_tensor(features, dtype=self.matrix.dtype)
        return f @ self.matrix.t()


def adapt_linear_map(
    support,
    support_labels,
    steps: int = 40,
    lr: float = 0.1,
    temperature: float = 1.0,
    optimizer: str = "adadelta",
) -> FewShotAdapter:
    """Fit the channel map by descending the support set's own NCC loss.

    steps=0 returns the untouched identity map. Divergence (non-finite loss)
    aborts with the loss trace attached.
    """
    if steps < 0:
        raise ConfigurationError(f"steps must be >= 0, got {steps}")
    support = torch.as_tensor(support)
    c = support.shape[1]
    theta = torch.nn.Parameter(torch.eye(c, dtype=support.dtype))
    adapter = FewShotAdapter(theta.detach())
    if steps == 0:
        return adapter

    opts = {
        "adadelta": lambda p: torch.optim.Adadelta(p, lr=lr),
        "sgd": lambda p: torch.optim.SGD(p, lr=lr),
        "adam": lambda p: torch.optim.Adam(p, lr=lr),
    }
    if optimizer not in opts:
        raise ConfigurationError(f"unknown adapter optimizer: {optimizer!r}")
    opt = opts[optimizer]([theta])
    trace = []
    for _ in range(steps):
        opt.zero_grad()
        loss = ncc_cross_entropy(support @ theta.t(), support_labels, temperature)
        if not torch.isfinite(loss):
            raise NumericalError("support adaptation diverged", trace=trace)
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))
    return FewShotAdapter(theta.detach(), trace)


def episode_accuracy(
    episode: Episode,
    temperature: float = 1.0,
    adapter: Optional[FewShotAdapter] = None,
) -> float:
    """Query accuracy of (optionally adapted) NCC on a feature episode."""
    sup = torch.as_tensor(episode.support)
    qry = torch.as_tensor(episode.query)
    if adapter is not None:
        sup = adapter.apply(sup)
        qry = adapter.apply(qry)
    probs, classes = ncc_predict(sup, episode.support_labels, qry, temperature)
    pred = classes[probs.argmax(dim=1).numpy()]
    return float((pred == episode.query_labels).mean())


def evaluate_episodes(
    encode_fn,
    suite: DatasetSuite,
    domain: str,
    ways,
    shots: int,
    query_per_class: int,
    episodes: int,
    seed: int,
    adapt_steps: int = 40,
    adapt_lr: float = 0.1,
    temperature: float = 1.0,
    optimizer: str = "adadelta",
) -> dict:
    """Mean accuracy and 95% interval over episodes, with and without adaptation.

    `encode_fn` maps a stacked image array to a (B, C) feature array; the
    domain pool is encoded once and episodes are sampled over features.
    """
    images, labels = domain_pool(suite, domain)
    feats = np.asarray(encode_fn(images))
    accs, accs_adapted = [], []
    for e in range(episodes):
        rng = rng_for(seed, "episode", domain, e)
        ep = sample_episode(feats, labels, ways, shots, query_per_class, rng)
        accs.append(episode_accuracy(ep, temperature))
        if adapt_steps > 0:
            adapter = adapt_linear_map(
                torch.as_tensor(ep.support),
                ep.support_labels,
                steps=adapt_steps,
                lr=adapt_lr,
                temperature=temperature,
                optimizer=optimizer,
            )
            accs_adapted.append(episode_accuracy(ep, temperature, adapter))

    def summary(values):
        if not values:
            return None, None
        arr = np.asarray(values)
        ci = 1.96 * arr.std(ddof=1) / math.sqrt(len(arr)) if len(arr) > 1 else 0.0
        return float(arr.mean()), float(ci)

    mean, ci = summary(accs)
    mean_a, ci_a = summary(accs_adapted)
    return {
        "domain": domain,
        "episodes": episodes,
        "ncc_acc": mean,
        "ncc_ci95": ci,
        "adapted_acc": mean_a,
        "adapted_ci95": ci_a,
    }


def recall_at_k(features, labels, ks) -> dict:
    """Fraction of items with a same-label neighbor in their cosine top-k.

    Self-matches are excluded; ties break by ascending item index. A class
    with a single member contributes a guaranteed miss by construction.
    """
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    ks = [int(k) for k in ks]
    if f.ndim != 2:
        raise ConfigurationError(f"expected (B, C) features, got {f.shape}")
    b = f.shape[0]
    if not ks or min(ks) < 1:
        raise ConfigurationError("ks must be positive integers")
    if b < max(ks) + 1:
        raise ConfigurationError(f"need at least max(k)+1={max(ks)+1} items, got {b}")
    fn = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), EPS)
    sims = fn @ fn.T
    np.fill_diagonal(sims, -np.inf)
    # stable argsort keeps ascending index order among ties
    order = np.argsort(-sims, axis=1, kind="stable")
    same = labels[order] == labels[:, None]
    return {k: float(same[:, :k].any(axis=1).mean()) for k in ks}
