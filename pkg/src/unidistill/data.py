"""Synthetic suites for multi-task dense prediction and multi-domain classification.

Two generators, one dataset abstraction:

* `generate_dense_suite` renders geometric shapes on a smooth height field and
  labels every image with a segmentation mask, a depth map, and unit surface
  normals computed from the analytic gradient of the generating field. All
  three tasks share every image (multi-task mode, "mtl").

* `generate_domain_suite` renders glyph classes in several visual styles, one
  style per domain, with globally disjoint label sets. Each image carries
  exactly one domain's label (multi-domain mode, "mdl"). One extra domain is
  generated but withheld from training entirely; its samples live in the
  `meta_test_classes` split for few-shot evaluation, together with held-out
  classes of the training domains.

Everything is a pure function of (seed, parameters): regenerating a suite with
the same arguments is byte-identical. No image codecs, arrays only.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, IntegrityError, IterationError, ShapeError
from .seeding import rng_for

SPLIT_ORDER = ("train", "val", "test", "meta_test_classes")

DENSE_SEG_CLASSES = 5  # background + 4 shape classes


@dataclass
class TaskSpec:
    """Declares one task or domain: output geometry, loss, metric, direction."""

    id: str
    kind: str  # "dense" or "classification"
    out_channels: int
    out_height: int
    out_width: int
    loss: str  # "cross_entropy" | "l1" | "cosine_normals"
    metric: str  # "miou" | "abs_err" | "mean_angle_err" | "accuracy"
    lower_is_better: bool

    def __post_init__(self):
        if self.kind not in ("dense", "classification"):
            raise ConfigurationError(f"unknown task kind: {self.kind!r}")
        if self.kind == "classification" and (self.out_height, self.out_width) != (1, 1):
            raise ConfigurationError(
                f"classification task {self.id!r} must have 1x1 output shape"
            )
        if self.loss == "cosine_normals" and self.out_channels != 3:
            raise ConfigurationError(
                f"task {self.id!r}: cosine_normals requires 3 output channels"
            )
        if self.out_channels < 1 or self.out_height < 1 or self.out_width < 1:
            raise ConfigurationError(f"task {self.id!r}: output dims must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)


@dataclass
class LabeledSample:
    """One image plus its label arrays, keyed by task id.

    Multi-task samples carry labels for every task; multi-domain samples carry
    exactly one entry whose key names the sample's domain.
    """

    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    labels: dict

    @property
    def task_ids(self):
        return tuple(self.labels.keys())


@dataclass
class DatasetSuite:
    mode: str  # "mtl" | "mdl"
    tasks: list
    splits: dict  # split name -> list[LabeledSample]
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("mtl", "mdl"):
            raise ConfigurationError(f"unknown suite mode: {self.mode!r}")
        ids = [t.id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"duplicate task ids in suite: {ids}")

    def task(self, task_id: str) -> TaskSpec:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise ConfigurationError(f"unknown task id: {task_id!r}")

    @property
    def task_ids(self):
        return [t.id for t in self.tasks]


def unseen_domains(suite: DatasetSuite) -> list:
    """Domain ids present in meta_test_classes samples but absent from suite.tasks.

    For generated mdl suites this is the single withheld domain.
    """
    known = set(suite.task_ids)
    found = []
    for s in suite.splits.get("meta_test_classes", []):
        for tid in s.labels:
            if tid not in known and tid not in found:
                found.append(tid)
    return sorted(found)


def _split_sizes(n: int) -> tuple:
    """Train/val/test sizes: roughly 70/15/15, val and test nonempty for n >= 3."""
    if n < 3:
        return n, 0, 0
    n_val = max(1, round(0.15 * n))
    n_test = max(1, round(0.15 * n))
    return n - n_val - n_test, n_val, n_test


# ---------------------------------------------------------------------------
# dense suite: shapes over a height field
# ---------------------------------------------------------------------------

# per-class base colors: background, circle, square, triangle, diamond
_PALETTE = np.array(
    [
        [0.35, 0.40, 0.50],
        [0.80, 0.25, 0.20],
        [0.20, 0.70, 0.30],
        [0.85, 0.75, 0.20],
        [0.55, 0.30, 0.75],
    ]
)


def _render_dense_image(rng: np.random.Generator, hw: int):
    """Render one scene; returns (image, seg, depth, normals).

    The scene is a smooth background plane plus 2..4 shapes stacked at
    strictly increasing base heights, so every mask boundary is also a depth
    discontinuity. Normals come from the analytic gradient of the visible
    surface, not finite differences.
    """
    xs = (np.arange(hw) + 0.5) / hw
    X, Y = np.meshgrid(xs, xs, indexing="xy")  # X varies along columns

    # background: tilted plane + gentle sinusoid, kept well below shape bases
    p0 = rng.uniform(0.12, 0.16)
    ax, ay = rng.uniform(-0.04, 0.04, size=2)
    amp_s = rng.uniform(0.01, 0.03)
    fx, fy = rng.uniform(0.5, 1.5, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    arg = 2 * np.pi * (fx * X + fy * Y) + phase
    height = p0 + ax * X + ay * Y + amp_s * np.sin(arg)
    gx = ax + amp_s * 2 * np.pi * fx * np.cos(arg)
    gy = ay + amp_s * 2 * np.pi * fy * np.cos(arg)
    seg = np.zeros((hw, hw), dtype=np.int64)

    n_shapes = rng.integers(2, 5)
    for j in range(n_shapes):
        cls = int(rng.integers(1, 5))
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        radius = rng.uniform(0.14, 0.24)
        base = 0.35 + 0.16 * j
        amp = rng.uniform(0.02, 0.035)

        dx, dy = X - cx, Y - cy
        if cls == 1:  # circle: paraboloid cap
            r2 = dx * dx + dy * dy
            inside = r2 <= radius * radius
            prof = 1.0 - r2 / (radius * radius)
            pgx = -2.0 * dx / (radius * radius)
            pgy = -2.0 * dy / (radius * radius)
        elif cls == 2:  # square: tilted plane over an axis-aligned square
            half = 0.8 * radius
            inside = (np.abs(dx) <= half) & (np.abs(dy) <= half)
            ang = rng.uniform(0, 2 * np.pi)
            ux, uy = np.cos(ang), np.sin(ang)
            span = 2.0 * half * np.sqrt(2.0)
            prof = 0.5 + (ux * dx + uy * dy) / span
            pgx = np.full_like(X, ux / span)
            pgy = np.full_like(Y, uy / span)
        elif cls == 3:  # triangle: ramp along y over a triangular support
            top = cy - radius
            bot = cy + 0.8 * radius
            halfw = 0.9 * radius
            frac = np.clip((Y - top) / (bot - top), 0.0, 1.0)
            inside = (Y >= top) & (Y <= bot) & (np.abs(dx) <= halfw * frac)
            prof = (bot - Y) / (bot - top)
            pgx = np.zeros_like(X)
            pgy = np.full_like(Y, -1.0 / (bot - top))
        else:  # diamond: cone in the L1 ball
            l1 = np.abs(dx) + np.abs(dy)
            inside = l1 <= radius
            prof = 1.0 - l1 / radius
            pgx = -np.sign(dx) / radius
            pgy = -np.sign(dy) / radius

        h_shape = base + amp * prof
        height = np.where(inside, h_shape, height)
        gx = np.where(inside, amp * pgx, gx)
        gy = np.where(inside, amp * pgy, gy)
        seg = np.where(inside, cls, seg)

    # unit normals from the analytic surface gradient
    n_raw = np.stack([-gx, -gy, np.ones_like(gx)])
    normals = n_raw / np.linalg.norm(n_raw, axis=0, keepdims=True)

    # shaded rendering: class color, diffuse light, mild depth attenuation
    light = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), 1.0])
    light = light / np.linalg.norm(light)
    shade = np.clip(np.einsum("chw,c->hw", normals, light), 0.0, 1.0)
    intensity = (0.35 + 0.65 * shade) * (1.0 - 0.35 * height)
    colors = _PALETTE[seg]  # (hw, hw, 3)
    img = colors.transpose(2, 0, 1) * intensity[None]
    img = img + rng.normal(0.0, 0.01, size=img.shape)
    img = np.clip(img, 0.0, 1.0)

    return (
        img.astype(np.float32),
        seg,
        height[None].astype(np.float32),
        normals.astype(np.float32),
    )


def generate_dense_suite(seed: int, n_images: int, hw: int) -> DatasetSuite:
    """Three-task dense suite: segmentation, depth, surface normals.

    Args:
        seed: root seed; identical arguments reproduce identical arrays.
        n_images: total sample count, split roughly 70/15/15.
        hw: square image side, 16..128.

    Returns:
        DatasetSuite in "mtl" mode with tasks [seg, depth, normals].
    """
    if not (16 <= hw <= 128):
        raise ConfigurationError(f"hw must be in 16..128, got {hw}")
    if n_images < 1:
        raise ConfigurationError(f"n_images must be >= 1, got {n_images}")

    tasks = [
        TaskSpec("seg", "dense", DENSE_SEG_CLASSES, hw, hw, "cross_entropy", "miou", False),
        TaskSpec("depth", "dense", 1, hw, hw, "l1", "abs_err", True),
        TaskSpec("normals", "dense", 3, hw, hw, "cosine_normals", "mean_angle_err", True),
    ]

    samples = []
    for i in range(n_images):
        rng = rng_for(seed, "dense", i)
        img, seg, depth, normals = _render_dense_image(rng, hw)
        samples.append(
            LabeledSample(img, {"seg": seg, "depth": depth, "normals": normals})
        )

    n_tr, n_va, n_te = _split_sizes(n_images)
    splits = {
        "train": samples[:n_tr],
        "val": samples[n_tr : n_tr + n_va],
        "test": samples[n_tr + n_va :],
    }
    return DatasetSuite("mtl", tasks, splits, seed, meta={"hw": hw, "n_images": n_images})


# ---------------------------------------------------------------------------
# domain suite: glyph classes rendered in per-domain styles
# ---------------------------------------------------------------------------


def _glyph_segments(seed: int, global_class: int):
    """Stroke-segment geometry for one class, shared by all rendering styles."""
    rng = rng_for(seed, "class", global_class)
    n = int(rng.integers(3, 6))
    pts = rng.uniform(0.2, 0.8, size=(n + 1, 2))
    segs = np.stack([pts[:-1, 0], pts[:-1, 1], pts[1:, 0], pts[1:, 1]], axis=1)
    return segs  # (n, 4) rows of (x1, y1, x2, y2)


def _stroke_mask(X, Y, segs, width):
    """Coverage mask of a polyline: distance to nearest segment under width."""
    d2min = np.full(X.shape, np.inf)
    for x1, y1, x2, y2 in segs:
        vx, vy = x2 - x1, y2 - y1
        lens2 = vx * vx + vy * vy
        if lens2 < 1e-12:
            t = np.zeros_like(X)
        else:
            t = np.clip(((X - x1) * vx + (Y - y1) * vy) / lens2, 0.0, 1.0)
        px, py = x1 + t * vx, y1 + t * vy
        d2 = (X - px) ** 2 + (Y - py) ** 2
        d2min = np.minimum(d2min, d2)
    return (d2min <= width * width).astype(np.float64)


_DOMAIN_FG = np.array(
    [
        [0.95, 0.90, 0.80],
        [0.90, 0.45, 0.25],
        [0.30, 0.80, 0.85],
        [0.25, 0.30, 0.35],
        [0.95, 0.85, 0.30],
        [0.60, 0.90, 0.40],
    ]
)
_DOMAIN_BG = np.array(
    [
        [0.10, 0.12, 0.18],
        [0.15, 0.20, 0.30],
        [0.92, 0.90, 0.85],
        [0.80, 0.78, 0.70],
        [0.20, 0.10, 0.25],
        [0.12, 0.25, 0.20],
    ]
)


def _render_domain_image(rng: np.random.Generator, seed: int, domain: int, global_class: int, hw: int):
    """One sample of one class in the domain's visual style."""
    xs = (np.arange(hw) + 0.5) / hw
    X, Y = np.meshgrid(xs, xs, indexing="xy")

    segs = _glyph_segments(seed, global_class).copy()
    # instance jitter: rotate, scale, translate around the glyph center
    ang = rng.uniform(-0.45, 0.45)
    scale = rng.uniform(0.85, 1.15)
    shift = rng.uniform(-0.08, 0.08, size=2)
    ca, sa = np.cos(ang), np.sin(ang)
    for cols in ((0, 1), (2, 3)):
        px = segs[:, cols[0]] - 0.5
        py = segs[:, cols[1]] - 0.5
        segs[:, cols[0]] = 0.5 + scale * (ca * px - sa * py) + shift[0]
        segs[:, cols[1]] = 0.5 + scale * (sa * px + ca * py) + shift[1]

    style = domain % 5
    width = rng.uniform(0.035, 0.05)
    fg = _DOMAIN_FG[domain % len(_DOMAIN_FG)]
    bg = _DOMAIN_BG[domain % len(_DOMAIN_BG)]

    if style == 1:
        # filled blobs at segment endpoints instead of strokes
        ends = np.concatenate([segs[:, :2], segs[:, 2:]], axis=0)
        d2 = np.full(X.shape, np.inf)
        for ex, ey in ends:
            d2 = np.minimum(d2, (X - ex) ** 2 + (Y - ey) ** 2)
        mask = (d2 <= (2.2 * width) ** 2).astype(np.float64)
    else:
        mask = _stroke_mask(X, Y, segs, width)

    if style == 2:
        cells = (np.floor(X * 4) + np.floor(Y * 4)) % 2
        backdrop = bg[:, None, None] * (0.75 + 0.25 * cells)[None]
    elif style == 3:
        r = np.sqrt((X - 0.5) ** 2 + (Y - 0.5) ** 2)
        rings = 0.5 + 0.5 * np.sin(2 * np.pi * r / 0.12)
        backdrop = bg[:, None, None] * (0.7 + 0.3 * rings)[None]
    elif style == 4:
        tex = 0.5 + 0.5 * np.sin(2 * np.pi * (3.0 * X + 1.5 * Y))
        backdrop = bg[:, None, None] * (0.6 + 0.4 * tex)[None]
        mask = 1.0 - mask  # glyph appears as a gap in the texture
    else:
        backdrop = np.broadcast_to(bg[:, None, None], (3, hw, hw)).copy()

    jitter = 1.0 + rng.uniform(-0.08, 0.08, size=3)
    img = backdrop * (1.0 - mask[None]) + (fg * jitter)[:, None, None] * mask[None]
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_domain_suite(
    seed: int, n_domains: int, n_classes: int, n_per_class: int, hw: int = 32
) -> DatasetSuite:
    """Multi-domain classification suite with one withheld domain.

    Domains render disjoint class sets: the global label of local class k in
    domain d is d * n_classes + k, so label sets never intersect. Decoders use
    local classes, recovered as label % n_classes.

    The suite contains n_domains training domains plus one extra domain that
    has no TaskSpec and appears only in the meta_test_classes split. A few
    classes of each training domain are also held out into that split for
    seen-domain few-shot evaluation.
    """
    if n_domains < 2:
        raise ConfigurationError(f"n_domains must be >= 2, got {n_domains}")
    if n_classes < 4:
        raise ConfigurationError(f"n_classes must be >= 4, got {n_classes}")
    if n_per_class < 1:
        raise ConfigurationError(f"n_per_class must be >= 1, got {n_per_class}")
    if not (16 <= hw <= 128):
        raise ConfigurationError(f"hw must be in 16..128, got {hw}")

    tasks = [
        TaskSpec(f"d{d}", "classification", n_classes, 1, 1, "cross_entropy", "accuracy", False)
        for d in range(n_domains)
    ]

    n_meta = max(2, min(5, n_classes // 2))
    splits = {"train": [], "val": [], "test": [], "meta_test_classes": []}

    for d in range(n_domains + 1):
        tid = f"d{d}"
        withheld = d == n_domains
        if withheld:
            meta_locals = set(range(n_classes))
        else:
            hold_rng = rng_for(seed, "meta", d)
            meta_locals = set(hold_rng.choice(n_classes, size=n_meta, replace=False).tolist())
        for k in range(n_classes):
            g = d * n_classes + k
            imgs = []
            for i in range(n_per_class):
                rng = rng_for(seed, "mdl", d, k, i)
                imgs.append(_render_domain_image(rng, seed, d, g, hw))
            class_samples = [
                LabeledSample(img, {tid: np.int64(g)}) for img in imgs
            ]
            if k in meta_locals:
                splits["meta_test_classes"].extend(class_samples)
            else:
                n_tr, n_va, n_te = _split_sizes(n_per_class)
                splits["train"].extend(class_samples[:n_tr])
                splits["val"].extend(class_samples[n_tr : n_tr + n_va])
                splits["test"].extend(class_samples[n_tr + n_va :])

    return DatasetSuite(
        "mdl",
        tasks,
        splits,
        seed,
        meta={
            "hw": hw,
            "n_domains": n_domains,
            "n_classes": n_classes,
            "n_per_class": n_per_class,
            "withheld_domain": f"d{n_domains}",
        },
    )


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Stacked arrays for one optimization step.

    `index[tid]` lists the rows of `images` that belong to task tid; in mtl
    mode that is every row for every task, in mdl mode the domain's quota.
    """

    images: np.ndarray  # (B, 3, H, W)
    labels: dict  # task id -> stacked label array
    index: dict  # task id -> (n_t,) int array of rows


def _stack_labels(task: TaskSpec, samples) -> np.ndarray:
    arrs = [s.labels[task.id] for s in samples]
    if task.loss == "cross_entropy" and task.kind == "classification":
        return np.asarray(arrs, dtype=np.int64)
    return np.stack([np.asarray(a) for a in arrs])


def domain_quotas(
    suite: DatasetSuite, batch_size: int, anchor: Optional[str] = None, anchor_share: float = 0.5
) -> dict:
    """Per-domain sample counts for one mdl batch.

    Default splits the batch equally (remainder to the first domains in task
    order). With an anchor, that domain takes round(batch_size * anchor_share)
    and the rest is split equally among the other domains.
    """
    tids = suite.task_ids
    if batch_size < len(tids):
        raise ConfigurationError(
            f"batch_size {batch_size} < number of domains {len(tids)}"
        )
    if anchor is None:
        base, rem = divmod(batch_size, len(tids))
        return {tid: base + (1 if i < rem else 0) for i, tid in enumerate(tids)}
    if anchor not in tids:
        raise ConfigurationError(f"anchor {anchor!r} is not a training domain")
    if not (0.0 < anchor_share < 1.0):
        raise ConfigurationError(f"anchor_share must be in (0, 1), got {anchor_share}")
    q_anchor = round(batch_size * anchor_share)
    others = [t for t in tids if t != anchor]
    if q_anchor < 1 or batch_size - q_anchor < len(others):
        raise ConfigurationError("anchor share leaves too few samples for other domains")
    base, rem = divmod(batch_size - q_anchor, len(others))
    quotas = {anchor: q_anchor}
    for i, tid in enumerate(others):
        quotas[tid] = base + (1 if i < rem else 0)
    return quotas


def _split_or_raise(suite, split):
    samples = suite.splits.get(split, [])
    if not samples:
        raise IterationError(f"split {split!r} is empty; nothing to iterate")
    return samples


def batches_per_epoch(
    suite: DatasetSuite,
    batch_size: int,
    split: str = "train",
    anchor: Optional[str] = None,
    anchor_share: float = 0.5,
) -> int:
    samples = _split_or_raise(suite, split)
    if suite.mode == "mtl":
        n = len(samples) // batch_size
    else:
        quotas = domain_quotas(suite, batch_size, anchor, anchor_share)
        per_dom = _group_by_domain(suite, samples)
        n = min(len(per_dom[tid]) // q for tid, q in quotas.items() if q > 0)
    if n < 1:
        raise IterationError(
            f"split {split!r} too small for batch_size {batch_size}"
        )
    return n


def _group_by_domain(suite, samples):
    per_dom = {tid: [] for tid in suite.task_ids}
    for s in samples:
        (tid,) = s.task_ids
        if tid in per_dom:
            per_dom[tid].append(s)
    for tid, group in per_dom.items():
        if not group:
            raise IterationError(f"domain {tid!r} has no samples in this split")
    return per_dom


def epoch_batches(
    suite: DatasetSuite,
    batch_size: int,
    seed: int,
    epoch: int,
    split: str = "train",
    anchor: Optional[str] = None,
    anchor_share: float = 0.5,
) -> list:
    """All batches of one epoch, in deterministic shuffled order.

    The order is a pure function of (seed, split, epoch), which makes exact
    mid-run resume trivial: re-enumerate the epoch and skip consumed batches.
    """
    samples = _split_or_raise(suite, split)
    rng = rng_for(seed, "batches", split, epoch)
    out = []
    if suite.mode == "mtl":
        order = rng.permutation(len(samples))
        n_batches = len(samples) // batch_size
        if n_batches < 1:
            raise IterationError(f"split {split!r} too small for batch_size {batch_size}")
        for b in range(n_batches):
            rows = order[b * batch_size : (b + 1) * batch_size]
            chunk = [samples[i] for i in rows]
            images = np.stack([s.image for s in chunk])
            labels = {t.id: _stack_labels(t, chunk) for t in suite.tasks}
            index = {t.id: np.arange(batch_size) for t in suite.tasks}
            out.append(Batch(images, labels, index))
        return out

    quotas = domain_quotas(suite, batch_size, anchor, anchor_share)
    per_dom = _group_by_domain(suite, samples)
    orders = {tid: rng.permutation(len(per_dom[tid])) for tid in suite.task_ids}
    n_batches = min(len(per_dom[tid]) // q for tid, q in quotas.items() if q > 0)
    if n_batches < 1:
        raise IterationError(f"split {split!r} too small for per-domain quotas {quotas}")
    for b in range(n_batches):
        images, labels, index = [], {}, {}
        row = 0
        for tid in suite.task_ids:
            q = quotas[tid]
            picks = orders[tid][b * q : (b + 1) * q]
            chunk = [per_dom[tid][i] for i in picks]
            images.extend(s.image for s in chunk)
            labels[tid] = _stack_labels(suite.task(tid), chunk)
            index[tid] = np.arange(row, row + q)
            row += q
        out.append(Batch(np.stack(images), labels, index))
    return out


def make_batches(
    suite: DatasetSuite,
    batch_size: int,
    seed: int,
    split: str = "train",
    anchor: Optional[str] = None,
    anchor_share: float = 0.5,
    epochs: Optional[int] = None,
) -> Iterator[Batch]:
    """Deterministic batch stream; loops over reshuffled epochs.

    With epochs=None the stream is endless (training controls its own
    iteration budget). Single-consumer iterator.
    """
    e = 0
    while epochs is None or e < epochs:
        yield from epoch_batches(suite, batch_size, seed, e, split, anchor, anchor_share)
        e += 1


# ---------------------------------------------------------------------------
# export / load
# ---------------------------------------------------------------------------

_LABEL_DTYPES = {"cross_entropy": "<i8", "l1": "<f4", "cosine_normals": "<f4"}


def _all_samples(suite: DatasetSuite):
    """Samples flattened in canonical split order, plus per-split index lists."""
    flat, split_ids = [], {}
    for name in SPLIT_ORDER:
        if name not in suite.splits:
            continue
        ids = []
        for s in suite.splits[name]:
            ids.append(len(flat))
            flat.append(s)
        split_ids[name] = ids
    return flat, split_ids


def export_suite(suite: DatasetSuite, out_dir) -> Path:
    """Write manifest.json plus raw little-endian blobs; returns the directory.

    Blob layout: one images file for all samples, one label file per task id
    (with the owning sample rows listed in the manifest, since mdl labels
    cover only a subset of samples).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    flat, split_ids = _all_samples(suite)
    if not flat:
        raise ConfigurationError("cannot export an empty suite")

    images = np.stack([s.image for s in flat]).astype("<f4")
    (out / "images.bin").write_bytes(images.tobytes())

    label_ids = sorted({tid for s in flat for tid in s.labels})
    arrays = {
        "images": {"file": "images.bin", "dtype": "<f4", "shape": list(images.shape)}
    }
    for tid in label_ids:
        rows = [i for i, s in enumerate(flat) if tid in s.labels]
        loss = suite.task(tid).loss if tid in suite.task_ids else "cross_entropy"
        dt = _LABEL_DTYPES[loss]
        stacked = np.stack([np.asarray(flat[i].labels[tid]) for i in rows]).astype(dt)
        fname = f"labels_{tid}.bin"
        (out / fname).write_bytes(stacked.tobytes())
        arrays[tid] = {
            "file": fname,
            "dtype": dt,
            "shape": list(stacked.shape),
            "rows": rows,
        }

    manifest = {
        "format_version": 1,
        "mode": suite.mode,
        "seed": int(suite.seed),
        "meta": suite.meta,
        "tasks": [t.to_dict() for t in suite.tasks],
        "splits": split_ids,
        "arrays": arrays,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_suite(suite_dir) -> DatasetSuite:
    """Inverse of export_suite. Raises IntegrityError on malformed artifacts."""
    root = Path(suite_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise IntegrityError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise IntegrityError(f"manifest.json is not valid JSON: {e}") from e
    if manifest.get("format_version") != 1:
        raise IntegrityError(
            f"unsupported suite format_version: {manifest.get('format_version')!r}"
        )

    def read_blob(entry):
        bpath = root / entry["file"]
        if not bpath.exists():
            raise IntegrityError(f"missing blob {entry['file']} under {root}")
        data = bpath.read_bytes()
        arr = np.frombuffer(data, dtype=np.dtype(entry["dtype"]))
        expect = int(np.prod(entry["shape"]))
        if arr.size != expect:
            raise IntegrityError(
                f"blob {entry['file']} has {arr.size} elements, expected {expect}"
            )
        return arr.reshape(entry["shape"]).copy()

    arrays = manifest["arrays"]
    images = read_blob(arrays["images"]).astype(np.float32)
    n = images.shape[0]
    labels_per_sample = [dict() for _ in range(n)]
    for tid, entry in arrays.items():
        if tid == "images":
            continue
        stacked = read_blob(entry)
        for j, row in enumerate(entry["rows"]):
            val = stacked[j]
            if val.ndim == 0 and val.dtype.kind == "i":
                val = np.int64(val)
            labels_per_sample[row][tid] = val

    flat = [LabeledSample(images[i], labels_per_sample[i]) for i in range(n)]
    tasks = [TaskSpec.from_dict(d) for d in manifest["tasks"]]
    splits = {
        name: [flat[i] for i in ids] for name, ids in manifest["splits"].items()
    }
    return DatasetSuite(
        manifest["mode"], tasks, splits, manifest["seed"], meta=manifest.get("meta", {})
    )


def suite_digest(suite: DatasetSuite) -> str:
    """Stable content hash over all arrays, for determinism checks."""
    h = hashlib.blake2b(digest_size=16)
    flat, split_ids = _all_samples(suite)
    h.update(suite.mode.encode())
    h.update(json.dumps(split_ids, sort_keys=True).encode())
    for s in flat:
        h.update(np.ascontiguousarray(s.image).tobytes())
        for tid in sorted(s.labels):
            h.update(tid.encode())
            h.update(np.ascontiguousarray(s.labels[tid]).tobytes())
    return h.hexdigest()
