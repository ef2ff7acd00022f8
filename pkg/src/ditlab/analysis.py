"""Diagnostics: feature-drift matrices, a kernel two-sample quality score,
and the block-forward / wall-clock benchmark harness."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import schedule as sched
from .caching import CacheConfig


# ---------------------------------------------------------------------------
# feature drift (per block, per step)
# ---------------------------------------------------------------------------


@dataclass
class DriftMatrix:
    values: np.ndarray      # [n_blocks, S], normalized to [0, 1]
    blocks: list            # row labels
    timesteps: list         # column labels
    norm_const: float

    def __post_init__(self):
        if self.norm_const <= 0:
            raise ValueError("normalization constant must be positive")


@dataclass
class DriftReport:
    baseline_mean: float
    cached_mean: float
    ratio: float
    degenerate: bool


def _check_taps(taps) -> tuple:
    if len(taps) < 2:
        raise ValueError("need taps from at least 2 steps")
    n_blocks = len(taps[0].features)
    if any(len(t.features) != n_blocks for t in taps):
        raise ValueError("tap block counts differ across steps")
    return len(taps), n_blocks


def drift_over_time(taps) -> np.ndarray:
    """Raw drift: per block, L2 distance of its features from the first
    (highest-t) step's features."""
    S, n_blocks = _check_taps(taps)
    out = np.zeros((n_blocks, S), dtype=np.float64)
    for b in range(n_blocks):
        ref = taps[0].features[b].astype(np.float64)
        for k in range(S):
            out[b, k] = np.linalg.norm(taps[k].features[b].astype(np.float64) - ref)
    return out


def drift_over_blocks(taps) -> np.ndarray:
    """Raw drift: per step, L2 distance of each block's features from the
    first block's features at that step."""
    S, n_blocks = _check_taps(taps)
    out = np.zeros((n_blocks, S), dtype=np.float64)
    for k in range(S):
        ref = taps[k].features[0].astype(np.float64)
        for b in range(n_blocks):
            out[b, k] = np.linalg.norm(taps[k].features[b].astype(np.float64) - ref)
    return out


def normalize_pair(a: np.ndarray, b: np.ndarray, timesteps) -> tuple:
    """Normalize two paired raw drift matrices by their joint maximum."""
    mx = float(max(a.max(), b.max()))
    if mx <= 0:
        raise ValueError("both drift matrices are all-zero")
    blocks = list(range(a.shape[0]))
    ts = list(timesteps)
    return (
        DriftMatrix(values=a / mx, blocks=blocks, timesteps=ts, norm_const=mx),
        DriftMatrix(values=b / mx, blocks=blocks, timesteps=ts, norm_const=mx),
    )


def compare_drift(baseline_taps, cached_taps, block_subset=None, step_subset=None) -> DriftReport:
    """Mean normalized drift-over-time for paired runs, restricted to the
    given blocks/steps (defaults: every block, every step past the first),
    and their cached/baseline ratio."""
    if len(baseline_taps) != len(cached_taps):
        raise ValueError("paired runs must have the same plan length")
    raw_b = drift_over_time(baseline_taps)
    raw_c = drift_over_time(cached_taps)
    rows = sorted(block_subset) if block_subset else list(range(raw_b.shape[0]))
    cols = sorted(step_subset) if step_subset else list(range(1, raw_b.shape[1]))
    mx = float(max(raw_b.max(), raw_c.max()))
    if mx <= 0:
        return DriftReport(0.0, 0.0, float("nan"), degenerate=True)
    mean_b = float(raw_b[np.ix_(rows, cols)].mean()) / mx
    mean_c = float(raw_c[np.ix_(rows, cols)].mean()) / mx
    if mean_b == 0.0:
        return DriftReport(mean_b, mean_c, float("nan"), degenerate=True)
    return DriftReport(mean_b, mean_c, mean_c / mean_b, degenerate=False)


def drift_csv(matrix: DriftMatrix) -> str:
    """Header row = timesteps, first column = block index."""
    lines = ["block," + ",".join(repr(float(t)) for t in matrix.timesteps)]
    for b, row in zip(matrix.blocks, matrix.values):
        lines.append(f"{b}," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def heatmap_pgm(matrix: DriftMatrix) -> bytes:
    """Grayscale PGM of a normalized drift matrix, values scaled by 255."""
    v = np.clip(matrix.values, 0.0, 1.0)
    payload = np.round(v * 255.0).astype(np.uint8)
    h, w = payload.shape
    return b"P5\n%d %d\n255\n" % (w, h) + payload.tobytes()


# ---------------------------------------------------------------------------
# toy sample quality
# ---------------------------------------------------------------------------


@dataclass
class QualityReport:
    mmd: float
    per_class_mean_err: float
    n_samples: int


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xx = (x * x).sum(axis=1)[:, None]
    yy = (y * y).sum(axis=1)[None, :]
    return np.maximum(xx + yy - 2.0 * (x @ y.T), 0.0)


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    """Median pairwise distance over the pooled set; 1.0 if degenerate."""
    pooled = np.concatenate([x, y], axis=0)
    d = np.sqrt(_sq_dists(pooled, pooled))
    iu = np.triu_indices(len(pooled), k=1)
    med = float(np.median(d[iu]))
    return med if med > 0 else 1.0


def rbf_mmd2(x: np.ndarray, y: np.ndarray, bandwidth: float | None = None) -> float:
    """Biased (V-statistic) squared MMD with an RBF kernel; always >= 0."""
    x = x.reshape(len(x), -1).astype(np.float64)
    y = y.reshape(len(y), -1).astype(np.float64)
    if bandwidth is None:
        bandwidth = median_bandwidth(x, y)
    gamma = 1.0 / (2.0 * bandwidth * bandwidth)
    kxx = np.exp(-gamma * _sq_dists(x, x)).mean()
    kyy = np.exp(-gamma * _sq_dists(y, y)).mean()
    kxy = np.exp(-gamma * _sq_dists(x, y)).mean()
    return float(max(kxx + kyy - 2.0 * kxy, 0.0))


def toy_quality(samples: np.ndarray, sample_labels, reference: np.ndarray,
                reference_labels, min_samples: int = 100) -> QualityReport:
    """MMD between sample and reference pixel vectors plus the mean L2 error
    between per-class mean images."""
    if len(samples) < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {len(samples)}")
    if len(reference) == 0:
        raise ValueError("empty reference set")
    sample_labels = np.asarray(sample_labels)
    reference_labels = np.asarray(reference_labels)
    mmd = rbf_mmd2(samples, reference)
    errs = []
    for cls in np.unique(reference_labels):
        ours = samples[sample_labels == cls]
        theirs = reference[reference_labels == cls]
        if len(ours) == 0:
            raise ValueError(f"no samples for class {cls}")
        diff = ours.mean(axis=0).astype(np.float64) - theirs.mean(axis=0).astype(np.float64)
        errs.append(np.linalg.norm(diff))
    return QualityReport(mmd=mmd, per_class_mean_err=float(np.mean(errs)),
                         n_samples=len(samples))


# ---------------------------------------------------------------------------
# benchmarking
# ---------------------------------------------------------------------------


@dataclass
class BenchEntry:
    kind: str
    steps: int
    preset: str = "all"
    tpost_mode: str = "rescaled"
    orientation: str = "n_over_m"
    loop: tuple | None = None          # (b, e) for ilf
    cache_location: str = "inner"
    cache_count: int = 0
    refresh_period: int = 2

    def label(self) -> str:
        bits = [f"S={self.steps}"]
        if self.kind == "ilf":
            bits.append(f"preset={self.preset}")
            bits.append(f"loop={self.loop[0]}-{self.loop[1]}")
        if self.kind == "cached":
            bits.append(f"cache={self.cache_location}:{self.cache_count}")
            bits.append(f"p={self.refresh_period}")
        return ";".join(bits)


@dataclass
class BenchRow:
    kind: str
    config: str
    block_forwards: int
    wall_ms: float
    speedup: float
    seed: int


BENCH_COLUMNS = ("kind", "config", "block_forwards", "wall_ms", "speedup", "seed")


def _mock_cost(entry: BenchEntry, n: int) -> int:
    if entry.kind == "baseline":
        return sched.baseline_block_cost(n, entry.steps)
    if entry.kind == "ilf":
        if entry.loop is None:
            raise ValueError("ilf bench entry needs a loop")
        flags = sched._preset_flags(entry.preset, entry.steps)
        m = entry.loop[1] - entry.loop[0] + 1
        return sched.ilf_block_cost(n, entry.steps, m, sum(flags))
    if entry.kind == "cached":
        return sched.cached_block_cost(n, entry.steps, entry.cache_count,
                                       entry.refresh_period)
    raise ValueError(f"unknown kind {entry.kind!r}")


def bench(entries, model=None, ns=None, fs=None, class_id=0, seed: int = 0,
          n_samples: int = 1, mock_n: int | None = None, repeats: int = 1) -> list:
    """Cost table over a grid of sampling configurations.

    With mock_n set, block-forward counts come from the closed forms at that
    model width and nothing is executed (wall_ms is 0). Otherwise each entry
    actually runs, sequentially, and wall_ms is the best of `repeats` runs.
    The speedup column is exact: baseline count / entry count.
    """
    rows = []
    counts, walls = [], []
    for entry in entries:
        if mock_n is not None:
            counts.append(_mock_cost(entry, mock_n))
            walls.append(0.0)
            continue
        if model is None or ns is None:
            raise ValueError("real bench runs need a model and a schedule")
        cache_cfg = None
        if entry.kind == "ilf":
            if entry.loop is None:
                raise ValueError("ilf bench entry needs a loop")
            plan = sched.make_plan(entry.steps, model.cfg.T, entry.tpost_mode,
                                   entry.preset, entry.loop, model.cfg.n_blocks,
                                   entry.orientation)
        else:
            plan = sched.make_plain_plan(entry.steps, model.cfg.T, model.cfg.n_blocks)
            if entry.kind == "cached":
                cache_cfg = CacheConfig.from_preset(
                    entry.cache_location, entry.cache_count,
                    model.cfg.n_blocks, entry.refresh_period)
        best = None
        count = None
        for _ in range(max(repeats, 1)):
            res = sched.sample(entry.kind, model, ns, plan, class_id, seed,
                               fs=fs if entry.kind == "ilf" else None,
                               cache_cfg=cache_cfg, n_samples=n_samples)
            count = res.block_forwards
            best = res.wall_ms if best is None else min(best, res.wall_ms)
        counts.append(count)
        walls.append(best)

    ref = 0
    for i, entry in enumerate(entries):
        if entry.kind == "baseline":
            ref = i
            break
    base_count = counts[ref]
    for entry, count, wall in zip(entries, counts, walls):
        rows.append(BenchRow(kind=entry.kind, config=entry.label(),
                             block_forwards=count, wall_ms=wall,
                             speedup=base_count / count, seed=seed))
    return rows
