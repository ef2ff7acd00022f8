"""Training-free caching baseline.

On refresh steps the cached blocks run normally and their gated attention and
MLP branch outputs are stored; on every other step those stored branch outputs
are added straight onto the fresh hidden states, costing zero block forwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .dit import DiT, FeatureTap

LOCATIONS = ("first", "last", "outer", "inner", "alternating")


def location_preset(preset: str, c: int, n: int) -> tuple:
    """Pick c of n block indices by placement name."""
    if not (0 <= c <= n):
        raise ValueError(f"need 0 <= c <= n, got c={c}, n={n}")
    if preset == "first":
        idx = range(c)
    elif preset == "last":
        idx = range(n - c, n)
    elif preset == "inner":
        off = (n - c) // 2
        idx = range(off, off + c)
    elif preset == "outer":
        front = c - c // 2
        idx = list(range(front)) + list(range(n - c // 2, n))
    elif preset == "alternating":
        idx = (j * n // c for j in range(c)) if c else ()
    else:
        raise ValueError(f"unknown cache location {preset!r}")
    return tuple(idx)


@dataclass(frozen=True)
class CacheConfig:
    blocks: tuple          # block indices whose branches get cached
    refresh_period: int    # recompute when step_index % p == 0

    def __post_init__(self):
        if self.refresh_period < 1:
            raise ValueError("refresh_period must be >= 1")
        if len(set(self.blocks)) != len(self.blocks):
            raise ValueError("duplicate cached block indices")
        if any(b < 0 for b in self.blocks):
            raise ValueError("negative block index")

    @classmethod
    def from_preset(cls, location: str, count: int, n_blocks: int,
                    refresh_period: int) -> "CacheConfig":
        return cls(blocks=location_preset(location, count, n_blocks),
                   refresh_period=refresh_period)


class CacheStore:
    """Stored branch outputs for one sampling run."""

    def __init__(self):
        self._store = {}

    def put(self, idx: int, attn: np.ndarray, mlp: np.ndarray):
        self._store[idx] = (attn, mlp)

    def get(self, idx: int):
        if idx not in self._store:
            raise ValueError(f"cache read for block {idx} before any refresh")
        return self._store[idx]

    def valid(self, idx: int) -> bool:
        return idx in self._store


def cached_run_block(model: DiT, idx: int, h: Tensor, cond: Tensor,
                     store: CacheStore, refresh: bool):
    """One block under caching. Returns (output, cost) with cost 1 on a
    refresh (full run, branches captured) and 0 on a hit."""
    if refresh:
        out, attn, mlp = model.run_block(idx, h, cond, return_branches=True)
        store.put(idx, attn.data.copy(), mlp.data.copy())
        return out, 1
    attn, mlp = store.get(idx)
    # same association order as the real block: (h + attn) + mlp
    return (h + Tensor(attn)) + Tensor(mlp), 0


def cached_forward(model: DiT, x, t: float, class_id, cfg: CacheConfig,
                   store: CacheStore, refresh: bool, tap: bool = False):
    """Full model pass with caching applied to the configured blocks."""
    n = model.cfg.n_blocks
    if any(b >= n for b in cfg.blocks):
        raise ValueError(f"cached block index out of range for {n} blocks")
    cached = set(cfg.blocks)
    h = model.patchify(x)
    cond = model.embed_condition(t, class_id)
    feats = [] if tap else None
    count = 0
    for i in range(n):
        if i in cached:
            h, c = cached_run_block(model, i, h, cond, store, refresh)
            count += c
        else:
            h = model.run_block(i, h, cond)
            count += 1
        if tap:
            feats.append(h.data.copy())
    eps = model.final_layer(h, cond)
    if tap:
        return eps, count, FeatureTap(feats, model.cfg.tokens)
    return eps, count


def cached_sample(model, ns, plan, cache_cfg: CacheConfig, class_id, seed: int,
                  n_samples: int = 1, tap: bool = False):
    from .schedule import sample

    return sample("cached", model, ns, plan, class_id, seed,
                  cache_cfg=cache_cfg, n_samples=n_samples, tap=tap)
