"""Noise schedule, DDIM stepping, post-feedback time rules, and sampling plans.

Scheduler scalars are kept in float64; only image/feature payloads are f32.
The denoising update is always keyed on the plan's own timestep t, never on
the post-feedback condition time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .dit import DiT
from .feedback import FeedbackState, ilf_forward

TPOST_MODES = ("uniform", "rescaled", "annealed", "identity")
ORIENTATIONS = ("n_over_m", "m_over_n")
PRESETS = ("all", "skip_inner", "first_only", "last_only", "outer_only", "alternating")
KINDS = ("baseline", "ilf", "cached")

ANNEAL_FLOOR = 10.0


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------


@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray       # [T+1], beta[0] = 0 sentinel
    alpha: np.ndarray      # [T+1]
    alpha_bar: np.ndarray  # [T+1], alpha_bar[0] = 1

    def alpha_bar_at(self, t: float) -> float:
        """alpha_bar extended to real t by linear interpolation."""
        if not (0.0 <= t <= self.T):
            raise ValueError(f"t={t} outside [0, {self.T}]")
        return float(np.interp(t, np.arange(self.T + 1), self.alpha_bar))

    def ddim_sigma(self, t: float, t_next: float, eta: float) -> float:
        ab_t = self.alpha_bar_at(t)
        ab_n = self.alpha_bar_at(t_next)
        return eta * np.sqrt((1 - ab_n) / (1 - ab_t)) * np.sqrt(1 - ab_t / ab_n)


def make_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule over T steps."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"bad beta range ({beta_min}, {beta_max})")
    beta = np.zeros(T + 1, dtype=np.float64)
    if T == 1:
        beta[1] = beta_min
    else:
        beta[1:] = np.linspace(beta_min, beta_max, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def noise_sample(x0: np.ndarray, t: float, eps: np.ndarray, ns: NoiseSchedule) -> np.ndarray:
    """Forward-noise x0 to step t with the given draw of eps."""
    ab = ns.alpha_bar_at(t)
    out = float(np.sqrt(ab)) * x0 + float(np.sqrt(1.0 - ab)) * eps
    return out.astype(np.float32)


def spacing(S: int, T: int) -> list:
    """Trailing-uniform descending timesteps: t_k = T (S - k + 1) / S."""
    if not (1 <= S <= T):
        raise ValueError(f"need 1 <= S <= T, got S={S}, T={T}")
    return [T * (S - k + 1) / S for k in range(1, S + 1)]


def ddim_step(x_t: np.ndarray, eps_hat: np.ndarray, t: float, t_next: float,
              ns: NoiseSchedule, eta: float = 0.0, rng=None) -> np.ndarray:
    """Deterministic DDIM update from t to t_next (eta=0)."""
    if not (t > t_next >= 0):
        raise ValueError(f"need t > t_next >= 0, got {t}, {t_next}")
    ab_t = ns.alpha_bar_at(t)
    ab_n = ns.alpha_bar_at(t_next)
    if ab_t <= 0.0:
        raise ValueError("alpha_bar(t) vanished")
    x0_pred = (x_t - float(np.sqrt(1.0 - ab_t)) * eps_hat) / float(np.sqrt(ab_t))
    if eta == 0.0:
        out = float(np.sqrt(ab_n)) * x0_pred + float(np.sqrt(1.0 - ab_n)) * eps_hat
    else:
        if rng is None:
            raise ValueError("eta > 0 needs an rng")
        sigma = ns.ddim_sigma(t, t_next, eta)
        dir_coef = float(np.sqrt(max(1.0 - ab_n - sigma**2, 0.0)))
        noise = rng.standard_normal(x_t.shape).astype(np.float32)
        out = float(np.sqrt(ab_n)) * x0_pred + dir_coef * eps_hat + float(sigma) * noise
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# post-feedback time rules
# ---------------------------------------------------------------------------


def t_post_uniform(t: float, i: float) -> float:
    if i < 0:
        raise ValueError("step gap must be >= 0")
    return t - i / 2.0


def t_post_rescaled(t: float, i: float, m: int, n: int) -> float:
    """Shift t by the step gap weighted by the loop's share of the depth."""
    if not (0 < m <= n):
        raise ValueError(f"need 0 < m <= n, got m={m}, n={n}")
    return t - i * (m / n)


def t_post_annealed(t: float, i: float, m: int, n: int,
                    orientation: str = "n_over_m", t_ref: float = 1000.0) -> float:
    """Annealed shift: the subtracted amount shrinks as t falls, floored at 10.

    The printed ratio is n/m; orientation="m_over_n" flips it. The t/1000
    factor generalizes to t/t_ref for schedules with T != 1000.
    """
    if not (0 < m <= n):
        raise ValueError(f"need 0 < m <= n, got m={m}, n={n}")
    if orientation not in ORIENTATIONS:
        raise ValueError(f"unknown orientation {orientation!r}")
    ratio = (n / m) if orientation == "n_over_m" else (m / n)
    shift = max(i * ratio * (t / t_ref), ANNEAL_FLOOR)
    return max(t - shift, 0.0)


# ---------------------------------------------------------------------------
# inference plans
# ---------------------------------------------------------------------------


def _preset_flags(preset: str, S: int) -> list:
    """Which steps run feedback. Presets name the feedback placement; the
    four-step placements keep cost comparable across presets."""
    if preset == "all":
        return [True] * S
    if preset == "alternating":
        if S < 2:
            raise ValueError("alternating needs S >= 2")
        return [k % 2 == 0 for k in range(S)]
    if S < 5:
        raise ValueError(f"preset {preset!r} needs S >= 5, got {S}")
    if preset in ("skip_inner", "outer_only"):
        keep = {0, 1, S - 2, S - 1}
    elif preset == "first_only":
        keep = {0, 1, 2, 3}
    elif preset == "last_only":
        keep = {S - 4, S - 3, S - 2, S - 1}
    else:
        raise ValueError(f"unknown preset {preset!r}")
    return [k in keep for k in range(S)]


@dataclass(frozen=True)
class InferencePlan:
    steps: tuple          # descending real timesteps t_1 > ... > t_S
    feedback: tuple       # per-step bool
    tpost_mode: str
    orientation: str
    loop_start: int
    loop_end: int
    n_blocks: int
    T: int

    def __post_init__(self):
        if len(self.steps) != len(self.feedback):
            raise ValueError("steps and feedback flags must align")
        if any(not (0 < t <= self.T) for t in self.steps):
            raise ValueError("plan steps must lie in (0, T]")
        if list(self.steps) != sorted(set(self.steps), reverse=True):
            raise ValueError("plan steps must be strictly descending")
        if self.tpost_mode not in TPOST_MODES:
            raise ValueError(f"unknown tpost_mode {self.tpost_mode!r}")
        if self.orientation not in ORIENTATIONS:
            raise ValueError(f"unknown orientation {self.orientation!r}")
        if not (0 <= self.loop_start <= self.loop_end < self.n_blocks):
            raise ValueError("bad loop bounds")

    @property
    def S(self) -> int:
        return len(self.steps)

    @property
    def m(self) -> int:
        return self.loop_end - self.loop_start + 1

    @property
    def feedback_steps(self) -> int:
        return sum(self.feedback)

    def gap(self, k: int) -> float:
        """Gap to the next scheduled step; the final step's gap reaches 0."""
        nxt = self.steps[k + 1] if k + 1 < self.S else 0.0
        return self.steps[k] - nxt

    def t_post(self, k: int) -> float:
        t = self.steps[k]
        i = self.gap(k)
        mode = self.tpost_mode
        if mode == "annealed" and k == 0:
            mode = "rescaled"  # the first plan step always uses the rescaled rule
        if mode == "identity":
            tp = t
        elif mode == "uniform":
            tp = t_post_uniform(t, i)
        elif mode == "rescaled":
            tp = t_post_rescaled(t, i, self.m, self.n_blocks)
        else:
            tp = t_post_annealed(t, i, self.m, self.n_blocks, self.orientation, float(self.T))
        return min(max(tp, 0.0), t)


def make_plan(S: int, T: int, mode: str, preset: str, loop, n_blocks: int,
              orientation: str = "n_over_m") -> InferencePlan:
    b, e = loop
    return InferencePlan(
        steps=tuple(spacing(S, T)),
        feedback=tuple(_preset_flags(preset, S)),
        tpost_mode=mode,
        orientation=orientation,
        loop_start=int(b),
        loop_end=int(e),
        n_blocks=int(n_blocks),
        T=int(T),
    )


def make_plain_plan(S: int, T: int, n_blocks: int) -> InferencePlan:
    """A feedback-free plan, as baseline and cached sampling use."""
    return InferencePlan(
        steps=tuple(spacing(S, T)),
        feedback=tuple([False] * S),
        tpost_mode="identity",
        orientation="n_over_m",
        loop_start=0,
        loop_end=0,
        n_blocks=int(n_blocks),
        T=int(T),
    )


# ---------------------------------------------------------------------------
# closed-form block-forward costs
# ---------------------------------------------------------------------------


def baseline_block_cost(n: int, S: int) -> int:
    return n * S


def ilf_block_cost(n: int, S: int, m: int, feedback_steps: int) -> int:
    return n * S + (m + 1) * feedback_steps


def refresh_count(S: int, p: int) -> int:
    """Refresh steps under 'recompute when step_index % p == 0' phasing."""
    if p < 1:
        raise ValueError("refresh period must be >= 1")
    return -(-S // p)


def cached_block_cost(n: int, S: int, n_cached: int, p: int) -> int:
    return (n - n_cached) * S + n_cached * refresh_count(S, p)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass
class SampleResult:
    images: np.ndarray          # [N, C, H, W]
    labels: list
    kind: str
    block_forwards: int         # per generated image
    wall_ms: float              # per generated image
    feedback_steps: int
    refresh_steps: int
    loop_size: int
    plan_S: int
    n_blocks: int
    seed: int
    ddim_pairs: list            # (t, t_next) actually fed to the ddim update
    taps: list | None = None    # per sample: list of FeatureTap per step

    def cost_row(self) -> dict:
        # for kind=cached, m holds the cached-block count and the
        # feedback_steps column carries the refresh-step count
        per_step = self.refresh_steps if self.kind == "cached" else self.feedback_steps
        return {
            "kind": self.kind,
            "S": self.plan_S,
            "n": self.n_blocks,
            "m": self.loop_size,
            "feedback_steps": per_step,
            "block_forwards": self.block_forwards,
            "wall_ms": self.wall_ms,
            "seed": self.seed,
        }


COST_COLUMNS = ("kind", "S", "n", "m", "feedback_steps", "block_forwards", "wall_ms", "seed")


def sample(kind: str, model: DiT, ns: NoiseSchedule, plan: InferencePlan, class_id,
           seed: int, fs: FeedbackState | None = None, cache_cfg=None,
           n_samples: int = 1, tap: bool = False, guidance_scale: float = 1.0) -> SampleResult:
    """Run one sampling configuration and account for every block forward."""
    from .caching import CacheStore, cached_forward  # local import breaks the module cycle

    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    if kind == "ilf":
        if fs is None:
            raise ValueError("kind='ilf' needs a FeedbackState")
        if (fs.loop_start, fs.loop_end) != (plan.loop_start, plan.loop_end):
            raise ValueError("plan loop bounds disagree with the FeedbackState")
    if kind == "cached":
        if cache_cfg is None:
            raise ValueError("kind='cached' needs a CacheConfig")
        if any(plan.feedback):
            raise ValueError("cached sampling takes a plan without feedback flags")
    if guidance_scale != 1.0 and kind != "baseline":
        raise ValueError("guidance is only wired for baseline sampling")
    if plan.n_blocks != model.cfg.n_blocks:
        raise ValueError("plan was built for a different block count")

    cfg = model.cfg
    shape = (cfg.channels, cfg.image_size, cfg.image_size)
    images, labels = [], []
    taps_all = [] if tap else None
    ddim_pairs = []
    per_image_blocks = None
    refresh_steps = refresh_count(plan.S, cache_cfg.refresh_period) if kind == "cached" else 0

    t0 = time.perf_counter()
    for j in range(n_samples):
        rng = np.random.default_rng([seed, j])
        label = class_id if class_id is not None else j % cfg.n_classes
        x = rng.standard_normal(shape).astype(np.float32)
        store = CacheStore() if kind == "cached" else None
        count = 0
        sample_taps = [] if tap else None
        for k in range(plan.S):
            t = plan.steps[k]
            t_next = plan.steps[k + 1] if k + 1 < plan.S else 0.0
            step_tap = None
            if kind == "ilf" and plan.feedback[k]:
                out = ilf_forward(model, fs, x, t, plan.t_post(k), label, tap=tap)
                eps, c = out[0], out[1]
                if tap:
                    step_tap = out[2]
            elif kind == "cached":
                refresh = (k % cache_cfg.refresh_period == 0)
                out = cached_forward(model, x, t, label, cache_cfg, store, refresh, tap=tap)
                eps, c = out[0], out[1]
                if tap:
                    step_tap = out[2]
            else:
                if guidance_scale != 1.0:
                    eps = model.cfg_forward(x, t, label, guidance_scale)
                    c = 2 * cfg.n_blocks
                elif tap:
                    eps, step_tap = model.forward(x, t, label, tap=True)
                    c = cfg.n_blocks
                else:
                    eps = model.forward(x, t, label)
                    c = cfg.n_blocks
            if j == 0:
                ddim_pairs.append((t, t_next))
            x = ddim_step(x, eps.data, t, t_next, ns)
            count += c
            if tap:
                sample_taps.append(step_tap)
        if per_image_blocks is None:
            per_image_blocks = count
        elif per_image_blocks != count:
            raise AssertionError("block-forward count varied across samples")
        images.append(x)
        labels.append(label)
        if tap:
            taps_all.append(sample_taps)
    wall_ms = (time.perf_counter() - t0) * 1000.0 / n_samples

    return SampleResult(
        images=np.stack(images),
        labels=labels,
        kind=kind,
        block_forwards=per_image_blocks,
        wall_ms=wall_ms,
        feedback_steps=plan.feedback_steps if kind == "ilf" else 0,
        refresh_steps=refresh_steps,
        loop_size=(plan.m if kind == "ilf" else
                   (len(cache_cfg.blocks) if kind == "cached" else 0)),
        plan_S=plan.S,
        n_blocks=cfg.n_blocks,
        seed=seed,
        ddim_pairs=ddim_pairs,
        taps=taps_all,
    )
