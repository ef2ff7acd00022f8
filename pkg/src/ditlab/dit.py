"""A small class-conditional diffusion transformer.

Patchify -> token embedding -> N adaLN-Zero transformer blocks -> final
modulated projection back to pixel space. The adaLN modulation MLPs and the
final projection are zero-initialized, so a freshly built block is exactly
the identity on tokens and a fresh model predicts zero noise. Per-block
feature taps can be recorded for drift analysis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    scaled_dot_attention,
    silu,
    slice_last,
    take_row,
    transpose,
)

LN_EPS = 1e-6


@dataclass
class BackboneConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    hidden_dim: int = 64
    n_heads: int = 4
    n_blocks: int = 6
    n_classes: int = 8
    T: int = 1000
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if self.n_blocks < 2:
            raise ValueError("need at least 2 blocks")
        if self.T < 1:
            raise ValueError("T must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size


@dataclass
class FeatureTap:
    """Per-block token features recorded during one forward pass."""

    features: list  # n_blocks arrays of [tokens, hidden_dim]
    tokens: int


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def _zeros(*shape) -> Tensor:
    return _param(np.zeros(shape, dtype=np.float32))


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return mul(x, scale + 1.0) + shift


class DiTBlock:
    """Pre-norm transformer block, shift/scale/gate-modulated by a condition."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        hidden = dim * mlp_ratio
        self.wq = _param(_xavier(rng, dim, dim))
        self.wk = _param(_xavier(rng, dim, dim))
        self.wv = _param(_xavier(rng, dim, dim))
        self.bq = _zeros(dim)
        self.bk = _zeros(dim)
        self.bv = _zeros(dim)
        self.wo = _param(_xavier(rng, dim, dim))
        self.bo = _zeros(dim)
        self.w1 = _param(_xavier(rng, dim, hidden))
        self.b1 = _zeros(hidden)
        self.w2 = _param(_xavier(rng, hidden, dim))
        self.b2 = _zeros(dim)
        # adaLN-Zero: zero modulation weights make the whole block an identity
        self.w_mod = _zeros(dim, 6 * dim)
        self.b_mod = _zeros(6 * dim)

    def named_params(self, prefix: str = "") -> dict:
        names = ("wq", "wk", "wv", "bq", "bk", "bv", "wo", "bo",
                 "w1", "b1", "w2", "b2", "w_mod", "b_mod")
        return {f"{prefix}{n}": getattr(self, n) for n in names}

    def _heads(self, x: Tensor) -> Tensor:
        tokens = x.shape[0]
        return transpose(reshape(x, (tokens, self.n_heads, self.head_dim)), (1, 0, 2))

    def _attention(self, x: Tensor) -> Tensor:
        tokens = x.shape[0]
        q = self._heads(matmul(x, self.wq) + self.bq)
        k = self._heads(matmul(x, self.wk) + self.bk)
        v = self._heads(matmul(x, self.wv) + self.bv)
        att = scaled_dot_attention(q, k, v)
        merged = reshape(transpose(att, (1, 0, 2)), (tokens, self.dim))
        return matmul(merged, self.wo) + self.bo

    def run(self, h: Tensor, cond: Tensor, return_branches: bool = False):
        """h: [tokens, dim]; cond: [dim]. Returns the block output, and
        optionally the two gated residual branches (for caching)."""
        if h.shape[-1] != self.dim or cond.shape != (self.dim,):
            raise ValueError(f"bad shapes for block: h {h.shape}, cond {cond.shape}")
        d = self.dim
        mod = matmul(silu(cond), self.w_mod) + self.b_mod
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = (
            slice_last(mod, j * d, (j + 1) * d) for j in range(6)
        )
        attn_branch = mul(self._attention(modulate(layer_norm(h, LN_EPS), shift_a, scale_a)), gate_a)
        h_mid = h + attn_branch
        x = modulate(layer_norm(h_mid, LN_EPS), shift_m, scale_m)
        mlp_branch = mul(matmul(gelu(matmul(x, self.w1) + self.b1), self.w2) + self.b2, gate_m)
        out = h_mid + mlp_branch
        if return_branches:
            return out, attn_branch, mlp_branch
        return out


class ConditionEmbedding:
    """Sinusoidal time features through a 2-layer MLP, plus a class table.

    Accepts non-integer timesteps; the last table row is the null class.
    """

    def __init__(self, dim: int, n_classes: int, rng: np.random.Generator):
        self.dim = dim
        self.n_classes = n_classes
        self.t_w1 = _param(_xavier(rng, dim, dim))
        self.t_b1 = _zeros(dim)
        self.t_w2 = _param(_xavier(rng, dim, dim))
        self.t_b2 = _zeros(dim)
        self.table = _param(rng.normal(0.0, 0.02, size=(n_classes + 1, dim)).astype(np.float32))

    def named_params(self, prefix: str = "") -> dict:
        names = ("t_w1", "t_b1", "t_w2", "t_b2", "table")
        return {f"{prefix}{n}": getattr(self, n) for n in names}

    def sinusoid(self, t: float) -> np.ndarray:
        """Interleaved sin/cos features of a real-valued timestep."""
        half = self.dim // 2
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
        args = float(t) * freqs
        feats = np.empty(self.dim, dtype=np.float32)
        feats[0::2] = np.sin(args)
        feats[1::2] = np.cos(args)
        return feats

    def __call__(self, t: float, class_id) -> Tensor:
        if class_id is None:
            class_id = self.n_classes
        if not (0 <= class_id <= self.n_classes):
            raise ValueError(f"class_id {class_id} out of range [0, {self.n_classes}]")
        feats = Tensor(self.sinusoid(t))
        t_emb = matmul(silu(matmul(feats, self.t_w1) + self.t_b1), self.t_w2) + self.t_b2
        return t_emb + take_row(self.table, int(class_id))


class DiT:
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.hidden_dim
        self.patch_w = _param(_xavier(rng, cfg.patch_dim, d))
        self.patch_b = _zeros(d)
        self.pos = _param(rng.normal(0.0, 0.02, size=(cfg.tokens, d)).astype(np.float32))
        self.cond = ConditionEmbedding(d, cfg.n_classes, rng)
        self.blocks = [DiTBlock(d, cfg.n_heads, rng, cfg.mlp_ratio) for _ in range(cfg.n_blocks)]
        # zero-init: a fresh model predicts exactly zero noise
        self.final_mod_w = _zeros(d, 2 * d)
        self.final_mod_b = _zeros(2 * d)
        self.final_w = _zeros(d, cfg.patch_dim)
        self.final_b = _zeros(cfg.patch_dim)

    # -- parameters -------------------------------------------------------

    def named_params(self) -> dict:
        out = {
            "patch_w": self.patch_w,
            "patch_b": self.patch_b,
            "pos": self.pos,
        }
        out.update(self.cond.named_params("cond."))
        for i, blk in enumerate(self.blocks):
            out.update(blk.named_params(f"blocks.{i}."))
        out.update({
            "final_mod_w": self.final_mod_w,
            "final_mod_b": self.final_mod_b,
            "final_w": self.final_w,
            "final_b": self.final_b,
        })
        return out

    def params(self) -> list:
        return list(self.named_params().values())

    def set_trainable(self, flag: bool):
        for p in self.params():
            p.requires_grad = bool(flag)

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.params())

    # -- pieces -----------------------------------------------------------

    def extract_patches(self, img: np.ndarray) -> np.ndarray:
        """[C,H,W] -> [tokens, patch_dim], row-major grid, channel-major patches."""
        c = self.cfg
        if img.shape != (c.channels, c.image_size, c.image_size):
            raise ValueError(f"expected image {(c.channels, c.image_size, c.image_size)}, got {img.shape}")
        g, p = c.grid, c.patch_size
        x = img.reshape(c.channels, g, p, g, p)
        return x.transpose(1, 3, 0, 2, 4).reshape(c.tokens, c.patch_dim)

    def place_patches(self, patches: np.ndarray) -> np.ndarray:
        """Inverse of extract_patches, on plain arrays."""
        c = self.cfg
        g, p = c.grid, c.patch_size
        x = patches.reshape(g, g, c.channels, p, p)
        return x.transpose(2, 0, 3, 1, 4).reshape(c.channels, c.image_size, c.image_size)

    def patchify(self, img) -> Tensor:
        """Image (array or constant Tensor) to projected tokens + positions."""
        data = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float32)
        tokens = Tensor(self.extract_patches(data))
        return matmul(tokens, self.patch_w) + self.patch_b + self.pos

    def unpatchify(self, tokens: Tensor) -> Tensor:
        c = self.cfg
        g, p = c.grid, c.patch_size
        x = reshape(tokens, (g, g, c.channels, p, p))
        return reshape(transpose(x, (2, 0, 3, 1, 4)), (c.channels, c.image_size, c.image_size))

    def embed_condition(self, t: float, class_id=None) -> Tensor:
        if not (0 <= float(t) <= self.cfg.T):
            raise ValueError(f"t={t} outside [0, {self.cfg.T}]")
        return self.cond(float(t), class_id)

    def run_block(self, idx: int, h: Tensor, cond: Tensor, return_branches: bool = False):
        if not (0 <= idx < self.cfg.n_blocks):
            raise ValueError(f"block index {idx} out of range")
        return self.blocks[idx].run(h, cond, return_branches)

    def final_layer(self, h: Tensor, cond: Tensor) -> Tensor:
        d = self.cfg.hidden_dim
        mod = matmul(silu(cond), self.final_mod_w) + self.final_mod_b
        shift, scale = slice_last(mod, 0, d), slice_last(mod, d, 2 * d)
        out = matmul(modulate(layer_norm(h, LN_EPS), shift, scale), self.final_w) + self.final_b
        return self.unpatchify(out)

    # -- full passes ------------------------------------------------------

    def forward(self, x, t: float, class_id=None, tap: bool = False):
        """Predict the noise component of x at timestep t.

        With tap=True also returns a FeatureTap of all block outputs.
        """
        h = self.patchify(x)
        cond = self.embed_condition(t, class_id)
        feats = [] if tap else None
        for blk in self.blocks:
            h = blk.run(h, cond)
            if tap:
                feats.append(h.data.copy())
        eps = self.final_layer(h, cond)
        if tap:
            return eps, FeatureTap(feats, self.cfg.tokens)
        return eps

    def cfg_forward(self, x, t: float, class_id, scale: float = 1.0) -> Tensor:
        """Classifier-free guidance combination of class and null predictions."""
        if scale < 1.0:
            raise ValueError("guidance scale must be >= 1")
        if class_id is None:
            return self.forward(x, t, None)
        if scale == 1.0:
            return self.forward(x, t, class_id)
        eps_c = self.forward(x, t, class_id)
        eps_n = self.forward(x, t, None)
        return eps_n + (eps_c - eps_n) * float(scale)
