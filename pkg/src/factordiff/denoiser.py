"""Token-wise conditioned diffusion transformer predicting the added noise.

One token per asset. Each token carries the asset's noisy return; its
condition vector is ``MLP(x_i) + e_n`` (own factor row plus the step
embedding). Every block modulates its sub-layers per token with AdaLN-Zero
(shift, scale, gate for attention and for the feed-forward), and attention
mixes information across all assets. There is no positional encoding, so
the network is exactly permutation equivariant in the asset axis.

Flat parameter layout (used by checkpoints), in this order::

    token_w (1, d)  token_b (d)
    cond_w1 (K, d)  cond_b1 (d)  cond_w2 (d, d)  cond_b2 (d)
    step_w (E, d)   step_b (d)                      E = sinusoid width
    per block j:
      blk{j}.ada_w (d, 6d)  blk{j}.ada_b (6d)
      blk{j}.q_w, k_w, v_w, o_w (d, d) each followed by its bias (d)
      blk{j}.ff_w1 (d, h)  blk{j}.ff_b1 (h)  blk{j}.ff_w2 (h, d)  blk{j}.ff_b2 (d)
    final_ada_w (d, 2d)  final_ada_b (2d)
    head_w (d, 1)        head_b (1)

Weight matrices start Xavier-uniform, biases at zero, and every modulation
output layer plus the head start at zero.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import Graph, Node, NumericalError


@dataclass(frozen=True)
class DiTConfig:
    k: int
    d_model: int = 64
    heads: int = 4
    depth: int = 3
    ff_mult: int = 4
    step_dim: int = 64
    max_period: float = 10000.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.step_dim % 2:
            raise ValueError("step_dim must be even")

    @property
    def ff_hidden(self) -> int:
        return self.ff_mult * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: DiTConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, h = cfg.d_model, cfg.ff_hidden
    shapes = [
        ("token_w", (1, d)), ("token_b", (d,)),
        ("cond_w1", (cfg.k, d)), ("cond_b1", (d,)),
        ("cond_w2", (d, d)), ("cond_b2", (d,)),
        ("step_w", (cfg.step_dim, d)), ("step_b", (d,)),
    ]
    for j in range(cfg.depth):
        p = f"blk{j}."
        shapes += [(p + "ada_w", (d, 6 * d)), (p + "ada_b", (6 * d,))]
        for name in ("q", "k", "v", "o"):
            shapes += [(p + f"{name}_w", (d, d)), (p + f"{name}_b", (d,))]
        shapes += [
            (p + "ff_w1", (d, h)), (p + "ff_b1", (h,)),
            (p + "ff_w2", (h, d)), (p + "ff_b2", (d,)),
        ]
    shapes += [("final_ada_w", (d, 2 * d)), ("final_ada_b", (2 * d,)), ("head_w", (d, 1)), ("head_b", (1,))]
    return shapes


def param_count(cfg: DiTConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(cfg))


_ZERO_INIT = ("ada_w", "ada_b", "final_ada_w", "final_ada_b", "head_w", "head_b")


class DenoiserParams:
    """All learnable weights, stored as one flat float64 vector with named views."""

    def __init__(self, config: DiTConfig, flat: np.ndarray | None = None):
        self.config = config
        self.shapes = param_shapes(config)
        size = sum(int(np.prod(s)) for _, s in self.shapes)
        if flat is None:
            flat = np.zeros(size)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (size,):
            raise ValueError(f"expected {size} parameters, got {flat.shape}")
        self.flat = flat
        self.views: dict[str, np.ndarray] = {}
        off = 0
        for name, shape in self.shapes:
            n = int(np.prod(shape))
            self.views[name] = flat[off : off + n].reshape(shape)
            off += n

    def __getitem__(self, name: str) -> np.ndarray:
        return self.views[name]

    def __len__(self) -> int:
        return self.flat.size

    def names(self) -> list[str]:
        return [n for n, _ in self.shapes]

    def with_flat(self, flat: np.ndarray) -> "DenoiserParams":
        return DenoiserParams(self.config, flat)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, self.flat.copy())


def init_params(config: DiTConfig, rng: np.random.Generator | int) -> DenoiserParams:
    rng = np.random.default_rng(rng)
    params = DenoiserParams(config)
    for name, shape in params.shapes:
        base = name.split(".")[-1]
        if base in _ZERO_INIT or len(shape) == 1:
            continue
        limit = math.sqrt(6.0 / (shape[0] + shape[1]))
        params[name][...] = rng.uniform(-limit, limit, size=shape)
    return params


def sinusoidal_embedding(n, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Fixed sin/cos features of the step index; shape ``(len(n), dim)``."""
    if dim % 2:
        raise ValueError("embedding width must be even")
    n = np.atleast_1d(np.asarray(n, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    angles = n[:, None] * freqs[None, :]
    return np.concatenate([np.cos(angles), np.sin(angles)], axis=1)


class _Builder:
    """Graph-side view of a DenoiserParams: one leaf per named tensor."""

    def __init__(self, g: Graph, params: DenoiserParams):
        self.g = g
        self.params = params
        self.cfg = params.config
        self.leaves = {name: g.param(params[name], name=name) for name in params.names()}

    def linear(self, x: Node, prefix: str) -> Node:
        return self.g.add(self.g.matmul(x, self.leaves[prefix + "w"]), self.leaves[prefix + "b"])

    def step_embedding(self, n) -> Node:
        g = self.g
        sin = g.const(sinusoidal_embedding(n, self.cfg.step_dim, self.cfg.max_period))
        return g.gelu(self.linear(sin, "step_"))

    def condition(self, X: Node, e: Node) -> Node:
        g = self.g
        h = g.gelu(g.add(g.matmul(X, self.leaves["cond_w1"]), self.leaves["cond_b1"]))
        h = g.add(g.matmul(h, self.leaves["cond_w2"]), self.leaves["cond_b2"])
        B, d = e.shape
        return g.add(h, g.reshape(e, (B, 1, d)))

    def modulate(self, x: Node, shift: Node, scale: Node) -> Node:
        g = self.g
        ln = g.layer_norm(x)
        return g.add(g.add(ln, g.mul(ln, scale)), shift)

    def attention(self, h: Node, p: str) -> Node:
        g = self.g
        B, D, d = h.shape
        H = self.cfg.heads
        dh = d // H

        def heads(name):
            t = g.add(g.matmul(h, self.leaves[p + name + "_w"]), self.leaves[p + name + "_b"])
            return g.transpose(g.reshape(t, (B, D, H, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = g.scale(g.matmul(q, g.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        attn = g.matmul(g.softmax(scores, axis=-1), v)
        merged = g.reshape(g.transpose(attn, (0, 2, 1, 3)), (B, D, d))
        return g.add(g.matmul(merged, self.leaves[p + "o_w"]), self.leaves[p + "o_b"])

    def block(self, tokens: Node, c: Node, j: int) -> Node:
        g = self.g
        p = f"blk{j}."
        d = self.cfg.d_model
        mod = g.add(g.matmul(g.gelu(c), self.leaves[p + "ada_w"]), self.leaves[p + "ada_b"])
        shift1, scale1, gate1, shift2, scale2, gate2 = (g.slice(mod, i * d, (i + 1) * d) for i in range(6))
        a = self.attention(self.modulate(tokens, shift1, scale1), p)
        tokens = g.add(tokens, g.mul(gate1, a))
        f = self.modulate(tokens, shift2, scale2)
        f = g.gelu(g.add(g.matmul(f, self.leaves[p + "ff_w1"]), self.leaves[p + "ff_b1"]))
        f = g.add(g.matmul(f, self.leaves[p + "ff_w2"]), self.leaves[p + "ff_b2"])
        return g.add(tokens, g.mul(gate2, f))

    def embed_tokens(self, noisy: Node) -> Node:
        g = self.g
        B, D = noisy.shape
        col = g.reshape(noisy, (B, D, 1))
        return g.add(g.mul(col, self.leaves["token_w"]), self.leaves["token_b"])

    def head(self, tokens: Node, c: Node) -> Node:
        g = self.g
        d = self.cfg.d_model
        mod = g.add(g.matmul(g.gelu(c), self.leaves["final_ada_w"]), self.leaves["final_ada_b"])
        out = self.modulate(tokens, g.slice(mod, 0, d), g.slice(mod, d, 2 * d))
        out = g.add(g.matmul(out, self.leaves["head_w"]), self.leaves["head_b"])
        B, D, _ = out.shape
        return g.reshape(out, (B, D))

    def forward(self, noisy: Node, n, X: Node) -> Node:
        e = self.step_embedding(n)
        c = self.condition(X, e)
        tokens = self.embed_tokens(noisy)
        for j in range(self.cfg.depth):
            tokens = self.block(tokens, c, j)
        return self.head(tokens, c)


def _as_batch(noisy, n, X, k: int):
    noisy = np.asarray(noisy, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    single = noisy.ndim == 1
    if single:
        noisy = noisy[None]
    if X.ndim == 2:
        X = X[None]
    if noisy.ndim != 2 or X.ndim != 3 or X.shape[1] != noisy.shape[1] or X.shape[0] not in (1, noisy.shape[0]):
        raise ValueError(f"shape mismatch: noisy {noisy.shape} vs factors {X.shape}")
    if X.shape[2] != k:
        raise ValueError(f"factor width {X.shape[2]} does not match model k={k}")
    n = np.asarray(n)
    if n.ndim and n.size == noisy.shape[0] and np.all(n == n.flat[0]):
        n = n.flat[0]
    if n.ndim and n.shape != (noisy.shape[0],):
        raise ValueError(f"need one step index per row, got {n.shape}")
    return noisy, n, X, single


def timestep_embedding(n: int, params: DenoiserParams) -> np.ndarray:
    """Projected step embedding ``e_n`` (length d_model)."""
    b = _Builder(Graph(record=False), params)
    return b.step_embedding([n]).value[0]


def condition_vectors(X: np.ndarray, n: int, params: DenoiserParams) -> np.ndarray:
    """Rows ``MLP(x_i) + e_n`` for a single ``(D, K)`` factor matrix."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.config.k:
        raise ValueError(f"factor matrix must be (D, {params.config.k}), got {X.shape}")
    g = Graph(record=False)
    b = _Builder(g, params)
    return b.condition(g.const(X[None]), b.step_embedding([n])).value[0]


def dit_block(tokens: np.ndarray, C: np.ndarray, params: DenoiserParams, j: int) -> np.ndarray:
    """Apply block ``j`` to ``(D, d_model)`` tokens under conditions ``C``."""
    tokens = np.asarray(tokens, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    d = params.config.d_model
    if tokens.shape != C.shape or tokens.ndim != 2 or tokens.shape[1] != d:
        raise ValueError(f"tokens {tokens.shape} and conditions {C.shape} must both be (D, {d})")
    g = Graph(record=False)
    b = _Builder(g, params)
    return b.block(g.const(tokens[None]), g.const(C[None]), j).value[0]


def build_forward(g: Graph, params: DenoiserParams, noisy: Node, n, X: Node) -> tuple[Node, dict[str, Node]]:
    """Record the network on ``g``; returns the output node and parameter leaves."""
    b = _Builder(g, params)
    return b.forward(noisy, n, X), b.leaves


def denoise_forward(noisy, n, X, params: DenoiserParams) -> np.ndarray:
    """Predicted noise for one ``(D,)`` input or a ``(B, D)`` batch.

    ``n`` is a step index or one per batch row. ``X`` is ``(D, K)``,
    ``(1, D, K)`` (shared by every row) or ``(B, D, K)``. A shared condition
    and step lets the conditioning path run once for the whole batch.
    """
    noisy, n, X, single = _as_batch(noisy, n, X, params.config.k)
    g = Graph(record=False)
    out, _ = build_forward(g, params, g.const(noisy), n, g.const(X))
    if not np.all(np.isfinite(out.value)):
        raise NumericalError("denoiser produced a non-finite output")
    return out.value[0] if single else out.value
