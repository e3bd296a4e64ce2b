"""Conditional DDPM over cross-sectional return vectors."""
from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .denoiser import DenoiserParams, DiTConfig, build_forward, denoise_forward, init_params
from .numerics import AdamState, Graph, NumericalError, adam_step, backward

log = logging.getLogger(__name__)

EpsFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables indexed by step n = 1..N; index 0 holds the n = 0 convention."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.beta.size - 1


def build_schedule(n_steps: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linear betas from ``beta_min`` to ``beta_max`` inclusive.

    Arrays have length ``n_steps + 1`` so ``beta[n]`` is step n; entry 0 is
    padding with ``alpha_bar[0] = 1``.
    """
    if n_steps < 1:
        raise ValueError("need at least one diffusion step")
    if not (0 < beta_min <= beta_max < 1):
        raise ValueError(f"betas must satisfy 0 < min <= max < 1, got {beta_min}, {beta_max}")
    beta = np.empty(n_steps + 1)
    beta[0] = 0.0
    beta[1:] = np.linspace(beta_min, beta_max, n_steps) if n_steps > 1 else beta_min
    alpha = 1.0 - beta
    alpha_bar = np.empty(n_steps + 1)
    alpha_bar[0] = 1.0
    for n in range(1, n_steps + 1):
        alpha_bar[n] = alpha_bar[n - 1] * alpha[n]
    sigma2 = np.zeros(n_steps + 1)
    sigma2[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    return NoiseSchedule(beta, alpha, alpha_bar, sigma2)


def q_sample(schedule: NoiseSchedule, r0, n, eps) -> np.ndarray:
    """Closed-form forward noising ``sqrt(ab_n) r0 + sqrt(1 - ab_n) eps``.

    ``n`` may be an int or an array broadcasting against the leading axis
    of ``r0``.
    """
    n = np.asarray(n)
    if np.any(n < 1) or np.any(n > schedule.n_steps):
        raise ValueError(f"step index out of range 1..{schedule.n_steps}")
    ab = schedule.alpha_bar[n]
    r0 = np.asarray(r0, dtype=np.float64)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (r0.ndim - ab.ndim))
    return np.sqrt(ab) * r0 + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.003
    n_steps: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.05
    seed: int = 0
    scale_returns: bool = False
    ema_decay: float = 0.0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.n_steps < 1:
            raise ValueError("epochs, batch_size and n_steps must all be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.n_steps, self.beta_min, self.beta_max)


@dataclass
class SampleSet:
    condition: np.ndarray
    samples: np.ndarray
    seed: object

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise ValueError("samples must be a non-empty (S, D) matrix")
        if not np.all(np.isfinite(self.samples)):
            raise NumericalError("non-finite generated sample")


def draw_training_noise(rng: np.random.Generator, batch: int, d: int, n_steps: int):
    """One (step, noise) pair per batch element."""
    n = rng.integers(1, n_steps + 1, size=batch)
    eps = rng.standard_normal((batch, d))
    return n, eps


def denoising_loss(
    params: DenoiserParams,
    X: np.ndarray,
    R: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator | None = None,
    draws: tuple[np.ndarray, np.ndarray] | None = None,
    model: Callable | None = None,
) -> tuple[float, np.ndarray]:
    """Mean over the batch of ``||eps - eps_theta(q_sample(r0, n, eps), n; X)||^2``.

    ``X`` is ``(B, D, K)`` and ``R`` is ``(B, D)``. Steps and noises come from
    ``draws`` if given, otherwise from ``rng``. ``model(graph, noisy, n, X,
    params)`` may replace the network; it must return an output node and a
    ``{name: leaf}`` map. Returns the loss and its flat gradient.
    """
    X = np.asarray(X, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] == 0:
        raise ValueError("batch must be a non-empty (B, D) return matrix")
    if X.ndim != 3 or X.shape[:2] != R.shape:
        raise ValueError(f"dimension mismatch: factors {X.shape} vs returns {R.shape}")
    B, D = R.shape
    if draws is None:
        if rng is None:
            raise ValueError("need rng or draws")
        draws = draw_training_noise(rng, B, D, schedule.n_steps)
    n, eps = draws
    noisy = q_sample(schedule, R, n, eps)
    g = Graph()
    forward = model or (lambda gr, x, nn, xx, p: build_forward(gr, p, x, nn, xx))
    pred, leaves = forward(g, g.const(noisy), n, g.const(X), params)
    loss = g.scale(g.sq_error(pred, g.const(eps)), 1.0 / B)
    adj = backward(g, loss)
    grad = np.concatenate([adj[leaves[name]].ravel() for name in params.names()]) if leaves else np.zeros(0)
    return float(loss.value), grad


@dataclass
class Checkpoint:
    params: DenoiserParams
    train: TrainConfig
    ret_loc: float = 0.0
    ret_scale: float = 1.0
    loss_history: list[float] = field(default_factory=list, compare=False)

    @property
    def config(self) -> DiTConfig:
        return self.params.config

    def schedule(self) -> NoiseSchedule:
        return self.train.schedule()

    def echo(self) -> dict[str, str]:
        items = {f"dit.{k}": repr(v) for k, v in self.config.to_dict().items()}
        for f in fields(TrainConfig):
            if f.name != "checkpoint_path":
                items[f"train.{f.name}"] = repr(getattr(self.train, f.name))
        items["data.ret_loc"] = repr(self.ret_loc)
        items["data.ret_scale"] = repr(self.ret_scale)
        return items

    def sample(self, X, count: int, seed, **kw) -> SampleSet:
        return ancestral_sample(self.params, self.schedule(), X, count, seed,
                                loc=self.ret_loc, scale=self.ret_scale, **kw)


MAGIC = b"FDIF"
FORMAT_VERSION = 1


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    text = "".join(f"{k}={v}\n" for k, v in sorted(ckpt.echo().items())).encode("utf-8")
    body = b"".join([
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", len(text)),
        text,
        struct.pack("<Q", len(ckpt.params)),
        ckpt.params.flat.astype("<f8").tobytes(),
    ])
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def _literal(text: str):
    import ast
    return ast.literal_eval(text)


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 52 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, digest = raw[:-32], raw[-32:]
    (version,) = struct.unpack_from("<I", body, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    (tlen,) = struct.unpack_from("<I", body, 8)
    text = body[12 : 12 + tlen].decode("utf-8")
    (count,) = struct.unpack_from("<Q", body, 12 + tlen)
    flat = np.frombuffer(body, dtype="<f8", count=count, offset=20 + tlen).astype(np.float64)
    echo = dict(line.split("=", 1) for line in text.splitlines() if line)
    dit = DiTConfig(**{k[4:]: _literal(v) for k, v in echo.items() if k.startswith("dit.")})
    train = TrainConfig(**{k[6:]: _literal(v) for k, v in echo.items() if k.startswith("train.")})
    return Checkpoint(DenoiserParams(dit, flat), train,
                      _literal(echo["data.ret_loc"]), _literal(echo["data.ret_scale"]))


def train(panel, config: TrainConfig, dit: DiTConfig | None = None, on_epoch=None) -> Checkpoint:
    """Fit the denoiser on the ``(X_t, R_{t+1})`` pairs of ``panel``.

    Runs ``epochs * ceil(T / batch_size)`` Adam steps over seeded shuffles.
    With ``ema_decay > 0`` the checkpoint holds an exponential moving average
    of the iterates instead of the last one.
    """
    X = np.asarray(panel.factors, dtype=np.float64)
    R = np.asarray(panel.returns, dtype=np.float64)
    T = R.shape[0]
    if T == 0:
        raise ValueError("cannot train on an empty panel")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(R))):
        raise ValueError("panel has missing or non-finite values; preprocess first")
    dit = dit or DiTConfig(k=X.shape[2])
    if dit.k != X.shape[2]:
        raise ValueError(f"model k={dit.k} but panel has {X.shape[2]} factors")
    loc, scale = 0.0, 1.0
    if config.scale_returns:
        loc, scale = float(R.mean()), float(R.std())
        if scale <= 0:
            raise ValueError("returns have zero spread; cannot rescale")
        R = (R - loc) / scale

    init_ss, shuffle_ss, noise_ss = np.random.SeedSequence(config.seed).spawn(3)
    params = init_params(dit, np.random.default_rng(init_ss))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    noise_rng = np.random.default_rng(noise_ss)
    schedule = config.schedule()
    state = AdamState.fresh(len(params), lr=config.lr)
    ckpt = Checkpoint(params, config, loc, scale)
    avg = params.flat.copy()
    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(T)
        total = 0.0
        for start in range(0, T, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grad = denoising_loss(params, X[idx], R[idx], schedule, noise_rng)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at optimizer step {step}")
            try:
                flat, state = adam_step(params.flat, grad, state)
            except NumericalError as exc:
                raise TrainingError(f"optimizer step {step}: {exc}") from exc
            params = params.with_flat(flat)
            if config.ema_decay > 0:
                avg *= config.ema_decay
                avg += (1.0 - config.ema_decay) * flat
            total += loss * len(idx)
            step += 1
        kept = params.with_flat(avg.copy()) if config.ema_decay > 0 else params
        ckpt = Checkpoint(kept, config, loc, scale, ckpt.loss_history + [total / T])
        log.info("epoch %d/%d loss %.6f", epoch + 1, config.epochs, total / T)
        if config.checkpoint_path:
            write_checkpoint(ckpt, config.checkpoint_path)
        if on_epoch is not None:
            on_epoch(epoch, ckpt)
    return ckpt


def chain_noise(seed, count: int, n_steps: int, d: int) -> np.ndarray:
    """Per-chain noise, shape ``(count, n_steps + 1, d)``.

    Chain s draws from its own stream keyed by ``(seed, s)``, so the first
    S' chains of a larger run match a run of S' chains exactly. Slot 0 is
    the initial draw; slot n is the noise added when leaving step n.
    """
    entropy = list(np.atleast_1d(np.asarray(seed, dtype=np.int64)).tolist())
    out = np.empty((count, n_steps + 1, d))
    for s in range(count):
        ss = np.random.SeedSequence(entropy, spawn_key=(s,))
        out[s] = np.random.default_rng(ss).standard_normal((n_steps + 1, d))
    return out


def reverse_chain(schedule: NoiseSchedule, eps_fn: EpsFn, Xs: np.ndarray, noise: np.ndarray,
                  chunk: int = 4096) -> np.ndarray:
    """Run the reverse process.

    ``Xs`` is ``(M, D, K)`` and ``noise`` is ``(M, S, N + 1, D)``: S chains
    per condition. ``eps_fn(x, n, X)`` receives up to ``chunk`` chains of one
    condition with ``X`` shaped ``(1, D, K)``. Returns ``(M, S, D)``.
    """
    M, S = noise.shape[:2]
    x = noise[:, :, 0, :].copy()
    for n in range(schedule.n_steps, 0, -1):
        eps_hat = np.empty_like(x)
        for m in range(M):
            for lo in range(0, S, chunk):
                hi = min(S, lo + chunk)
                eps_hat[m, lo:hi] = eps_fn(x[m, lo:hi], n, Xs[m : m + 1])
        coef = schedule.beta[n] / math.sqrt(1.0 - schedule.alpha_bar[n])
        x = (x - coef * eps_hat) / math.sqrt(schedule.alpha[n])
        if n > 1:
            x = x + math.sqrt(schedule.sigma2[n]) * noise[:, :, n, :]
    return x


def _network(params: DenoiserParams) -> EpsFn:
    return lambda x, n, X: denoise_forward(x, n, X, params)


def ancestral_sample(params: DenoiserParams | None, schedule: NoiseSchedule, X, count: int, seed,
                     loc: float = 0.0, scale: float = 1.0, eps_fn: EpsFn | None = None) -> SampleSet:
    """Draw ``count`` return vectors given one ``(D, K)`` condition.

    Generated values are mapped back through ``x * scale + loc``.
    """
    if count < 1:
        raise ValueError("sample count must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"condition must be (D, K), got {X.shape}")
    if eps_fn is None:
        if params is None:
            raise ValueError("need params or eps_fn")
        eps_fn = _network(params)
    noise = chain_noise(seed, count, schedule.n_steps, X.shape[0])
    out = reverse_chain(schedule, eps_fn, X[None], noise[None])[0]
    return SampleSet(X, out * scale + loc, seed)


def sample_many(ckpt: Checkpoint, Xs: np.ndarray, count: int, seeds) -> np.ndarray:
    """Samples for several conditions at once; returns ``(M, count, D)``.

    Condition m uses ``seeds[m]`` exactly as :func:`ancestral_sample` would.
    """
    Xs = np.asarray(Xs, dtype=np.float64)
    M, D, _ = Xs.shape
    schedule = ckpt.schedule()
    noise = np.stack([chain_noise(s, count, schedule.n_steps, D) for s in seeds])
    out = reverse_chain(schedule, _network(ckpt.params), Xs, noise)
    out = out * ckpt.ret_scale + ckpt.ret_loc
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite generated sample")
    return out
