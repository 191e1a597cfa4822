"""Toy EDM denoiser training on synthetic conditional data."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .core import ConfigurationError, DivergenceError
from .velocity import MLP, MLPDenoiser, mlp_forward_backward

log = logging.getLogger(__name__)


class TrainingError(DivergenceError):
    pass


@dataclass
class SyntheticTask:
    """Conditional data ``x = M c + B s + noise`` with c and s uniform in boxes.

    ``kind="mixture"`` adds ``+offset`` or ``-offset`` to the mean, the plus
    branch taken with probability ``weight``.
    """

    data_dim: int = 2
    cond_dim: int = 2
    kind: str = "gaussian"
    std: float = 0.2
    scalar_names: tuple[str, ...] = ()
    size: int = 20_000
    seed: int = 0
    cond_low: float = -1.0
    cond_high: float = 1.0
    scalar_low: float = 0.0
    scalar_high: float = 1.0
    M: list | None = None
    B: list | None = None
    offset: list | None = None
    weight: float = 0.5

    def __post_init__(self):
        if self.kind not in ("gaussian", "mixture"):
            raise ConfigurationError(f"unknown task kind {self.kind!r}")
        if self.std < 0 or (self.std == 0 and self.kind == "mixture"):
            raise ConfigurationError("std must be positive")
        if not 0 < self.weight < 1:
            raise ConfigurationError("mixture weight must lie in (0, 1)")
        if not (self.cond_low < self.cond_high and self.scalar_low < self.scalar_high):
            raise ConfigurationError("conditioning boxes need low < high")
        self.scalar_names = tuple(self.scalar_names)
        rng = np.random.default_rng([self.seed, 1])
        if self.M is None:
            self.M = (rng.standard_normal((self.data_dim, self.cond_dim)) / np.sqrt(self.cond_dim)).tolist()
        if self.B is None:
            self.B = (0.5 * rng.standard_normal((self.data_dim, len(self.scalar_names)))).tolist()
        if self.offset is None:
            self.offset = np.full(self.data_dim, 0.5).tolist()

    @property
    def M_(self) -> np.ndarray:
        return np.asarray(self.M, float).reshape(self.data_dim, self.cond_dim)

    @property
    def B_(self) -> np.ndarray:
        return np.asarray(self.B, float).reshape(self.data_dim, len(self.scalar_names))

    def mean(self, c, s=None) -> np.ndarray:
        c = np.atleast_2d(c)
        m = c @ self.M_.T
        if self.scalar_names:
            m = m + np.atleast_2d(s) @ self.B_.T
        return m


class Dataset(NamedTuple):
    x: np.ndarray
    c: np.ndarray
    s: np.ndarray


def generate_dataset(task: SyntheticTask) -> Dataset:
    rng = np.random.default_rng([task.seed, 2])
    n = task.size
    c = rng.uniform(task.cond_low, task.cond_high, (n, task.cond_dim))
    s = rng.uniform(task.scalar_low, task.scalar_high, (n, len(task.scalar_names)))
    x = task.mean(c, s)
    if task.kind == "mixture":
        sign = np.where(rng.uniform(size=(n, 1)) < task.weight, 1.0, -1.0)
        x = x + sign * np.asarray(task.offset, float)
    if task.std > 0:
        x = x + task.std * rng.standard_normal(x.shape)
    return Dataset(x, c, s)


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 256
    lr: float = 2e-3
    lr_final: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_data: float = 0.5
    hidden: tuple[int, ...] = (64, 64)
    init_seed: int = 0
    seed: int = 0
    log_every: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")
        if not (len(self.hidden) <= 3 and all(0 < h <= 128 for h in self.hidden)):
            raise ConfigurationError("architecture limited to <= 3 hidden layers of width <= 128")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    denoiser: MLPDenoiser
    losses: list[float] = field(default_factory=list)


def edm_weight(sigma, sigma_data):
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def batch_denoise(den: MLPDenoiser, y, sigma, c, s, cotangent=None):
    """Batched D with per-row sigma. With a D-cotangent also returns parameter grads."""
    c_skip, c_out, _, _ = den.precond(sigma)
    feats = den.features(y, sigma, c, s)
    cot = None if cotangent is None else c_out[:, None] * cotangent
    f, _, pgrads = mlp_forward_backward(den.net, feats, cot)
    return c_skip[:, None] * y + c_out[:, None] * f, pgrads


def edm_loss(den: MLPDenoiser, x0, c, s, sigma, noise, with_grad=False):
    """Weighted denoising loss, mean over batch of the squared error summed over dims."""
    y = x0 + sigma[:, None] * noise
    lam = edm_weight(sigma, den.sigma_data)
    d, _ = batch_denoise(den, y, sigma, c, s)
    err = d - x0
    loss = float(np.mean(lam * np.sum(err * err, axis=1)))
    if not with_grad:
        return loss, None
    cot = 2.0 * lam[:, None] * err / x0.shape[0]
    _, pgrads = batch_denoise(den, y, sigma, c, s, cot)
    return loss, pgrads


def identity_loss(x0, sigma, noise, sigma_data) -> float:
    """Loss of the trivial predictor D(y) = y on the same draws."""
    lam = edm_weight(sigma, sigma_data)
    return float(np.mean(lam * sigma**2 * np.sum(noise * noise, axis=1)))


def bayes_loss(task: SyntheticTask, sigma, sigma_data) -> float:
    """Loss of the exact posterior-mean denoiser for a Gaussian task."""
    if task.kind != "gaussian":
        raise ConfigurationError("closed-form optimum only for gaussian tasks")
    s2 = task.std**2
    lam = edm_weight(sigma, sigma_data)
    return float(np.mean(lam * task.data_dim * s2 * sigma**2 / (s2 + sigma**2)))


def init_denoiser(task: SyntheticTask, cfg: TrainConfig) -> MLPDenoiser:
    ns = len(task.scalar_names)
    widths = [task.data_dim + task.cond_dim + ns + 1, *cfg.hidden, task.data_dim]
    mid = 0.5 * (task.scalar_low + task.scalar_high)
    half = 0.5 * (task.scalar_high - task.scalar_low)
    return MLPDenoiser(
        MLP.init(widths, seed=cfg.init_seed),
        task.data_dim,
        task.cond_dim,
        task.scalar_names,
        cfg.sigma_data,
        np.full(ns, mid),
        np.full(ns, 1.0 / half),
    )


def train(task: SyntheticTask, cfg: TrainConfig | None = None, data: Dataset | None = None) -> TrainResult:
    """Adam on the EDM objective with log-normal sigma; deterministic given seeds."""
    cfg = cfg or TrainConfig()
    data = data if data is not None else generate_dataset(task)
    den = init_denoiser(task, cfg)
    params = den.net.parameters()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng([cfg.seed, 3])
    n = data.x.shape[0]
    losses = []
    for step in range(cfg.steps):
        idx = rng.integers(0, n, cfg.batch_size)
        sigma = np.exp(cfg.p_mean + cfg.p_std * rng.standard_normal(cfg.batch_size))
        noise = rng.standard_normal((cfg.batch_size, task.data_dim))
        loss, (gws, gbs) = edm_loss(den, data.x[idx], data.c[idx], data.s[idx], sigma, noise, with_grad=True)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}", step=step)
        losses.append(loss)
        frac = step / max(cfg.steps - 1, 1)
        lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + np.cos(np.pi * frac))
        b1, b2 = cfg.beta1, cfg.beta2
        for p, g, mi, vi in zip(params, [*gws, *gbs], m, v):
            mi *= b1
            mi += (1 - b1) * g
            vi *= b2
            vi += (1 - b2) * g * g
            mhat = mi / (1 - b1 ** (step + 1))
            vhat = vi / (1 - b2 ** (step + 1))
            p -= lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.5f lr %.2e", step, loss, lr)
    return TrainResult(den, losses)


def evaluation_draws(task: SyntheticTask, data: Dataset, n: int = 4096, seed: int = 7, cfg: TrainConfig | None = None):
    """Fixed (x0, c, s, sigma, noise) draws for comparing trained and baseline losses."""
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng([seed, 4])
    idx = rng.integers(0, data.x.shape[0], n)
    sigma = np.exp(cfg.p_mean + cfg.p_std * rng.standard_normal(n))
    noise = rng.standard_normal((n, task.data_dim))
    return data.x[idx], data.c[idx], data.s[idx], sigma, noise
