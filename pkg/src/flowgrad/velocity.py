"""Velocity fields u(x, t, c) with value and vector-Jacobian product evaluation.

Every field exposes ``eval`` and a fused ``vjp`` returning the cotangent with
respect to the state, the vector conditioner, and each scalar conditioner (in
the order they appear in the :class:`Conditioning`).  ``vjp_state`` and
``vjp_cond`` are thin views of ``vjp``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .core import Conditioning, ConfigurationError, ContractError, DomainError


class VelocityField:
    name = "field"
    state_dim: int
    cond_dim: int
    scalar_names: tuple[str, ...] = ()
    # EDM-style fields divide by t and cannot be evaluated at t = 0
    singular_at_zero = False

    def eval(self, x, t: float, cond: Conditioning) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, a, x, t: float, cond: Conditioning):
        """Return ``(a^T du/dx, a^T du/dc, [a^T du/ds_k for s_k in cond])``."""
        raise NotImplementedError

    def vjp_state(self, a, x, t, cond) -> np.ndarray:
        return self.vjp(a, x, t, cond)[0]

    def vjp_cond(self, a, x, t, cond) -> tuple[np.ndarray, np.ndarray]:
        _, gc, gs = self.vjp(a, x, t, cond)
        return gc, gs

    def describe(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "state_dim": self.state_dim,
            "cond_dim": self.cond_dim,
            "scalar_names": list(self.scalar_names),
        }

    def _check(self, x, t, cond, allow_zero=False):
        if not np.isfinite(t) or t < 0 or (t == 0 and not allow_zero):
            raise DomainError(f"{self.name}: time must be positive, got {t}")
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.state_dim:
            raise ContractError(f"{self.name}: state has {x.shape[-1]} entries, expected {self.state_dim}")
        if cond.c.size != self.cond_dim:
            raise ContractError(f"{self.name}: conditioning has {cond.c.size} entries, expected {self.cond_dim}")
        return x, np.asarray(cond.c)

    def _scalar_values(self, cond: Conditioning) -> np.ndarray:
        names = cond.names
        missing = [n for n in self.scalar_names if n not in names]
        if missing:
            raise ContractError(f"{self.name}: conditioning lacks scalars {missing}")
        return np.array([cond.scalar(n) for n in self.scalar_names], dtype=float)

    def _scatter_scalars(self, g_own: np.ndarray, cond: Conditioning) -> np.ndarray:
        out = np.zeros(len(cond.scalars))
        idx = {n: i for i, n in enumerate(cond.names)}
        for n, g in zip(self.scalar_names, g_own):
            out[idx[n]] = g
        return out


@dataclass(eq=False)
class AnalyticGaussianField(VelocityField):
    """Probability-flow velocity for data ~ N(M c + B s, std^2 I).

    ``u = t (x - mean) / (std^2 + t^2)``; the optional ``B`` couples scalar
    conditioners into the mean so that the scalar accumulators have a
    closed form to check against.
    """

    M: np.ndarray
    std: float = 1.0
    B: np.ndarray | None = None
    scalar_names: tuple[str, ...] = ()
    name: str = "analytic-gaussian"

    def __post_init__(self):
        self.M = np.atleast_2d(np.asarray(self.M, dtype=float))
        if not self.std > 0:
            raise ConfigurationError("std must be positive")
        if not np.all(np.isfinite(self.M)):
            raise ConfigurationError("M must be finite")
        self.scalar_names = tuple(self.scalar_names)
        ns = len(self.scalar_names)
        if self.B is None:
            self.B = np.zeros((self.M.shape[0], ns))
        self.B = np.asarray(self.B, dtype=float).reshape(self.M.shape[0], ns)
        self.state_dim, self.cond_dim = self.M.shape

    def mean(self, cond: Conditioning) -> np.ndarray:
        return self.M @ np.asarray(cond.c) + self.B @ self._scalar_values(cond)

    def eval(self, x, t, cond):
        x, _ = self._check(x, t, cond, allow_zero=True)
        return t * (x - self.mean(cond)) / (self.std**2 + t * t)

    def vjp(self, a, x, t, cond):
        self._check(x, t, cond, allow_zero=True)
        a = np.asarray(a, dtype=float)
        k = t / (self.std**2 + t * t)
        gs = self._scatter_scalars(-k * (self.B.T @ a), cond)
        return k * a, -k * (self.M.T @ a), gs

    def describe(self):
        return {**super().describe(), "std": self.std}


@dataclass(eq=False)
class LinearField(VelocityField):
    """Time-independent ``u = A x + C c``. Handy for hand-checkable step products."""

    A: np.ndarray
    C: np.ndarray | None = None
    name: str = "linear"

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.state_dim = self.A.shape[0]
        if self.C is None:
            self.C = np.zeros((self.state_dim, 0))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float)).reshape(self.state_dim, -1)
        self.cond_dim = self.C.shape[1]

    def eval(self, x, t, cond):
        x, c = self._check(x, t, cond, allow_zero=True)
        return x @ self.A.T + self.C @ c

    def vjp(self, a, x, t, cond):
        self._check(x, t, cond, allow_zero=True)
        a = np.asarray(a, dtype=float)
        return self.A.T @ a, self.C.T @ a, np.zeros(len(cond.scalars))


# --------------------------------------------------------------------------
# hand-written MLP


@dataclass(eq=False)
class MLP:
    """Dense network ``h -> tanh(h W + b)`` with a linear output layer.

    Weights are stored as ``(n_in, n_out)`` arrays.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float).reshape(-1) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ContractError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != b.size:
                raise ContractError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ContractError(f"layer {i}: input width {w.shape[0]} does not chain")

    @classmethod
    def init(cls, widths: Sequence[int], seed: int = 0, out_scale: float = 1.0) -> "MLP":
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            w = rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)
            if i == len(widths) - 2:
                w *= out_scale
            ws.append(w)
            bs.append(np.zeros(n_out))
        return cls(ws, bs)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def parameters(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters())

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def __call__(self, inputs):
        return mlp_forward_backward(self, inputs)[0]


def mlp_forward_backward(net: MLP, inputs, output_cotangent=None):
    """Forward pass and, given an output cotangent, the exact reverse pass.

    Returns ``(output, input_grad, (weight_grads, bias_grads))``; the gradient
    entries are None when no cotangent is supplied.  Inputs may be a single
    vector or a ``(batch, n_in)`` array; parameter gradients sum over the batch.
    """
    h = np.asarray(inputs, dtype=float)
    single = h.ndim == 1
    if single:
        h = h[None, :]
    if h.shape[1] != net.weights[0].shape[0]:
        raise ContractError(f"input width {h.shape[1]} != network input {net.weights[0].shape[0]}")
    acts = [h]
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = acts[-1] @ w + b
        acts.append(z if i == last else np.tanh(z))
    out = acts[-1]
    if output_cotangent is None:
        return (out[0] if single else out), None, None

    g = np.asarray(output_cotangent, dtype=float).reshape(out.shape)
    gws, gbs = [None] * len(net.weights), [None] * len(net.weights)
    for i in range(last, -1, -1):
        if i != last:
            g = g * (1.0 - acts[i + 1] ** 2)
        gws[i] = acts[i].T @ g
        gbs[i] = g.sum(axis=0)
        g = g @ net.weights[i].T
    return (out[0] if single else out), (g[0] if single else g), (gws, gbs)


# --------------------------------------------------------------------------
# denoisers and the EDM velocity wrapper


class Denoiser:
    """``D(x, sigma, cond)`` with its reverse-mode product."""

    state_dim: int
    cond_dim: int
    scalar_names: tuple[str, ...] = ()
    name = "denoiser"

    def denoise(self, x, sigma, cond): ...

    def denoise_vjp(self, g, x, sigma, cond): ...


@dataclass(eq=False)
class IdentityDenoiser(Denoiser):
    state_dim: int
    cond_dim: int = 0
    name: str = "identity"

    def denoise(self, x, sigma, cond):
        return np.array(x, dtype=float)

    def denoise_vjp(self, g, x, sigma, cond):
        return np.array(g, dtype=float), np.zeros(self.cond_dim), np.zeros(len(cond.scalars))


@dataclass(eq=False)
class MLPDenoiser(Denoiser):
    """EDM-preconditioned denoiser around an :class:`MLP`.

    Network input is ``[c_in x, c, scaled scalars, c_noise]``; output is
    ``D = c_skip x + c_out F(input)``.  Scalars are normalised as
    ``(s - offset) * scale`` before entering the network.
    """

    net: MLP
    state_dim: int
    cond_dim: int
    scalar_names: tuple[str, ...] = ()
    sigma_data: float = 0.5
    scalar_offsets: np.ndarray | None = None
    scalar_scales: np.ndarray | None = None
    name: str = "mlp-edm"

    def __post_init__(self):
        self.scalar_names = tuple(self.scalar_names)
        ns = len(self.scalar_names)
        self.scalar_offsets = np.zeros(ns) if self.scalar_offsets is None else np.asarray(self.scalar_offsets, float)
        self.scalar_scales = np.ones(ns) if self.scalar_scales is None else np.asarray(self.scalar_scales, float)
        n_in = self.state_dim + self.cond_dim + ns + 1
        if self.net.widths[0] != n_in or self.net.widths[-1] != self.state_dim:
            raise ContractError(f"network widths {self.net.widths} do not fit state/cond/scalar dims")

    @classmethod
    def create(cls, state_dim, cond_dim, hidden=(64, 64), scalar_names=(), seed=0, **kw):
        widths = [state_dim + cond_dim + len(scalar_names) + 1, *hidden, state_dim]
        return cls(MLP.init(widths, seed=seed), state_dim, cond_dim, tuple(scalar_names), **kw)

    def precond(self, sigma):
        sd2 = self.sigma_data**2
        s2 = np.square(sigma)
        c_skip = sd2 / (s2 + sd2)
        c_out = sigma * self.sigma_data / np.sqrt(s2 + sd2)
        c_in = 1.0 / np.sqrt(s2 + sd2)
        c_noise = np.log(sigma) / 4.0
        return c_skip, c_out, c_in, c_noise

    def features(self, x, sigma, cond_c, svals):
        """Network input rows; ``sigma``, ``cond_c`` and ``svals`` may be batched."""
        x = np.atleast_2d(x)
        n = x.shape[0]
        _, _, c_in, c_noise = self.precond(sigma)
        cols = [
            np.reshape(c_in, (-1, 1)) * x,
            np.broadcast_to(np.atleast_2d(cond_c), (n, self.cond_dim)),
            np.broadcast_to(np.atleast_2d((svals - self.scalar_offsets) * self.scalar_scales), (n, len(self.scalar_names))),
            np.broadcast_to(np.reshape(c_noise, (-1, 1)), (n, 1)),
        ]
        return np.concatenate(cols, axis=1)

    def _svals(self, cond):
        names = cond.names
        missing = [n for n in self.scalar_names if n not in names]
        if missing:
            raise ContractError(f"{self.name}: conditioning lacks scalars {missing}")
        return np.array([cond.scalar(n) for n in self.scalar_names], dtype=float)

    def denoise(self, x, sigma, cond):
        x = np.asarray(x, dtype=float)
        c_skip, c_out, _, _ = self.precond(sigma)
        f = self.net(self.features(x, sigma, np.asarray(cond.c), self._svals(cond)))
        d = c_skip * np.atleast_2d(x) + c_out * f
        return d[0] if x.ndim == 1 else d

    def denoise_vjp(self, g, x, sigma, cond):
        x = np.asarray(x, dtype=float)
        g = np.asarray(g, dtype=float)
        c_skip, c_out, c_in, _ = self.precond(sigma)
        inp = self.features(x, sigma, np.asarray(cond.c), self._svals(cond))
        _, gin, _ = mlp_forward_backward(self.net, inp, c_out * g[None, :])
        gin = gin[0]
        n, nc = self.state_dim, self.cond_dim
        gx = c_skip * g + c_in * gin[:n]
        gc = gin[n : n + nc].copy()
        g_own = gin[n + nc : n + nc + len(self.scalar_names)] * self.scalar_scales
        gs = np.zeros(len(cond.scalars))
        idx = {k: i for i, k in enumerate(cond.names)}
        for k, v in zip(self.scalar_names, g_own):
            gs[idx[k]] = v
        return gx, gc, gs

    def metadata(self) -> dict[str, Any]:
        return {
            "state_dim": self.state_dim,
            "cond_dim": self.cond_dim,
            "scalar_names": list(self.scalar_names),
            "sigma_data": self.sigma_data,
            "scalar_offsets": self.scalar_offsets.tolist(),
            "scalar_scales": self.scalar_scales.tolist(),
        }


@dataclass(eq=False)
class EDMField(VelocityField):
    """Probability-flow velocity ``u = (x - D(x, sigma=t, c)) / t`` of an EDM denoiser."""

    denoiser: Denoiser
    singular_at_zero = True

    def __post_init__(self):
        self.state_dim = self.denoiser.state_dim
        self.cond_dim = self.denoiser.cond_dim
        self.scalar_names = tuple(self.denoiser.scalar_names)
        self.name = f"edm[{self.denoiser.name}]"

    def eval(self, x, t, cond):
        x, _ = self._check(x, t, cond)
        return (x - self.denoiser.denoise(x, t, cond)) / t

    def vjp(self, a, x, t, cond):
        x, _ = self._check(x, t, cond)
        a = np.asarray(a, dtype=float)
        gx, gc, gs = self.denoiser.denoise_vjp(-a / t, x, t, cond)
        return a / t + gx, gc, gs


def edm_wrap(denoiser: Denoiser) -> EDMField:
    return EDMField(denoiser)


# --------------------------------------------------------------------------
# FGV1 checkpoints

FGV1 = b"FGV1"


def save_mlp(path, net: MLP) -> None:
    from .io import write_container

    # per layer: row-major weights, then biases
    ordered = []
    for w, b in zip(net.weights, net.biases):
        ordered += [w.reshape(-1), b]
    write_container(path, FGV1, [len(net.weights), *net.widths], np.concatenate(ordered))


def load_mlp(path) -> MLP:
    from .io import read_container

    ints, flat = read_container(path, FGV1)
    n_layers, widths = ints[0], ints[1:]
    if len(widths) != n_layers + 1:
        raise ContractError(f"{path}: header lists {len(widths)} widths for {n_layers} layers")
    expected = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    if flat.size != expected:
        raise ContractError(f"{path}: expected {expected} parameters, found {flat.size}")
    ws, bs, pos = [], [], 0
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        ws.append(flat[pos : pos + n_in * n_out].reshape(n_in, n_out).copy())
        pos += n_in * n_out
        bs.append(flat[pos : pos + n_out].copy())
        pos += n_out
    return MLP(ws, bs)


def save_denoiser(path, den: MLPDenoiser) -> None:
    """Write ``path`` (FGV1 weights) plus ``path.json`` with the input layout."""
    import json
    from pathlib import Path

    save_mlp(path, den.net)
    Path(str(path) + ".json").write_text(json.dumps(den.metadata(), indent=2, sort_keys=True) + "\n")


def load_denoiser(path, require_finite: bool = True) -> MLPDenoiser:
    import json
    from pathlib import Path

    meta_path = Path(str(path) + ".json")
    if not meta_path.exists():
        raise ConfigurationError(f"missing checkpoint sidecar {meta_path}")
    meta = json.loads(meta_path.read_text())
    net = load_mlp(path)
    if require_finite and not net.all_finite():
        raise ContractError(f"{path}: checkpoint contains non-finite parameters")
    return MLPDenoiser(
        net,
        int(meta["state_dim"]),
        int(meta["cond_dim"]),
        tuple(meta.get("scalar_names", ())),
        float(meta.get("sigma_data", 0.5)),
        np.asarray(meta.get("scalar_offsets") or [], float) if meta.get("scalar_names") else None,
        np.asarray(meta.get("scalar_scales") or [], float) if meta.get("scalar_names") else None,
    )
