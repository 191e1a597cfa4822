"""Linear scalar functionals q(X_0) and their exact gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .core import ConfigurationError, ContractError, StateVector, as_state

KINDS = ("component", "patch_mean", "weighted_global_mean")


@dataclass(frozen=True, eq=False)
class QuantitySpec:
    """What to measure on a generated sample.

    ``channel`` selects a block along the leading axis of a multi-channel state
    (shape ``(n_channels, ...)``); ``index``/``mask`` then address that block.
    Latitude weights use ``latitudes`` if given, otherwise the state's grid.
    """

    kind: str
    index: int | tuple[int, ...] | None = None
    mask: Any = None
    lat_weighted: bool = False
    latitudes: tuple[float, ...] | None = None
    channel: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown quantity kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "component" and self.index is None:
            raise ConfigurationError("component quantity needs an index")
        if self.kind == "patch_mean" and self.mask is None:
            raise ConfigurationError("patch_mean quantity needs a mask")

    # -- internals ---------------------------------------------------------

    def _block(self, x0: StateVector) -> tuple[int, tuple[int, ...]]:
        if self.channel is None:
            return 0, x0.shape
        if len(x0.shape) < 2 or not 0 <= self.channel < x0.shape[0]:
            raise ContractError(f"channel {self.channel} not addressable in state shape {x0.shape}")
        spatial = x0.shape[1:]
        return self.channel * int(np.prod(spatial)), spatial

    def _local_weights(self, x0: StateVector, spatial: tuple[int, ...]) -> np.ndarray:
        n = int(np.prod(spatial))
        if self.kind == "component":
            idx = self.index
            try:
                flat = int(np.ravel_multi_index(idx, spatial)) if isinstance(idx, (tuple, list)) else int(idx)
            except ValueError as exc:
                raise ContractError(f"component index {idx} outside state shape {spatial}") from exc
            if not 0 <= flat < n:
                raise ContractError(f"component index {idx} outside state of size {n}")
            w = np.zeros(n)
            w[flat] = 1.0
            return w
        if self.kind == "patch_mean":
            m = np.asarray(self.mask)
            if m.dtype == bool:
                if m.size != n:
                    raise ContractError(f"mask has {m.size} cells, state block has {n}")
                sel = m.reshape(-1)
            else:
                sel = np.zeros(n, dtype=bool)
                idx = m.reshape(-1).astype(int)
                if idx.size and (idx.min() < 0 or idx.max() >= n):
                    raise ContractError("mask index outside the state")
                sel[idx] = True
            if not sel.any():
                raise ContractError("patch mask selects no cells")
            return sel.astype(float)
        # weighted_global_mean
        if not self.lat_weighted:
            return np.ones(n)
        lats = self.latitudes
        if lats is None:
            if x0.grid is None or self.channel is not None:
                raise ContractError("latitude weighting needs latitudes or a gridded state")
            lats = x0.grid.lats
        lats = np.asarray(lats, dtype=float)
        if n % lats.size:
            raise ContractError(f"{lats.size} latitude rows do not tile a block of {n} cells")
        w = np.repeat(np.cos(np.deg2rad(lats)), n // lats.size)
        w = np.where(np.abs(w) < 1e-15, 0.0, w)
        if np.any(w < 0) or not np.any(w > 0):
            raise ContractError("latitude weights must be nonnegative and not all zero")
        return w

    def raw_weights(self, x0) -> np.ndarray:
        """Unnormalised full-length weights (zero outside the selected channel)."""
        x0 = as_state(x0)
        start, spatial = self._block(x0)
        local = self._local_weights(x0, spatial)
        w = np.zeros(x0.size)
        w[start : start + local.size] = local
        return w

    @classmethod
    def from_json(cls, obj: dict) -> "QuantitySpec":
        obj = dict(obj)
        kind = obj.pop("kind", None)
        mask = obj.pop("mask", None)
        if "rows" in obj or "cols" in obj:
            shape = obj.pop("grid_shape")
            rows = obj.pop("rows", [0, shape[0]])
            cols = obj.pop("cols", [0, shape[1]])
            m = np.zeros(shape, dtype=bool)
            m[rows[0] : rows[1], cols[0] : cols[1]] = True
            mask = m
        elif mask is not None:
            mask = np.asarray(mask)
        index = obj.pop("index", None)
        if isinstance(index, list):
            index = tuple(index)
        lats = obj.pop("latitudes", None)
        spec = cls(
            kind=kind,
            index=index,
            mask=mask,
            lat_weighted=bool(obj.pop("lat_weighted", False)),
            latitudes=tuple(lats) if lats is not None else None,
            channel=obj.pop("channel", None),
        )
        if obj:
            raise ConfigurationError(f"unknown quantity keys {sorted(obj)}")
        return spec

    def to_json(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind}
        if self.index is not None:
            out["index"] = list(self.index) if isinstance(self.index, tuple) else self.index
        if self.mask is not None:
            out["mask"] = np.asarray(self.mask).tolist()
        if self.lat_weighted:
            out["lat_weighted"] = True
        if self.latitudes is not None:
            out["latitudes"] = list(self.latitudes)
        if self.channel is not None:
            out["channel"] = self.channel
        return out


def evaluate(spec: QuantitySpec, x0) -> float:
    x0 = as_state(x0)
    x = np.asarray(x0)
    w = spec.raw_weights(x0)
    if spec.kind == "component":
        return float(x[np.flatnonzero(w)[0]])
    if spec.kind == "patch_mean":
        return float(np.mean(x[w > 0]))
    if not spec.lat_weighted:
        return float(np.mean(x[w > 0])) if spec.channel is not None else float(np.mean(x))
    return float(np.dot(w, x) / np.sum(w))


def gradient(spec: QuantitySpec, x0) -> StateVector:
    """dq/dX_0; constant in ``x0`` because every shipped quantity is linear."""
    x0 = as_state(x0)
    w = spec.raw_weights(x0)
    return x0.like(w / np.sum(w))
