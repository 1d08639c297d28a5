"""Parameter registry and small trainable blocks shared by the models.

The recurrent and convolutional blocks are fused primitives: one tape node per
call, with hand-derived backward passes. That keeps the tape short enough to
train on a CPU while every gradient stays checkable by finite differences.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class ParamSet:
    """Named registry of trainable tensors, the unit of checkpointing."""

    def __init__(self, precision="float32"):
        self.dtype = ad.resolve_dtype(precision)
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(array, requires_grad=True, dtype=self.dtype)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def items(self):
        for name in self.names():
            yield name, self._tensors[name]

    def as_dict(self) -> dict[str, Tensor]:
        return {name: self._tensors[name] for name in self.names()}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Replace parameter values in place, keeping tensor identity."""
        missing = set(self._tensors) - set(arrays)
        extra = set(arrays) - set(self._tensors)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, t in self._tensors.items():
            arr = np.asarray(arrays[name])
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
            t.data[...] = arr.astype(self.dtype, copy=False)

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.size for t in self._tensors.values())


def _init_matrix(rng: np.random.Generator, din: int, dout: int, scale: float | None = None) -> np.ndarray:
    s = scale if scale is not None else 1.0 / math.sqrt(din)
    return rng.standard_normal((din, dout)) * s


class Linear:
    def __init__(self, ps: ParamSet, name: str, din: int, dout: int,
                 rng: np.random.Generator, bias: bool = True,
                 w_init: np.ndarray | None = None):
        w = w_init if w_init is not None else _init_matrix(rng, din, dout)
        self.w = ps.add(f"{name}.w", w)
        self.b = ps.add(f"{name}.b", np.zeros((1, dout))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.w)
        return ad.add(y, self.b) if self.b is not None else y


class Embedding:
    def __init__(self, ps: ParamSet, name: str, n: int, d: int, rng: np.random.Generator):
        self.table = ps.add(f"{name}.table", rng.standard_normal((n, d)) / math.sqrt(d))

    def __call__(self, indices) -> Tensor:
        return ad.take_rows(self.table, indices)


class LayerNorm:
    def __init__(self, ps: ParamSet, name: str, d: int, eps: float = 1e-5):
        self.gain = ps.add(f"{name}.gain", np.ones((1, d)))
        self.bias = ps.add(f"{name}.bias", np.zeros((1, d)))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class Conv1dSame:
    """1-D convolution over time with zero 'same' padding, fused into one node."""

    def __init__(self, ps: ParamSet, name: str, kernel: int, cin: int, cout: int,
                 rng: np.random.Generator):
        if kernel < 1 or kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and positive, got {kernel}")
        self.kernel = kernel
        scale = 1.0 / math.sqrt(kernel * cin)
        self.w = ps.add(f"{name}.w", rng.standard_normal((kernel, cin, cout)) * scale)
        self.b = ps.add(f"{name}.b", np.zeros((1, cout)))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.w.shape[1]:
            raise ShapeError(f"conv1d: expected (T, {self.w.shape[1]}), got shape {x.shape}")
        k = self.kernel
        pad = k // 2
        T = x.shape[0]
        wd = self.w.data
        xp = np.zeros((T + k - 1, x.shape[1]), dtype=x.dtype)
        xp[pad:pad + T] = x.data
        value = np.repeat(self.b.data, T, axis=0)
        for j in range(k):
            value = value + xp[j:j + T] @ wd[j]

        def vjp(g):
            dxp = np.zeros_like(xp)
            dw = np.zeros_like(wd)
            for j in range(k):
                dxp[j:j + T] += g @ wd[j].T
                dw[j] = xp[j:j + T].T @ g
            db = g.sum(axis=0, keepdims=True)
            return (dxp[pad:pad + T], dw, db)

        return ad.apply([x, self.w, self.b], value, vjp)


def _gru_cell(gx_row: np.ndarray, h: np.ndarray, wh: np.ndarray, bh: np.ndarray,
              H: int) -> tuple[np.ndarray, tuple]:
    """One GRU step. gx_row is the precomputed input contribution (3H,)."""
    gh = h @ wh + bh
    r = 1.0 / (1.0 + np.exp(-(gx_row[:H] + gh[:H])))
    z = 1.0 / (1.0 + np.exp(-(gx_row[H:2 * H] + gh[H:2 * H])))
    ghn = gh[2 * H:]
    n = np.tanh(gx_row[2 * H:] + r * ghn)
    h_new = (1.0 - z) * n + z * h
    return h_new, (h, r, z, n, ghn)


class GRULayer:
    """Unidirectional gated recurrent layer, the whole sequence as one node."""

    def __init__(self, ps: ParamSet, name: str, din: int, dh: int, rng: np.random.Generator):
        self.dh = dh
        self.wx = ps.add(f"{name}.wx", _init_matrix(rng, din, 3 * dh))
        self.bx = ps.add(f"{name}.bx", np.zeros((1, 3 * dh)))
        self.wh = ps.add(f"{name}.wh", _init_matrix(rng, dh, 3 * dh))
        self.bh = ps.add(f"{name}.bh", np.zeros((1, 3 * dh)))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.wx.shape[0]:
            raise ShapeError(f"gru: expected (T, {self.wx.shape[0]}), got shape {x.shape}")
        gx = ad.add(ad.matmul(x, self.wx), self.bx)
        return self._sequence(gx)

    def _sequence(self, gx: Tensor) -> Tensor:
        H = self.dh
        whT, bhT = self.wh, self.bh
        wh = whT.data
        bh = bhT.data[0]
        T = gx.shape[0]
        dtype = gx.dtype
        hs = np.zeros((T, H), dtype=dtype)
        caches = []
        h = np.zeros(H, dtype=dtype)
        gxd = gx.data
        for t in range(T):
            h, cache = _gru_cell(gxd[t], h, wh, bh, H)
            hs[t] = h
            caches.append(cache)

        def vjp(g):
            dgx = np.zeros_like(gxd)
            dwh = np.zeros_like(wh)
            dbh = np.zeros_like(bh)
            dh = np.zeros(H, dtype=dtype)
            for t in range(T - 1, -1, -1):
                h_prev, r, z, n, ghn = caches[t]
                dh = dh + g[t]
                dz = dh * (h_prev - n)
                dn = dh * (1.0 - z)
                dh_prev = dh * z
                dan = dn * (1.0 - n * n)
                dr = dan * ghn
                dghn = dan * r
                dar = dr * r * (1.0 - r)
                daz = dz * z * (1.0 - z)
                dgx[t, :H] = dar
                dgx[t, H:2 * H] = daz
                dgx[t, 2 * H:] = dan
                dgh = np.concatenate([dar, daz, dghn])
                dwh += np.outer(h_prev, dgh)
                dbh += dgh
                dh = dh_prev + dgh @ wh.T
            return (dgx, dwh, dbh[None, :])

        return ad.apply([gx, whT, bhT], hs, vjp)

    def step(self, x_row: np.ndarray, h: np.ndarray) -> np.ndarray:
        """Plain numpy step for incremental decoding; no tape involvement."""
        gx = x_row @ self.wx.data + self.bx.data[0]
        h_new, _ = _gru_cell(gx, h, self.wh.data, self.bh.data[0], self.dh)
        return h_new
