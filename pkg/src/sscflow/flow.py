"""Stacked affine coupling layers on the (features ++ label block) vector."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, Tensor

SCALE_BOUND = 2.0


@dataclass
class CouplingLayer:
    """One affine coupling step.

    ``cond`` columns pass through unchanged and feed the scale/shift nets;
    ``trans`` columns are scaled by ``exp(s(x_cond))`` and shifted by ``t(x_cond)``.
    """

    cond: np.ndarray
    trans: np.ndarray
    # net name ("s" or "t") -> list of (W, b) per dense layer
    nets: dict[str, list[tuple[np.ndarray, np.ndarray]]]

    def __post_init__(self):
        self.cond = np.asarray(self.cond, dtype=np.intp)
        self.trans = np.asarray(self.trans, dtype=np.intp)
        if self.cond.size == 0 or self.trans.size == 0:
            raise ValueError("split pattern needs at least one coordinate on each side")
        if np.intersect1d(self.cond, self.trans).size:
            raise ValueError("split parts overlap")
        width = self.cond.size + self.trans.size
        order = np.concatenate([self.cond, self.trans])
        if not np.array_equal(np.sort(order), np.arange(width)):
            raise ValueError("split pattern must cover every coordinate exactly once")
        # columns of [cond | trans] back to natural order
        self.unperm = np.argsort(order)

    @property
    def dim(self) -> int:
        return self.cond.size + self.trans.size


@dataclass
class FlowParams:
    layers: list[CouplingLayer]
    hidden: int = 0

    def __post_init__(self):
        k = len(self.layers)
        if k < 2 or k % 2:
            raise ValueError(f"need an even number (>= 2) of coupling layers, got {k}")
        for a, b in zip(self.layers, self.layers[1:]):
            if not (np.array_equal(np.sort(a.cond), np.sort(b.trans))
                    and np.array_equal(np.sort(a.trans), np.sort(b.cond))):
                raise ValueError("consecutive layers must use complementary splits")

    @property
    def dim(self) -> int:
        return self.layers[0].dim

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for li, layer in enumerate(self.layers):
            for net, dense in layer.nets.items():
                for j, (w, b) in enumerate(dense):
                    out[f"flow.{li}.{net}.{j}.W"] = w
                    out[f"flow.{li}.{net}.{j}.b"] = b
        return out

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "FlowParams":
        layers = []
        for li, layer in enumerate(self.layers):
            nets = {}
            for net, dense in layer.nets.items():
                nets[net] = [(arrays[f"flow.{li}.{net}.{j}.W"], arrays[f"flow.{li}.{net}.{j}.b"])
                             for j in range(len(dense))]
            layers.append(CouplingLayer(layer.cond, layer.trans, nets))
        return FlowParams(layers, hidden=self.hidden)


def half_split(dim: int) -> tuple[np.ndarray, np.ndarray]:
    if dim < 2:
        raise ValueError(f"coupling needs at least 2 coordinates, got {dim}")
    h = dim // 2
    return np.arange(h), np.arange(h, dim)


def init_flow(dim: int, rng: np.random.Generator, n_layers: int = 4,
              hidden: int | None = None) -> FlowParams:
    """Identity-at-start flow: output layers of s and t are zero."""
    if hidden is None:
        hidden = max(32, 4 * dim)
    a, b = half_split(dim)
    layers = []
    for k in range(n_layers):
        cond, trans = (a, b) if k % 2 == 0 else (b, a)
        nets = {}
        for net in ("s", "t"):
            sizes = [cond.size, hidden, hidden, trans.size]
            dense = []
            for j, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
                if j == len(sizes) - 2:
                    w = np.zeros((fan_in, fan_out))
                else:
                    bound = 1.0 / np.sqrt(fan_in)
                    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                dense.append((w, np.zeros((1, fan_out))))
            nets[net] = dense
        layers.append(CouplingLayer(cond, trans, nets))
    return FlowParams(layers, hidden=hidden)


def bind(params: FlowParams, tape: dc.Tape | None, trainable: bool) -> dict[str, Tensor]:
    """Wrap the arrays as tape leaves (trainable) or constants."""
    arrays = params.named_arrays()
    if tape is None:
        return {k: Tensor(v) for k, v in arrays.items()}
    make = tape.leaf if trainable else tape.constant
    return {k: make(v, name=k) for k, v in arrays.items()}


def _mlp(x: Tensor, weights: Mapping[str, Tensor], prefix: str, depth: int) -> Tensor:
    h = x
    for j in range(depth):
        h = dc.add(dc.matmul(h, weights[f"{prefix}.{j}.W"]), weights[f"{prefix}.{j}.b"])
        if j < depth - 1:
            h = dc.leaky_relu(h)
    return h


def _scale_shift(layer: CouplingLayer, li: int, x1: Tensor, weights: Mapping[str, Tensor]):
    raw_s = _mlp(x1, weights, f"flow.{li}.s", len(layer.nets["s"]))
    s = dc.scale(dc.tanh(raw_s), SCALE_BOUND)
    t = _mlp(x1, weights, f"flow.{li}.t", len(layer.nets["t"]))
    return s, t


def coupling_forward(layer: CouplingLayer, li: int, x: Tensor, weights):
    x1 = dc.split_cols(x, layer.cond)
    x2 = dc.split_cols(x, layer.trans)
    s, t = _scale_shift(layer, li, x1, weights)
    z2 = dc.add(dc.hadamard(x2, dc.exp(s)), t)
    z = dc.split_cols(dc.concat_cols(x1, z2), layer.unperm)
    return z, dc.sum(s, axis=1)


def coupling_inverse(layer: CouplingLayer, li: int, z: Tensor, weights):
    z1 = dc.split_cols(z, layer.cond)
    z2 = dc.split_cols(z, layer.trans)
    s, t = _scale_shift(layer, li, z1, weights)
    x2 = dc.hadamard(dc.sub(z2, t), dc.exp(dc.scale(s, -1.0)))
    x = dc.split_cols(dc.concat_cols(z1, x2), layer.unperm)
    return x, dc.sum(s, axis=1)


def _check_input(x: Tensor, params: FlowParams) -> None:
    if x.shape[1] != params.dim:
        raise DimensionError(f"flow expects {params.dim} columns, got {x.shape[1]}")


def forward(x, params: FlowParams, weights: Mapping[str, Tensor] | None = None):
    """Map inputs to latents.  Returns ``(z, logdet)`` with logdet of shape (n, 1)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    _check_input(x, params)
    if weights is None:
        weights = bind(params, x.tape, trainable=False)
    logdet = None
    z = x
    for li, layer in enumerate(params.layers):
        z, ld = coupling_forward(layer, li, z, weights)
        logdet = ld if logdet is None else dc.add(logdet, ld)
    dc.check_finite(z, "flow forward")
    return z, logdet


def inverse(z, params: FlowParams, weights: Mapping[str, Tensor] | None = None,
            return_logdet: bool = False):
    """Map latents back to inputs.

    With ``return_logdet`` also returns the log|det| of the *forward* map at the
    reconstructed input, which equals the sum of the scale outputs seen here.
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    _check_input(z, params)
    if weights is None:
        weights = bind(params, z.tape, trainable=False)
    x = z
    logdet = None
    for li in reversed(range(len(params.layers))):
        x, ld = coupling_inverse(params.layers[li], li, x, weights)
        logdet = ld if logdet is None else dc.add(logdet, ld)
    dc.check_finite(x, "flow inverse")
    if return_logdet:
        return x, logdet
    return x


def assemble_input(x_dot, y_dot):
    """Concatenate imputed features and the label block, features first."""
    x_dot = x_dot if isinstance(x_dot, Tensor) else Tensor(x_dot)
    y_dot = y_dot if isinstance(y_dot, Tensor) else Tensor(y_dot)
    if y_dot.shape[1] == 0:
        raise DimensionError("label block must have at least one column")
    if x_dot.shape[0] != y_dot.shape[0]:
        raise DimensionError(f"row mismatch: {x_dot.shape[0]} features vs {y_dot.shape[0]} labels")
    return dc.concat_cols(x_dot, y_dot)
