"""Overcomplete denoising autoencoder acting on latent codes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, Tensor


@dataclass
class OdaParams:
    enc_w: np.ndarray  # (D, H)
    enc_b: np.ndarray  # (1, H)
    dec_w: np.ndarray  # (H, D)
    dec_b: np.ndarray  # (1, D)
    activation: str = "leaky_relu"
    overcomplete: bool = True

    def __post_init__(self):
        d, h = self.enc_w.shape
        if self.dec_w.shape != (h, d):
            raise DimensionError(f"decoder shape {self.dec_w.shape} does not mirror encoder {(d, h)}")
        if self.overcomplete and h <= d:
            raise ValueError(f"hidden width {h} must exceed input width {d}")
        if self.activation not in ("leaky_relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def dim(self) -> int:
        return self.enc_w.shape[0]

    @property
    def hidden(self) -> int:
        return self.enc_w.shape[1]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {"oda.enc.W": self.enc_w, "oda.enc.b": self.enc_b,
                "oda.dec.W": self.dec_w, "oda.dec.b": self.dec_b}

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "OdaParams":
        return OdaParams(arrays["oda.enc.W"], arrays["oda.enc.b"], arrays["oda.dec.W"],
                         arrays["oda.dec.b"], self.activation, self.overcomplete)


MIN_HIDDEN = 64
IDENTITY_SHIFT = 10.0


def default_hidden(dim: int, overcomplete: bool = True) -> int:
    return max(MIN_HIDDEN, 2 * dim) if overcomplete else dim


def init_oda(dim: int, rng: np.random.Generator, hidden: int | None = None,
             overcomplete: bool = True, identity: bool = True,
             noise: float = 1e-2) -> OdaParams:
    """Near-identity autoencoder: small uniform weights around an identity core.

    With ``hidden >= 2*dim`` the first 2*dim units hold the exact pair
    ``x = (lrelu(x) - lrelu(-x)) / (1 + slope)``.  Narrower nets use a biased
    linear regime instead, exact for inputs above ``-IDENTITY_SHIFT``.
    """
    if hidden is None:
        hidden = default_hidden(dim, overcomplete)
    enc_w = rng.uniform(-noise, noise, size=(dim, hidden))
    dec_w = rng.uniform(-noise, noise, size=(hidden, dim))
    enc_b = np.zeros((1, hidden))
    dec_b = np.zeros((1, dim))
    if identity:
        eye = np.eye(dim)
        if hidden >= 2 * dim:
            enc_w[:, :2 * dim] += np.hstack([eye, -eye])
            dec_w[:2 * dim] += np.vstack([eye, -eye]) / (1.0 + dc.LEAKY_SLOPE)
        elif hidden >= dim:
            enc_w[:, :dim] += eye
            dec_w[:dim] += eye
            enc_b[0, :dim] = IDENTITY_SHIFT
            dec_b[0] = -IDENTITY_SHIFT
    return OdaParams(enc_w=enc_w, enc_b=enc_b, dec_w=dec_w, dec_b=dec_b,
                     overcomplete=overcomplete)


def bind(params: OdaParams, tape: dc.Tape | None, trainable: bool) -> dict[str, Tensor]:
    arrays = params.named_arrays()
    if tape is None:
        return {k: Tensor(v) for k, v in arrays.items()}
    make = tape.leaf if trainable else tape.constant
    return {k: make(v, name=k) for k, v in arrays.items()}


def reconstruct(z, params: OdaParams, weights: Mapping[str, Tensor] | None = None) -> Tensor:
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.shape[1] != params.dim:
        raise DimensionError(f"autoencoder expects {params.dim} columns, got {z.shape[1]}")
    if weights is None:
        weights = bind(params, z.tape, trainable=False)
    h = dc.add(dc.matmul(z, weights["oda.enc.W"]), weights["oda.enc.b"])
    if params.activation == "leaky_relu":
        h = dc.leaky_relu(h)
    return dc.add(dc.matmul(h, weights["oda.dec.W"]), weights["oda.dec.b"])
