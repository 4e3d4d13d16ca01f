"""Learned feature gates coupling the frozen image model to the music model.

Each coupled block owns one raw scalar; the effective gate is
alpha = sigmoid(raw), so the key/value blend

    K <- alpha * K_image + (1 - alpha) * K_music

is a convex combination by construction. raw = 0 starts every gate at 0.5.
A hard bypass flag short-circuits the blend entirely, which is the exact
alpha -> 0 limit and lets a gated model reproduce an ungated one bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class SynapsePlacement:
    """Where gates attach and whether blocks share one gate."""

    couple_encoder: bool = False
    couple_decoder: bool = True
    per_block: bool = True

    def __post_init__(self):
        if not (self.couple_encoder or self.couple_decoder):
            raise ValueError("placement must couple the encoder, the decoder, or both")

    def coupled_layers(self, n_encoder: int, n_decoder: int) -> list[str]:
        layers = []
        if self.couple_encoder:
            layers += [f"encoder.{i}" for i in range(n_encoder)]
        if self.couple_decoder:
            layers += [f"decoder.{i}" for i in range(n_decoder)]
        return layers


class SynapseParams:
    """One trainable raw gate scalar per coupled block (or one shared)."""

    def __init__(self, layers: list[str], per_block: bool = True,
                 init_raw: float = 0.0, dtype=np.float32, trainable: bool = True):
        self.layers = list(layers)
        self.per_block = per_block
        n_gates = len(self.layers) if per_block else 1
        self.raw = [
            Tensor(np.full((), init_raw, dtype=dtype), requires_grad=trainable)
            for _ in range(n_gates)
        ]
        self.bypass = False

    def _gate_index(self, layer_id: str) -> int:
        try:
            idx = self.layers.index(layer_id)
        except ValueError:
            raise IndexError(f"layer {layer_id!r} is not coupled (have {self.layers})") from None
        return idx if self.per_block else 0

    def gate(self, layer_id: str) -> Tensor:
        """sigmoid(raw) for the block's gate; stays inside (0, 1)."""
        return ad.sigmoid(self.raw[self._gate_index(layer_id)])

    def alphas(self) -> dict[str, float]:
        return {lid: float(self.gate(lid).data) for lid in self.layers}

    def tensors(self) -> dict[str, Tensor]:
        if self.per_block:
            return {f"synapse.raw.{lid}": r for lid, r in zip(self.layers, self.raw)}
        return {"synapse.raw.shared": self.raw[0]}


def gate(params: SynapseParams, layer_id: str) -> float:
    return float(params.gate(layer_id).data)


def fuse(k_m: Tensor, v_m: Tensor, k_i: Tensor, v_i: Tensor,
         alpha: float | Tensor) -> tuple[Tensor, Tensor]:
    """Convex blend of music and image key/value features with one gate."""
    if k_m.shape != k_i.shape or v_m.shape != v_i.shape:
        raise ValueError(
            f"fuse shape mismatch: K {k_m.shape} vs {k_i.shape}, V {v_m.shape} vs {v_i.shape}"
        )
    a = alpha if isinstance(alpha, Tensor) else Tensor(np.asarray(alpha, dtype=k_m.dtype))
    one = Tensor(np.ones((), dtype=k_m.dtype))
    k = a * k_i + (one - a) * k_m
    v = a * v_i + (one - a) * v_m
    return k, v


def _interp_matrix(m: int, s: int, dtype) -> np.ndarray:
    """s x m linear-interpolation matrix over uniform token coordinates."""
    w = np.zeros((s, m), dtype=dtype)
    if m == 1:
        w[:, 0] = 1.0
        return w
    pos = np.linspace(0.0, m - 1.0, s)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, m - 1)
    frac = pos - lo
    for row, (i, j, f) in enumerate(zip(lo, hi, frac)):
        w[row, i] += 1.0 - f
        w[row, j] += f
    return w


def resample_tokens(features: Tensor, target_tokens: int) -> Tensor:
    """Linearly resample the token axis of an (m, d) matrix to (s, d)."""
    m = features.shape[0]
    s = int(target_tokens)
    if m < 1 or s < 1:
        raise ValueError(f"token counts must be >= 1, got m={m}, s={s}")
    if m == s:
        return features
    w = Tensor(_interp_matrix(m, s, features.dtype))
    return ad.matmul(w, features)
