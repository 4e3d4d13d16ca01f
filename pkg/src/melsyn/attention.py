"""Single-head scaled dot-product attention, self- and cross- variants.

The self-attention path exposes its projected key/value matrices so a
frozen companion model can donate them; the cross-attention path accepts
such donated features and blends them into its own key/value matrices
through a scalar gate (see :mod:`melsyn.synapse`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import Rng


@dataclass
class AttentionWeights:
    """Projection matrices for one attention block."""

    wq: Tensor  # d_in x d_k
    wk: Tensor  # d_cond x d_k  (d_cond = d_in for self-attention)
    wv: Tensor  # d_cond x d_k
    wo: Tensor  # d_k x d_out

    @property
    def d_k(self) -> int:
        return self.wq.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}


def init_attention(rng: Rng, d_in: int, d_cond: int, d_k: int, d_out: int,
                   dtype=np.float32) -> AttentionWeights:
    def glorot(fan_in, fan_out):
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        return Tensor((rng.normal((fan_in, fan_out), dtype=np.float64) * scale).astype(dtype),
                      requires_grad=True)

    return AttentionWeights(
        wq=glorot(d_in, d_k),
        wk=glorot(d_cond, d_k),
        wv=glorot(d_cond, d_k),
        wo=glorot(d_k, d_out),
    )


@dataclass
class KVFeatures:
    """Key/value matrices tapped from one attention layer at one timestep."""

    k: Tensor  # tokens x d_k
    v: Tensor  # tokens x d_k
    layer_id: str
    timestep: int

    def __post_init__(self):
        if self.k.shape != self.v.shape:
            raise ValueError(f"K shape {self.k.shape} != V shape {self.v.shape}")

    @property
    def tokens(self) -> int:
        return self.k.shape[0]

    @property
    def d_k(self) -> int:
        return self.k.shape[1]


def attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Softmax(Q K^T / sqrt(d_k)) V with a row-stable softmax."""
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"d_k mismatch: Q has {q.shape[1]}, K has {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"K has {k.shape[0]} rows, V has {v.shape[0]}")
    scale = 1.0 / np.sqrt(q.shape[1])
    logits = ad.matmul(q, ad.transpose(k)) * scale
    weights = ad.softmax(logits, axis=-1)
    return ad.matmul(weights, v)


def self_attention(f: Tensor, w: AttentionWeights, layer_id: str = "",
                   timestep: int = 0) -> tuple[Tensor, KVFeatures]:
    """Project Q, K, V from the same token features; return output and tapped K/V."""
    q = ad.matmul(f, w.wq)
    k = ad.matmul(f, w.wk)
    v = ad.matmul(f, w.wv)
    out = ad.matmul(attend(q, k, v), w.wo)
    return out, KVFeatures(k=k, v=v, layer_id=layer_id, timestep=timestep)


def cross_attention(
    f: Tensor,
    c: Tensor,
    w: AttentionWeights,
    injected: KVFeatures | None = None,
    alpha: float | Tensor | None = None,
) -> Tensor:
    """Attend from token features ``f`` to conditioning ``c``.

    When ``injected`` features are present they are convexly blended into
    the key/value matrices: K <- alpha * K_inj + (1 - alpha) * K, same for V.
    The injected token count must already equal the conditioning length.
    """
    q = ad.matmul(f, w.wq)
    k = ad.matmul(c, w.wk)
    v = ad.matmul(c, w.wv)
    if injected is not None:
        if alpha is None:
            raise ValueError("injected features require an alpha gate")
        if injected.tokens != c.shape[0]:
            raise ValueError(
                f"injected features have {injected.tokens} tokens, conditioning has {c.shape[0]};"
                " resample before injection"
            )
        from .synapse import fuse  # local import: synapse builds on this module

        k, v = fuse(k, v, injected.k, injected.v, alpha)
    return ad.matmul(attend(q, k, v), w.wo)
