"""Single-head scaled dot-product attention and the blocks built from it.

``attention_head(q, k, v) = softmax((q P_Q)(k P_K)^T / sqrt(F)) (v P_V)``.
The completion and fusion blocks add residual connections around it; there
is no layer norm, feed-forward sublayer, masking or dropout.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

# Incremented whenever a completion block runs; ablation tests read these.
CALLS: Counter = Counter()


@dataclass
class AttentionHeadParams:
    P_Q: Tensor
    P_K: Tensor
    P_V: Tensor

    @property
    def dim(self) -> int:
        return self.P_Q.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"P_Q": self.P_Q, "P_K": self.P_K, "P_V": self.P_V}

    @classmethod
    def identity(cls, F: int, requires_grad: bool = False) -> AttentionHeadParams:
        return cls(*(Tensor(np.eye(F), requires_grad=requires_grad) for _ in range(3)))


@dataclass
class CrossCompletionParams:
    head: AttentionHeadParams
    P_ca: Tensor  # I x (I + L)


@dataclass
class FusionParams:
    head: AttentionHeadParams


def attention_head(q: Tensor, k: Tensor, v: Tensor, params: AttentionHeadParams, weights_out: list | None = None) -> Tensor:
    """One attention head; ``weights_out`` (if given) receives the softmax matrix."""
    F = params.dim
    if q.shape[-1] != F or k.shape[-1] != F or v.shape[-1] != F:
        raise ShapeError(f"attention_head: feature dims {q.shape}, {k.shape}, {v.shape} vs F={F}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention_head: keys {k.shape} and values {v.shape} differ in length")
    Q = ad.matmul(q, params.P_Q)
    K = ad.matmul(k, params.P_K)
    V = ad.matmul(v, params.P_V)
    logits = ad.scale(ad.matmul(Q, ad.transpose(K)), 1.0 / math.sqrt(F))
    weights = ad.softmax_rows(logits)
    if weights_out is not None:
        weights_out.append(weights.data)
    return ad.matmul(weights, V)


def complete_image(z_o: Tensor, z_v: Tensor, params: CrossCompletionParams) -> Tensor:
    """OCR/image cross-attention completion; ``L x F``, ``I x F`` -> ``I x F``."""
    CALLS["complete_image"] += 1
    I, L = z_v.shape[-2], z_o.shape[-2]
    if params.P_ca.shape != (I, I + L):
        raise ShapeError(f"complete_image: P_ca is {params.P_ca.shape}, expected {(I, I + L)}")
    ocr_side = ad.add(attention_head(z_o, z_v, z_v, params.head), z_o)
    img_side = ad.add(attention_head(z_v, z_o, z_o, params.head), z_v)
    return ad.matmul(params.P_ca, ad.concat_rows(ocr_side, img_side))


def complete_text(z_t: Tensor, z_o: Tensor, params: AttentionHeadParams) -> Tensor:
    """Self-attention over the stacked text and OCR sequences; -> ``2L x F``."""
    CALLS["complete_text"] += 1
    if z_t.shape != z_o.shape:
        raise ShapeError(f"complete_text: text {z_t.shape} vs OCR {z_o.shape}")
    u = ad.concat_rows(z_t, z_o)
    return ad.add(attention_head(u, u, u, params), u)


def global_fusion(Z_v: Tensor, Z_t: Tensor, params: FusionParams, weights_out: list | None = None) -> Tensor:
    """Bidirectional cross-attention of image and text, mean-pooled to ``1 x F``."""
    if Z_v.shape[-1] != Z_t.shape[-1]:
        raise ShapeError(f"global_fusion: feature dims {Z_v.shape} vs {Z_t.shape}")
    img = ad.add(attention_head(Z_v, Z_t, Z_t, params.head, weights_out), Z_v)
    txt = ad.add(attention_head(Z_t, Z_v, Z_v, params.head, weights_out), Z_t)
    return ad.mean_pool_rows(ad.concat_rows(img, txt))


def export_weights_csv(weights: np.ndarray, path: str | Path) -> None:
    """Write an attention weight matrix row-major with 17 significant digits."""
    w = np.asarray(weights)
    if w.ndim != 2:
        raise ShapeError(f"export_weights_csv expects a matrix, got shape {w.shape}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in w:
            writer.writerow([format(float(x), ".17g") for x in row])
