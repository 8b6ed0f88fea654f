"""Small trainable stand-ins for the image and text encoders.

Both encoders are one projection/embedding followed by a single residual
self-attention mixing layer.  Text and OCR share one :class:`TextEncoderParams`
object; OCR sequences get the reserved marker token prepended, so an image
without OCR still yields a full ``L x F`` representation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attention import AttentionHeadParams, attention_head
from .autodiff import ShapeError, Tensor

PAD_ID = 0
OCR_ID = 1


@dataclass
class ImageEncoderParams:
    W_embed: Tensor  # P x F
    mix: AttentionHeadParams


@dataclass
class TextEncoderParams:
    E: Tensor  # V x F
    mix: AttentionHeadParams


def _self_mix(u: Tensor, head: AttentionHeadParams) -> Tensor:
    return ad.add(attention_head(u, u, u, head), u)


def encode_image(patches, params: ImageEncoderParams, num_patches: int | None = None) -> Tensor:
    """``[B x] I x P`` raw patches -> ``[B x] I x F``."""
    x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=np.float64))
    P = params.W_embed.shape[0]
    if x.shape[-1] != P:
        raise ShapeError(f"encode_image: patch length {x.shape[-1]}, expected {P}")
    if num_patches is not None and x.shape[-2] != num_patches:
        raise ShapeError(f"encode_image: {x.shape[-2]} patches, expected {num_patches}")
    return _self_mix(ad.matmul(x, params.W_embed), params.mix)


def pad_tokens(tokens: Sequence[int], length: int, is_ocr: bool = False) -> list[int]:
    """Prepend the OCR marker if needed, then truncate/pad with ``PAD_ID`` to ``length``."""
    seq = ([OCR_ID] if is_ocr else []) + [int(t) for t in tokens]
    seq = seq[:length]
    return seq + [PAD_ID] * (length - len(seq))


def encode_text(tokens, params: TextEncoderParams, is_ocr: bool = False, length: int | None = None) -> Tensor:
    """Token ids -> ``L x F``.

    ``tokens`` is either one id list (padded here to ``length``) or an already
    padded ``B x L`` integer array for batched encoding.
    """
    arr = np.asarray(tokens) if not isinstance(tokens, list) else None
    if arr is not None and arr.ndim == 2:
        ids = arr.astype(np.int64)
    else:
        if length is None:
            raise ValueError("encode_text: length is required for a single token list")
        ids = np.asarray(pad_tokens(list(tokens), length, is_ocr), dtype=np.int64)
        if not is_ocr and not len(tokens):
            raise ValueError("encode_text: empty text")
    V = params.E.shape[0]
    if ids.size and ids.max() >= V:
        raise ValueError(f"encode_text: token id {int(ids.max())} >= vocabulary size {V}")
    return _self_mix(ad.embedding(params.E, ids), params.mix)
