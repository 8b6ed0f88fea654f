"""Shared/private decomposition, the exclusive loss and soft contrastive alignment."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attention import CALLS
from .autodiff import ShapeError, Tensor

WEIGHT_MODES = ("similarity", "literal")


@dataclass(frozen=True)
class CategorySchema:
    """Ordered sentiment categories with their integer mapping ``M``.

    ``weight_mode`` picks how pair weights are read off ``M``: ``similarity``
    gives 1 for identical categories and 0 for the most distant ones;
    ``literal`` is the plain normalized distance.
    """

    name: str
    labels: tuple[str, ...]
    mapping: tuple[int, ...]
    weight_mode: str = "similarity"

    def __post_init__(self):
        if len(self.labels) != len(self.mapping):
            raise ValueError("schema: labels and mapping differ in length")
        if len(set(self.mapping)) != len(self.mapping):
            raise ValueError(f"schema {self.name!r}: mapping values must be distinct")
        if len(self.labels) < 2:
            raise ValueError(f"schema {self.name!r}: need at least two categories")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"unknown weight mode {self.weight_mode!r}")

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    @property
    def span(self) -> int:
        return max(self.mapping) - min(self.mapping)

    def index(self, category: int | str) -> int:
        if isinstance(category, str):
            try:
                return self.labels.index(category)
            except ValueError:
                raise KeyError(f"unknown category {category!r} for schema {self.name!r}") from None
        if not 0 <= category < self.num_classes:
            raise KeyError(f"category index {category} out of range for schema {self.name!r}")
        return int(category)

    def with_mode(self, weight_mode: str) -> CategorySchema:
        return CategorySchema(self.name, self.labels, self.mapping, weight_mode)

    def weight_matrix(self, labels: Sequence[int]) -> np.ndarray:
        """Pair weights for every (anchor, candidate) combination in a batch."""
        m = np.array([self.mapping[self.index(c)] for c in labels], dtype=np.float64)
        dist = np.abs(m[:, None] - m[None, :]) / abs(self.span)
        return 1.0 - dist if self.weight_mode == "similarity" else dist

    def to_json(self) -> dict:
        return {"name": self.name, "categories": [{"label": l, "m": m} for l, m in zip(self.labels, self.mapping)]}

    @classmethod
    def from_json(cls, obj: dict, weight_mode: str = "similarity") -> CategorySchema:
        cats = obj["categories"]
        return cls(obj["name"], tuple(c["label"] for c in cats), tuple(int(c["m"]) for c in cats), weight_mode)


SCHEMAS = {
    "mvsa": CategorySchema("mvsa", ("Positive", "Neutral", "Negative"), (0, 1, 2)),
    "tumemo": CategorySchema("tumemo", ("Love", "Happy", "Calm", "Bored", "Sad", "Angry", "Fear"), (0, 1, 2, 3, 4, 5, 6)),
    "hfm": CategorySchema("hfm", ("Positive", "Negative"), (0, 1)),
}


def load_schema(name_or_path: str, weight_mode: str = "similarity") -> CategorySchema:
    """Built-in schema by name, or a JSON file ``{name, categories: [{label, m}]}``."""
    if name_or_path in SCHEMAS:
        return SCHEMAS[name_or_path].with_mode(weight_mode)
    return CategorySchema.from_json(json.loads(Path(name_or_path).read_text()), weight_mode)


def pair_weight(schema: CategorySchema, c_i: int | str, c_j: int | str) -> float:
    d = abs(schema.mapping[schema.index(c_i)] - schema.mapping[schema.index(c_j)]) / abs(schema.span)
    return 1.0 - d if schema.weight_mode == "similarity" else d


@dataclass
class DecompositionParams:
    """Raw (unconstrained) projectors; rows are normalized on every use."""

    P_s_v: Tensor
    P_p_v: Tensor
    P_s_t: Tensor
    P_p_t: Tensor

    def normalized(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return tuple(ad.row_l2_normalize(p) for p in (self.P_s_v, self.P_p_v, self.P_s_t, self.P_p_t))


@dataclass
class SubRepresentations:
    s_v: np.ndarray
    s_t: np.ndarray
    p_v: np.ndarray
    p_t: np.ndarray


def decompose(Z: Tensor, P_s: Tensor, P_p: Tensor, normalized: bool = False) -> tuple[Tensor, Tensor]:
    """Project ``Z`` with both projectors and mean-pool: ``(shared, private)``.

    Pass ``normalized=True`` when the projectors are already row-normalized.
    """
    CALLS["decompose"] += 1
    if Z.shape[-1] != P_s.shape[0] or Z.shape[-1] != P_p.shape[0]:
        raise ShapeError(f"decompose: Z {Z.shape} vs projectors {P_s.shape}, {P_p.shape}")
    if not normalized:
        P_s, P_p = ad.row_l2_normalize(P_s), ad.row_l2_normalize(P_p)
    s = ad.mean_pool_rows(ad.matmul(Z, P_s))
    p = ad.mean_pool_rows(ad.matmul(Z, P_p))
    return s, p


def exclusive_loss(params: DecompositionParams, sigma: float) -> Tensor:
    """Hinge pushing each modality's normalized shared/private projectors apart."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    s_v, p_v, s_t, p_t = params.normalized()
    return exclusive_loss_from_normalized(s_v, p_v, s_t, p_t, sigma)


def exclusive_loss_from_normalized(s_v: Tensor, p_v: Tensor, s_t: Tensor, p_t: Tensor, sigma: float) -> Tensor:
    image_term = ad.hinge(sigma, ad.frobenius_norm(ad.sub(s_v, p_v)))
    text_term = ad.hinge(sigma, ad.frobenius_norm(ad.sub(s_t, p_t)))
    return ad.add(image_term, text_term)


def soft_contrastive_loss(
    S_v: Tensor,
    S_t: Tensor,
    labels: Sequence[int],
    schema: CategorySchema,
    tau: float,
    normalize: bool = True,
    symmetric: bool = False,
    weights: np.ndarray | None = None,
) -> Tensor:
    """Batch mean of ``-log(sum_j w_ij e^{s_i.s_j/tau} / sum_j e^{s_i.s_j/tau})``.

    Anchors are image rows, candidates text rows.  ``weights`` overrides the
    schema-derived matrix.  Anchors whose weight row is all zero (possible
    only in literal mode) are left out of the mean.
    """
    if S_v.shape != S_t.shape or S_v.data.ndim != 2:
        raise ShapeError(f"soft_contrastive_loss: {S_v.shape} vs {S_t.shape}")
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    B = S_v.shape[0]
    if len(labels) != B:
        raise ShapeError(f"soft_contrastive_loss: {B} rows but {len(labels)} labels")
    W = schema.weight_matrix(labels) if weights is None else np.asarray(weights, dtype=np.float64)
    if normalize:
        S_v, S_t = ad.row_l2_normalize(S_v), ad.row_l2_normalize(S_t)
    sim = ad.scale(ad.matmul(S_v, ad.transpose(S_t)), 1.0 / tau)
    loss = _anchor_mean(sim, W)
    if symmetric:
        loss = ad.scale(ad.add(loss, _anchor_mean(ad.transpose(sim), W.T)), 0.5)
    return loss


def _anchor_mean(sim: Tensor, W: np.ndarray) -> Tensor:
    live = W.sum(axis=1) > 0
    if live.all():
        return ad.scale(ad.mean_all(ad.log_weighted_softmax_mass(sim, W)), -1.0)
    if not live.any():
        return Tensor(0.0)
    safe = np.where(live[:, None], W, 1.0)
    per_anchor = ad.log_weighted_softmax_mass(sim, safe)
    mask = Tensor(live[:, None].astype(np.float64))
    return ad.scale(ad.sum_all(ad.mul(per_anchor, mask)), -1.0 / live.sum())


def discrepant_sentiment(p_t: Tensor, p_v: Tensor) -> Tensor:
    """Text-private minus image-private sub-representation."""
    if p_t.shape != p_v.shape:
        raise ShapeError(f"discrepant_sentiment: {p_t.shape} vs {p_v.shape}")
    return ad.sub(p_t, p_v)
