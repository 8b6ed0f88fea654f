"""Full forward pass, ablation variants, parameter init and checkpoints.

Parameter layout (also the init and checkpoint order), grouped for the
optimizer::

    image    img.W_embed (P x F), img.mix.P_Q/P_K/P_V (F x F)
    text     txt.E (V x F), txt.mix.P_Q/P_K/P_V
    other    sco.cross.P_Q/P_K/P_V, sco.P_ca (I x (I+L)), sco.self.P_Q/P_K/P_V   [with completion]
             sde.P_s_v, sde.P_p_v, sde.P_s_t, sde.P_p_t                         [with decomposition]
             fuse.P_Q/P_K/P_V
    classifier  cls.P (2F x C, or F x C without decomposition)

Every matrix is filled row-major with N(0, init_std^2) draws from one
xoshiro256** stream seeded with the config seed.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attention import AttentionHeadParams, CrossCompletionParams, FusionParams, complete_image, complete_text, global_fusion
from .autodiff import Tensor
from .decomposition import (
    CategorySchema,
    DecompositionParams,
    SubRepresentations,
    decompose,
    discrepant_sentiment,
    exclusive_loss_from_normalized,
    load_schema,
    soft_contrastive_loss,
)
from .encoders import ImageEncoderParams, TextEncoderParams, encode_image, encode_text, pad_tokens
from .rng import Rng

VARIANTS = ("full", "no-sco", "no-sde", "no-softcl", "no-sco-sde")
GROUPS = ("image", "text", "other", "classifier")
MAGIC = b"CODE1"


@dataclass
class ModelConfig:
    I: int = 16
    L: int = 16
    F: int = 32
    P: int = 8
    V: int = 256
    num_classes: int = 3
    sigma: float = 0.1
    tau: float = 0.07
    schema: str = "mvsa"
    weight_mode: str = "similarity"
    variant: str = "full"
    seed: int = 0
    init_std: float = 0.02
    normalize_contrastive: bool = True
    symmetric_contrastive: bool = False
    schema_def: dict | None = None  # inline definition for custom schemas

    def __post_init__(self):
        for dim in ("I", "L", "F", "P", "V", "num_classes"):
            if getattr(self, dim) < 1:
                raise ValueError(f"config: {dim} must be >= 1")
        if self.V < 3:
            raise ValueError("config: V must leave room for the pad and OCR marker ids")
        if self.sigma < 0:
            raise ValueError("config: sigma must be >= 0")
        if self.tau <= 0:
            raise ValueError("config: tau must be > 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"config: unknown variant {self.variant!r}")
        if self.schema_def is None and self.schema not in ("mvsa", "tumemo", "hfm"):
            self.schema_def = load_schema(self.schema).to_json()
        if self.get_schema().num_classes != self.num_classes:
            raise ValueError(f"config: schema {self.schema!r} has {self.get_schema().num_classes} classes, num_classes={self.num_classes}")

    @property
    def uses_completion(self) -> bool:
        return self.variant in ("full", "no-sde", "no-softcl")

    @property
    def uses_decomposition(self) -> bool:
        return self.variant in ("full", "no-sco", "no-softcl")

    @property
    def uses_contrastive(self) -> bool:
        return self.variant in ("full", "no-sco")

    def get_schema(self) -> CategorySchema:
        if self.schema_def is not None:
            return CategorySchema.from_json(self.schema_def, self.weight_mode)
        return load_schema(self.schema, self.weight_mode)

    def replace(self, **changes) -> ModelConfig:
        d = asdict(self)
        d.update(changes)
        return ModelConfig(**d)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in known})


def param_layout(config: ModelConfig) -> list[tuple[str, tuple[int, int], str]]:
    """``(name, shape, group)`` for every learnable matrix, in canonical order."""
    I, L, F, P, V, C = config.I, config.L, config.F, config.P, config.V, config.num_classes
    sq = (F, F)
    layout = [("img.W_embed", (P, F), "image")]
    layout += [(f"img.mix.{m}", sq, "image") for m in ("P_Q", "P_K", "P_V")]
    layout += [("txt.E", (V, F), "text")]
    layout += [(f"txt.mix.{m}", sq, "text") for m in ("P_Q", "P_K", "P_V")]
    if config.uses_completion:
        layout += [(f"sco.cross.{m}", sq, "other") for m in ("P_Q", "P_K", "P_V")]
        layout += [("sco.P_ca", (I, I + L), "other")]
        layout += [(f"sco.self.{m}", sq, "other") for m in ("P_Q", "P_K", "P_V")]
    if config.uses_decomposition:
        layout += [(f"sde.{m}", sq, "other") for m in ("P_s_v", "P_p_v", "P_s_t", "P_p_t")]
    layout += [(f"fuse.{m}", sq, "other") for m in ("P_Q", "P_K", "P_V")]
    cls_in = 2 * F if config.uses_decomposition else F
    layout += [("cls.P", (cls_in, C), "classifier")]
    return layout


@dataclass
class ModelParams:
    tensors: dict[str, Tensor]
    groups: dict[str, str]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def by_group(self, group: str) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if self.groups[k] == group}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> ModelParams:
        return ModelParams({k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.tensors.items()}, dict(self.groups))

    def _head(self, prefix: str) -> AttentionHeadParams:
        return AttentionHeadParams(self[f"{prefix}.P_Q"], self[f"{prefix}.P_K"], self[f"{prefix}.P_V"])

    @property
    def image_encoder(self) -> ImageEncoderParams:
        return ImageEncoderParams(self["img.W_embed"], self._head("img.mix"))

    @property
    def text_encoder(self) -> TextEncoderParams:
        return TextEncoderParams(self["txt.E"], self._head("txt.mix"))

    @property
    def cross_completion(self) -> CrossCompletionParams:
        return CrossCompletionParams(self._head("sco.cross"), self["sco.P_ca"])

    @property
    def text_completion(self) -> AttentionHeadParams:
        return self._head("sco.self")

    @property
    def decomposition(self) -> DecompositionParams:
        return DecompositionParams(self["sde.P_s_v"], self["sde.P_p_v"], self["sde.P_s_t"], self["sde.P_p_t"])

    @property
    def fusion(self) -> FusionParams:
        return FusionParams(self._head("fuse"))


def init_params(config: ModelConfig, seed: int | None = None) -> ModelParams:
    rng = Rng(config.seed if seed is None else seed)
    tensors, groups = {}, {}
    for name, shape, group in param_layout(config):
        vals = rng.normals(shape[0] * shape[1], 0.0, config.init_std)
        tensors[name] = Tensor(np.array(vals, dtype=np.float64).reshape(shape), requires_grad=True, name=name)
        groups[name] = group
    return ModelParams(tensors, groups)


def closed_form_param_count(config: ModelConfig) -> int:
    I, L, F, P, V, C = config.I, config.L, config.F, config.P, config.V, config.num_classes
    n = P * F + 3 * F * F  # image encoder
    n += V * F + 3 * F * F  # text encoder
    if config.uses_completion:
        n += 6 * F * F + I * (I + L)
    if config.uses_decomposition:
        n += 4 * F * F
    n += 3 * F * F  # fusion
    n += (2 * F if config.uses_decomposition else F) * C
    return n


# ---------------------------------------------------------------------------
# forward


@dataclass
class ModelOutputs:
    C: np.ndarray
    D: np.ndarray
    logits: np.ndarray
    sub: SubRepresentations | None
    Z_v: np.ndarray
    Z_t: np.ndarray


@dataclass
class LossReport:
    L_cls: float
    L_exc: float
    L_con: float
    L_total: float
    graph: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {"L_cls": self.L_cls, "L_exc": self.L_exc, "L_con": self.L_con, "L_total": self.L_total}


def batch_arrays(batch: Sequence, config: ModelConfig):
    """Stack a list of post records into ``(patches, text_ids, ocr_ids, labels)`` arrays."""
    patches = np.stack([np.asarray(r.image_patches, dtype=np.float64) for r in batch])
    if patches.shape[1:] != (config.I, config.P):
        raise ValueError(f"image patches {patches.shape[1:]} do not match config (I={config.I}, P={config.P})")
    text = np.array([pad_tokens(r.text_tokens, config.L) for r in batch], dtype=np.int64)
    ocr = np.array([pad_tokens(r.ocr_tokens or [], config.L, is_ocr=True) for r in batch], dtype=np.int64)
    labels = np.array([r.label for r in batch], dtype=np.int64)
    if labels.min() < 0 or labels.max() >= config.num_classes:
        raise ValueError(f"label out of range [0, {config.num_classes})")
    return patches, text, ocr, labels


def forward(batch: Sequence, params: ModelParams, config: ModelConfig) -> tuple[list[ModelOutputs], LossReport]:
    """Run the model on a batch of records; ``report.graph`` is the differentiable total loss."""
    if not batch:
        raise ValueError("forward: empty batch")
    patches, text, ocr, labels = batch_arrays(batch, config)
    B, F = len(batch), config.F

    z_v = encode_image(patches, params.image_encoder)
    z_t = encode_text(text, params.text_encoder)
    if config.uses_completion:
        z_o = encode_text(ocr, params.text_encoder)
        Z_v = complete_image(z_o, z_v, params.cross_completion)
        Z_t = complete_text(z_t, z_o, params.text_completion)
    else:
        Z_v, Z_t = z_v, z_t

    C = global_fusion(Z_v, Z_t, params.fusion)  # B x 1 x F
    terms = {}
    sub = None
    if config.uses_decomposition:
        P_s_v, P_p_v, P_s_t, P_p_t = params.decomposition.normalized()
        s_v, p_v = decompose(Z_v, P_s_v, P_p_v, normalized=True)
        s_t, p_t = decompose(Z_t, P_s_t, P_p_t, normalized=True)
        D = discrepant_sentiment(p_t, p_v)
        features = ad.concat_cols(C, D)
        terms["exc"] = exclusive_loss_from_normalized(P_s_v, P_p_v, P_s_t, P_p_t, config.sigma)
        if config.uses_contrastive:
            terms["con"] = soft_contrastive_loss(
                ad.reshape(s_v, (B, F)),
                ad.reshape(s_t, (B, F)),
                labels.tolist(),
                config.get_schema(),
                config.tau,
                normalize=config.normalize_contrastive,
                symmetric=config.symmetric_contrastive,
            )
        sub = (s_v.data, s_t.data, p_v.data, p_t.data)
        D_data = D.data
    else:
        features = C
        D_data = np.zeros_like(C.data)

    logits = ad.matmul(features, params["cls.P"])  # B x 1 x C
    terms = {"cls": ad.cross_entropy(logits, labels), **terms}
    total = ad.sum_tensors(terms.values())

    outputs = []
    for b in range(B):
        sr = SubRepresentations(*(x[b, 0].copy() for x in sub)) if sub is not None else None
        outputs.append(ModelOutputs(C.data[b, 0].copy(), D_data[b, 0].copy(), logits.data[b, 0].copy(), sr, Z_v.data[b], Z_t.data[b]))
    report = LossReport(
        L_cls=terms["cls"].item(),
        L_exc=terms["exc"].item() if "exc" in terms else 0.0,
        L_con=terms["con"].item() if "con" in terms else 0.0,
        L_total=total.item(),
        graph=total,
    )
    return outputs, report


def predict(outputs: ModelOutputs | np.ndarray) -> int:
    """Arg-max class; ties go to the lowest index."""
    logits = outputs.logits if isinstance(outputs, ModelOutputs) else np.asarray(outputs)
    return int(np.argmax(logits))


# ---------------------------------------------------------------------------
# checkpoints
#
# "CODE1" | u64 LE json length | UTF-8 JSON config | per matrix in layout order:
# u32 LE rows | u32 LE cols | rows*cols little-endian float64 (row-major)


def checkpoint_bytes(params: ModelParams, config: ModelConfig) -> bytes:
    buf = io.BytesIO()
    cfg = json.dumps(config.to_json(), sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(cfg)))
    buf.write(cfg)
    for name, shape, _ in param_layout(config):
        arr = params[name].data
        if arr.shape != shape:
            raise ValueError(f"checkpoint: {name} has shape {arr.shape}, layout says {shape}")
        buf.write(struct.pack("<II", *shape))
        buf.write(arr.astype("<f8").tobytes(order="C"))
    return buf.getvalue()


def save_checkpoint(path: str | Path, params: ModelParams, config: ModelConfig) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, config))


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelConfig]:
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack_from("<Q", raw, 5)
    pos = 13
    config = ModelConfig.from_json(json.loads(raw[pos : pos + n].decode("utf-8")))
    pos += n
    tensors, groups = {}, {}
    for name, shape, group in param_layout(config):
        rows, cols = struct.unpack_from("<II", raw, pos)
        pos += 8
        if (rows, cols) != shape:
            raise ValueError(f"{path}: {name} stored as {(rows, cols)}, expected {shape}")
        arr = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=pos).astype(np.float64).reshape(shape)
        pos += rows * cols * 8
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
        groups[name] = group
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return ModelParams(tensors, groups), config
