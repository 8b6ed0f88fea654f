"""Synthetic multimodal posts with controllable discrepancy and OCR rates.

Generative process for each post (its own child stream, so records can be
produced in any order):

* overall label ``c`` uniform over the schema; ``text_label = c``;
* with probability ``sd_rate`` the image label is another category (uniform),
  otherwise ``c``;
* patches: ``I x P`` Gaussian around the image label's mean, where category
  ``k`` has mean ``cluster_sep / sqrt(2) * e_k`` (pairwise distance
  ``cluster_sep``);
* text: each token from the text label's vocabulary block (``words_per_class``
  ids, 8 by default) with probability ``signal_frac``, else uniform over all
  non-reserved ids;
* with probability ``ocr_rate`` the post carries OCR tokens, drawn from the
  overall label's block.

Files are UTF-8 JSON lines, one record per line, floats with 17 significant
digits; ``ocr_tokens`` is omitted for posts without OCR.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .decomposition import CategorySchema, load_schema
from .encoders import OCR_ID, PAD_ID
from .rng import Rng, derive_seed

FIRST_WORD_ID = 2
SPLIT_KEY = 0x5B17
REQUIRED_FIELDS = ("id", "image_patches", "text_tokens", "label", "image_label", "text_label")


def _fmt(x) -> str:
    """17 significant digits; integral values keep a ``.0`` so ``-0.0`` survives parsing."""
    text = format(float(x), ".17g")
    return text + ".0" if text.lstrip("-").isdigit() else text


class DatasetError(ValueError):
    pass


@dataclass
class PostRecord:
    id: int
    image_patches: np.ndarray
    text_tokens: list[int]
    ocr_tokens: list[int] | None
    label: int
    image_label: int
    text_label: int

    @property
    def has_ocr(self) -> bool:
        return self.ocr_tokens is not None

    @property
    def discrepant(self) -> bool:
        return self.image_label != self.text_label

    def __eq__(self, other) -> bool:
        if not isinstance(other, PostRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.text_tokens == other.text_tokens
            and self.ocr_tokens == other.ocr_tokens
            and (self.label, self.image_label, self.text_label) == (other.label, other.image_label, other.text_label)
            and self.image_patches.shape == other.image_patches.shape
            and np.array_equal(self.image_patches, other.image_patches)
        )

    def to_line(self) -> str:
        patches = "[" + ", ".join("[" + ", ".join(_fmt(x) for x in row) + "]" for row in self.image_patches) + "]"
        parts = [
            f'"id": {int(self.id)}',
            f'"label": {int(self.label)}',
            f'"image_label": {int(self.image_label)}',
            f'"text_label": {int(self.text_label)}',
            f'"text_tokens": {json.dumps([int(t) for t in self.text_tokens])}',
        ]
        if self.ocr_tokens is not None:
            parts.append(f'"ocr_tokens": {json.dumps([int(t) for t in self.ocr_tokens])}')
        parts.append(f'"image_patches": {patches}')
        return "{" + ", ".join(parts) + "}"

    @classmethod
    def from_obj(cls, obj: dict) -> PostRecord:
        missing = [k for k in REQUIRED_FIELDS if k not in obj]
        if missing:
            raise DatasetError(f"missing field(s) {', '.join(missing)}")
        patches = np.array(obj["image_patches"], dtype=np.float64)
        if patches.ndim != 2:
            raise DatasetError("image_patches must be a matrix")
        ocr = obj.get("ocr_tokens")
        rec = cls(
            id=int(obj["id"]),
            image_patches=patches,
            text_tokens=[int(t) for t in obj["text_tokens"]],
            ocr_tokens=None if ocr is None else [int(t) for t in ocr],
            label=int(obj["label"]),
            image_label=int(obj["image_label"]),
            text_label=int(obj["text_label"]),
        )
        if min(rec.label, rec.image_label, rec.text_label) < 0:
            raise DatasetError("negative label")
        if not np.all(np.isfinite(patches)):
            raise DatasetError("non-finite patch value")
        return rec


@dataclass
class GeneratorSpec:
    schema: str = "mvsa"
    n_posts: int = 1000
    sd_rate: float = 0.425
    ocr_rate: float = 0.609
    noise_std: float = 0.5
    cluster_sep: float = 3.0
    I: int = 16
    P: int = 8
    L: int = 16
    V: int = 256
    text_len: tuple[int, int] = (4, 16)
    ocr_len: tuple[int, int] = (1, 15)
    signal_frac: float = 0.9
    words_per_class: int | None = 8
    seed: int = 42
    schema_def: dict | None = None
    vocab_partition: list[list[int]] | None = field(default=None)

    def __post_init__(self):
        for name in ("sd_rate", "ocr_rate", "signal_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.cluster_sep <= 0:
            raise ValueError("cluster_sep must be > 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        self.text_len = tuple(self.text_len)
        self.ocr_len = tuple(self.ocr_len)
        if not 1 <= self.text_len[0] <= self.text_len[1] <= self.L:
            raise ValueError(f"text_len {self.text_len} must lie within [1, L={self.L}]")
        if not 0 <= self.ocr_len[0] <= self.ocr_len[1] <= self.L - 1:
            raise ValueError(f"ocr_len {self.ocr_len} must lie within [0, L-1={self.L - 1}]")
        if self.schema_def is None and self.schema not in ("mvsa", "tumemo", "hfm"):
            self.schema_def = load_schema(self.schema).to_json()
        C = self.get_schema().num_classes
        if C > self.P:
            raise ValueError(f"{C} categories need patch length P >= {C}, got {self.P}")
        if self.vocab_partition is None:
            self.vocab_partition = default_partition(self.V, C, self.words_per_class)
        if len(self.vocab_partition) != C:
            raise ValueError(f"vocab partition has {len(self.vocab_partition)} blocks for {C} categories")
        for block in self.vocab_partition:
            if not block or min(block) < FIRST_WORD_ID or max(block) >= self.V:
                raise ValueError("vocab partition blocks must be nonempty and use ids in [2, V)")

    def get_schema(self) -> CategorySchema:
        if self.schema_def is not None:
            return CategorySchema.from_json(self.schema_def)
        return load_schema(self.schema)

    def to_json(self) -> dict:
        d = asdict(self)
        d["text_len"] = list(self.text_len)
        d["ocr_len"] = list(self.ocr_len)
        return d


def default_partition(V: int, num_classes: int, words_per_class: int | None = None) -> list[list[int]]:
    """Contiguous blocks of word ids starting at 2, one per category.

    Without ``words_per_class`` the ids ``2..V-1`` are split evenly (remainder
    unused); otherwise each block has that many ids and the rest of the
    vocabulary only appears as noise.
    """
    size = (V - FIRST_WORD_ID) // num_classes
    if words_per_class is not None:
        if words_per_class * num_classes > V - FIRST_WORD_ID:
            raise ValueError(f"{num_classes} blocks of {words_per_class} words do not fit in V={V}")
        size = words_per_class
    if size < 1:
        raise ValueError(f"vocabulary of {V} ids too small for {num_classes} categories")
    return [list(range(FIRST_WORD_ID + k * size, FIRST_WORD_ID + (k + 1) * size)) for k in range(num_classes)]


def _category_means(spec: GeneratorSpec, C: int) -> np.ndarray:
    means = np.zeros((C, spec.P))
    for k in range(C):
        means[k, k] = spec.cluster_sep / math.sqrt(2.0)
    return means


def generate_record(spec: GeneratorSpec, post_id: int, means: np.ndarray | None = None) -> PostRecord:
    C = spec.get_schema().num_classes if means is None else means.shape[0]
    if means is None:
        means = _category_means(spec, C)
    rng = Rng(derive_seed(spec.seed, post_id))
    c = rng.below(C)
    image_label = c
    if rng.bernoulli(spec.sd_rate):
        image_label = (c + 1 + rng.below(C - 1)) % C
    noise = np.array(rng.normals(spec.I * spec.P, 0.0, spec.noise_std)).reshape(spec.I, spec.P)
    patches = means[image_label][None, :] + noise

    def words(block: list[int], n: int, frac: float) -> list[int]:
        out = []
        for _ in range(n):
            if rng.random() < frac:
                out.append(rng.choice(block))
            else:
                out.append(rng.integers(FIRST_WORD_ID, spec.V - 1))
        return out

    text = words(spec.vocab_partition[c], rng.integers(*spec.text_len), spec.signal_frac)
    ocr = None
    if rng.bernoulli(spec.ocr_rate):
        ocr = words(spec.vocab_partition[c], rng.integers(*spec.ocr_len), 1.0)
    return PostRecord(post_id, patches, text, ocr, c, image_label, c)


def generate_dataset(spec: GeneratorSpec) -> tuple[list[PostRecord], dict]:
    """Records ``0..n-1`` plus a manifest of the generator settings and realized stats."""
    C = spec.get_schema().num_classes
    means = _category_means(spec, C)
    records = [generate_record(spec, i, means) for i in range(spec.n_posts)]
    manifest = {"spec": spec.to_json(), "stats": dataset_stats(records, C)}
    return records, manifest


def dataset_stats(records: Sequence[PostRecord], num_classes: int | None = None) -> dict:
    n = len(records)
    if n == 0:
        raise ValueError("dataset_stats: empty dataset")
    C = num_classes or (max(r.label for r in records) + 1)
    per_class = [0] * C
    for r in records:
        per_class[r.label] += 1
    ocr = sum(r.has_ocr for r in records)
    sd = sum(r.discrepant for r in records)
    both = sum(r.has_ocr and r.discrepant for r in records)

    def pct(k):
        return round(100.0 * k / n, 1)

    return {
        "n": n,
        "class_counts": per_class,
        "ocr_count": ocr,
        "ocr_pct": pct(ocr),
        "sd_count": sd,
        "sd_pct": pct(sd),
        "ocr_sd_count": both,
        "ocr_sd_pct": pct(both),
    }


def write_dataset(records: Iterable[PostRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_line())
            fh.write("\n")


def read_dataset(path: str | Path, schema: CategorySchema | None = None) -> list[PostRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = PostRecord.from_obj(json.loads(line))
            except (json.JSONDecodeError, DatasetError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            if schema is not None and max(rec.label, rec.image_label, rec.text_label) >= schema.num_classes:
                raise DatasetError(f"{path}:{lineno}: label outside schema {schema.name!r}")
            records.append(rec)
    return records


def split_dataset(records: Sequence[PostRecord], seed: int, fractions=(0.8, 0.1, 0.1), counts=None):
    """Shuffle-split into ``(train, val, test)``; test takes the remainder."""
    n = len(records)
    if counts is None:
        counts = (int(fractions[0] * n), int(fractions[1] * n))
    n_train, n_val = counts[0], counts[1]
    if n_train + n_val > n:
        raise ValueError(f"split sizes {counts} exceed {n} records")
    order = Rng(derive_seed(seed, SPLIT_KEY)).permutation(n)
    pick = lambda idx: [records[i] for i in sorted(idx)]
    return pick(order[:n_train]), pick(order[n_train : n_train + n_val]), pick(order[n_train + n_val :])


def write_dataset_dir(out: str | Path, records, manifest: dict, seed: int, counts=None, fractions=(0.8, 0.1, 0.1)) -> dict:
    """Write ``posts.jsonl``, ``posts.manifest.json`` and the three split files."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(records, out / "posts.jsonl")
    train, val, test = split_dataset(records, seed, fractions, counts)
    for name, part in (("train", train), ("val", val), ("test", test)):
        write_dataset(part, out / f"{name}.jsonl")
    manifest = dict(manifest)
    manifest["splits"] = {"train": len(train), "val": len(val), "test": len(test)}
    (out / "posts.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset_dir(path: str | Path, schema: CategorySchema | None = None):
    path = Path(path)
    return tuple(read_dataset(path / f"{name}.jsonl", schema) for name in ("train", "val", "test"))


__all__ = [
    "PostRecord", "GeneratorSpec", "DatasetError", "generate_record", "generate_dataset",
    "dataset_stats", "write_dataset", "read_dataset", "split_dataset", "write_dataset_dir",
    "read_dataset_dir", "default_partition", "PAD_ID", "OCR_ID",
]
