"""AdamW with per-group learning rates, cosine decay, metrics and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .model import GROUPS, ModelConfig, ModelParams, forward, init_params, predict, save_checkpoint
from .rng import Rng, derive_seed

log = logging.getLogger(__name__)

DEFAULT_LRS = {"image": 5e-5, "text": 2e-5, "classifier": 1e-3, "other": 2e-4}
HISTORY_FIELDS = ("epoch", "split", "acc", "wF1", "mF1", "L_cls", "L_exc", "L_con")


class TrainingDiverged(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    base_lrs: dict[str, float]
    groups: dict[str, str]
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams, base_lrs: dict[str, float] | None = None, **kw) -> OptimState:
        lrs = dict(DEFAULT_LRS if base_lrs is None else base_lrs)
        missing = set(params.groups.values()) - set(lrs)
        if missing:
            raise ValueError(f"no learning rate for group(s) {sorted(missing)}")
        return cls(lrs, dict(params.groups), **kw)


def adamw_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray | None], state: OptimState, lr_scale: float = 1.0) -> None:
    """One bias-corrected AdamW update, in place.

    Decay is decoupled and applied first: ``theta -= lr * wd * theta``.
    Missing gradients count as zero.
    """
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ValueError(f"adamw_step: gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        lr = state.base_lrs[state.groups[name]] * lr_scale
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def cosine_lr_scale(step: int, total_steps: int) -> float:
    """0.5 * (1 + cos(pi * step / total)); no warmup, no restarts."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    accuracy: float
    weighted_f1: float
    macro_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    confusion: list[list[int]]
    losses: dict[str, float] | None = None

    def as_dict(self) -> dict:
        d = {
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "macro_f1": self.macro_f1,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "support": self.support,
            "confusion": self.confusion,
        }
        if self.losses is not None:
            d["losses"] = self.losses
        return d


def compute_metrics(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> MetricsReport:
    """Accuracy and F1 scores; confusion rows are true classes, columns predictions.

    Per-class F1 is 0 when precision + recall is 0.  Macro-F1 averages over
    the classes that occur in either labels or predictions.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ValueError("compute_metrics: empty input")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    tp = np.diag(conf).astype(np.float64)
    support = conf.sum(axis=1)
    predicted = conf.sum(axis=0)
    precision = np.divide(tp, predicted, out=np.zeros(num_classes), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros(num_classes), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(num_classes), where=denom > 0)
    present = (support > 0) | (predicted > 0)
    return MetricsReport(
        accuracy=float(tp.sum() / y_true.size),
        weighted_f1=float((f1 * support).sum() / support.sum()),
        macro_f1=float(f1[present].mean()),
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        support=support.tolist(),
        confusion=conf.tolist(),
    )


def evaluate(params: ModelParams, config: ModelConfig, records: Sequence, batch_size: int = 16) -> MetricsReport:
    """Predict every record (fixed order, no recording) and score it; mean batch losses attached."""
    if not records:
        raise ValueError("evaluate: empty dataset")
    preds = []
    sums = {"L_cls": 0.0, "L_exc": 0.0, "L_con": 0.0}
    n_batches = 0
    with ad.no_grad():
        for start in range(0, len(records), batch_size):
            outs, rep = forward(records[start : start + batch_size], params, config)
            preds.extend(predict(o) for o in outs)
            for k in sums:
                sums[k] += getattr(rep, k)
            n_batches += 1
    report = compute_metrics([r.label for r in records], preds, config.num_classes)
    report.losses = {k: v / n_batches for k, v in sums.items()}
    return report


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lrs: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LRS))
    seed: int = 42
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class TrainResult:
    params: ModelParams
    config: ModelConfig
    history: list[dict]
    best_epoch: int
    best_val_accuracy: float
    test_metrics: MetricsReport | None = None


def _history_row(epoch: int, split: str, metrics: MetricsReport, losses: dict[str, float]) -> dict:
    return {
        "epoch": epoch,
        "split": split,
        "acc": metrics.accuracy,
        "wF1": metrics.weighted_f1,
        "mF1": metrics.macro_f1,
        "L_cls": losses["L_cls"],
        "L_exc": losses["L_exc"],
        "L_con": losses["L_con"],
    }


def history_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_FIELDS)
    for row in rows:
        writer.writerow([format(v, ".17g") if isinstance(v, float) else v for v in (row[k] for k in HISTORY_FIELDS)])
    return buf.getvalue()


def _check_dims(records: Sequence, config: ModelConfig, what: str) -> None:
    for r in records:
        if r.image_patches.shape != (config.I, config.P):
            raise ValueError(f"{what} record {r.id}: patches {r.image_patches.shape} vs config (I={config.I}, P={config.P})")
        ids = list(r.text_tokens) + list(r.ocr_tokens or [])
        if ids and max(ids) >= config.V:
            raise ValueError(f"{what} record {r.id}: token id {max(ids)} >= V={config.V}")
        if not 0 <= r.label < config.num_classes:
            raise ValueError(f"{what} record {r.id}: label {r.label} outside [0, {config.num_classes})")


def train(
    train_records: Sequence,
    val_records: Sequence,
    config: ModelConfig,
    tcfg: TrainConfig | None = None,
    test_records: Sequence | None = None,
    history_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
) -> TrainResult:
    """Train with shuffled mini-batches; keeps the best-validation-accuracy parameters."""
    tcfg = tcfg or TrainConfig()
    for what, recs in (("train", train_records), ("val", val_records), ("test", test_records or [])):
        _check_dims(recs, config, what)
    if not train_records or not val_records:
        raise ValueError("train: need nonempty train and validation sets")

    params = init_params(config)
    opt = OptimState.for_params(params, tcfg.lrs, betas=tcfg.betas, eps=tcfg.eps, weight_decay=tcfg.weight_decay)
    n = len(train_records)
    per_epoch = math.ceil(n / tcfg.batch_size)
    total_steps = tcfg.epochs * per_epoch
    history: list[dict] = []
    best, best_epoch, best_acc = params.copy(), 0, -1.0
    step = 0

    for epoch in range(1, tcfg.epochs + 1):
        order = Rng(derive_seed(tcfg.seed, epoch)).permutation(n)
        sums = {"L_cls": 0.0, "L_exc": 0.0, "L_con": 0.0}
        preds, labels = [], []
        for start in range(0, n, tcfg.batch_size):
            batch = [train_records[i] for i in order[start : start + tcfg.batch_size]]
            params.zero_grad()
            outs, rep = forward(batch, params, config)
            if not math.isfinite(rep.L_total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}: {rep.as_dict()} (records {[r.id for r in batch]})")
            ad.backward(rep.graph)
            grads = {k: t.grad for k, t in params.items()}
            adamw_step(params.tensors, grads, opt, cosine_lr_scale(step, total_steps))
            step += 1
            for k in sums:
                sums[k] += getattr(rep, k)
            preds.extend(predict(o) for o in outs)
            labels.extend(r.label for r in batch)
        train_metrics = compute_metrics(labels, preds, config.num_classes)
        history.append(_history_row(epoch, "train", train_metrics, {k: v / per_epoch for k, v in sums.items()}))
        val_metrics = evaluate(params, config, val_records, tcfg.batch_size)
        history.append(_history_row(epoch, "val", val_metrics, val_metrics.losses))
        log.info("epoch %d: train acc %.4f, val acc %.4f, loss %.4f", epoch, train_metrics.accuracy, val_metrics.accuracy, sums["L_cls"] / per_epoch)
        if val_metrics.accuracy > best_acc:
            best, best_epoch, best_acc = params.copy(), epoch, val_metrics.accuracy

    test_metrics = None
    if test_records:
        test_metrics = evaluate(best, config, test_records, tcfg.batch_size)
        history.append(_history_row(best_epoch, "test", test_metrics, test_metrics.losses))
    if history_path is not None:
        Path(history_path).write_text(history_csv(history))
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, best, config)
    return TrainResult(best, config, history, best_epoch, best_acc, test_metrics)


# ---------------------------------------------------------------------------
# ablation


ABLATION_METRICS = ("accuracy", "weighted_f1", "macro_f1")


def ablate(
    train_records: Sequence,
    val_records: Sequence,
    test_records: Sequence,
    base_config: ModelConfig,
    seeds: Sequence[int],
    variants: Sequence[str] = ("full", "no-sco", "no-sde", "no-softcl", "no-sco-sde"),
    tcfg: TrainConfig | None = None,
) -> dict[str, dict[str, list[float]]]:
    """Test metrics per variant per seed (seed drives both init and shuffling)."""
    tcfg = tcfg or TrainConfig()
    results: dict[str, dict[str, list[float]]] = {}
    for variant in variants:
        per = {m: [] for m in ABLATION_METRICS}
        for seed in seeds:
            cfg = base_config.replace(variant=variant, seed=seed)
            tc = TrainConfig(**{**tcfg.__dict__, "seed": seed})
            res = train(train_records, val_records, cfg, tc, test_records=test_records)
            for m in ABLATION_METRICS:
                per[m].append(getattr(res.test_metrics, m))
            log.info("ablate %s seed %d: test acc %.4f", variant, seed, res.test_metrics.accuracy)
        results[variant] = per
    return results


def ablation_table(results: dict[str, dict[str, list[float]]]) -> str:
    """CSV with mean and sample standard deviation of each metric per variant."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["variant", "n"]
    for m in ABLATION_METRICS:
        header += [f"{m}_mean", f"{m}_std"]
    writer.writerow(header)
    for variant, per in results.items():
        row = [variant, len(per["accuracy"])]
        for m in ABLATION_METRICS:
            vals = np.asarray(per[m])
            row += [format(float(vals.mean()), ".6f"), format(float(vals.std(ddof=1)) if vals.size > 1 else 0.0, ".6f")]
        writer.writerow(row)
    return buf.getvalue()


__all__ = [
    "OptimState", "adamw_step", "cosine_lr_scale", "MetricsReport", "compute_metrics", "evaluate",
    "TrainConfig", "TrainResult", "train", "history_csv", "ablate", "ablation_table", "TrainingDiverged",
    "DEFAULT_LRS", "GROUPS",
]
