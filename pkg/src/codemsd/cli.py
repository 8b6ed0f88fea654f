"""Command-line entry point: ``codemsd <gen-data|train|eval|gradcheck|ablate>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import GeneratorSpec, generate_dataset, read_dataset, read_dataset_dir, write_dataset_dir
from .decomposition import SCHEMAS, load_schema
from .gradcheck import ModelGradCheck, check_model_gradients
from .model import VARIANTS, ModelConfig, load_checkpoint
from .train import DEFAULT_LRS, TrainConfig, ablate, ablation_table, evaluate, train

log = logging.getLogger("codemsd")


def _counts(text: str | None):
    if text is None:
        return None
    parts = [int(x) for x in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("--split takes TRAIN,VAL counts")
    return tuple(parts)


def _schema_arg(args) -> tuple[str, dict | None]:
    if args.schema != "file":
        return args.schema, None
    if not args.schema_file:
        raise SystemExit("--schema file needs --schema-file PATH")
    schema = load_schema(args.schema_file)
    return schema.name, schema.to_json()


def cmd_gen_data(args) -> int:
    name, schema_def = _schema_arg(args)
    spec = GeneratorSpec(
        schema=name,
        schema_def=schema_def,
        n_posts=args.n,
        sd_rate=args.sd_rate,
        ocr_rate=args.ocr_rate,
        noise_std=args.noise_std,
        cluster_sep=args.cluster_sep,
        words_per_class=args.words_per_class,
        seed=args.seed,
    )
    records, manifest = generate_dataset(spec)
    manifest = write_dataset_dir(args.out, records, manifest, args.seed, counts=_counts(args.split))
    json.dump(manifest["stats"] | {"splits": manifest["splits"]}, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def _data_schema(data_dir: Path) -> tuple[str, dict | None, dict]:
    manifest_path = data_dir / "posts.manifest.json"
    if not manifest_path.exists():
        return "mvsa", None, {}
    spec = json.loads(manifest_path.read_text())["spec"]
    return spec["schema"], spec.get("schema_def"), spec


def _model_config(args, data_dir: Path) -> ModelConfig:
    schema, schema_def, spec = _data_schema(data_dir)
    num_classes = len(schema_def["categories"]) if schema_def else SCHEMAS[schema].num_classes
    dims = {k: spec[k] for k in ("I", "P", "L", "V") if k in spec}
    return ModelConfig(
        **dims,
        F=args.dim,
        num_classes=num_classes,
        schema=schema,
        schema_def=schema_def,
        weight_mode=args.weight_mode,
        variant=args.variant,
        sigma=args.sigma,
        tau=args.tau,
        seed=args.seed,
    )


def _train_config(args) -> TrainConfig:
    lrs = {"image": args.lr_image, "text": args.lr_text, "classifier": args.lr_classifier, "other": args.lr_other}
    return TrainConfig(epochs=args.epochs, batch_size=args.batch, lrs=lrs, seed=args.seed, weight_decay=args.weight_decay)


def cmd_train(args) -> int:
    data = Path(args.data)
    config = _model_config(args, data)
    tr, va, te = read_dataset_dir(data, config.get_schema())
    history = args.history or str(Path(args.out).with_suffix(".history.csv"))
    res = train(tr, va, config, _train_config(args), test_records=te or None, history_path=history, checkpoint_path=args.out)
    summary = {"best_epoch": res.best_epoch, "best_val_accuracy": res.best_val_accuracy, "history": history, "checkpoint": args.out}
    if res.test_metrics is not None:
        summary["test"] = res.test_metrics.as_dict()
    json.dump(summary, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def cmd_eval(args) -> int:
    params, config = load_checkpoint(args.ckpt)
    records = read_dataset(args.data, config.get_schema())
    report = evaluate(params, config, records, args.batch)
    json.dump(report.as_dict(), sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def cmd_gradcheck(args) -> int:
    check = ModelGradCheck.load(args.config) if args.config else ModelGradCheck.from_json({})
    report, seconds = check_model_gradients(check, args.tol)
    print(report.summary())
    print(f"elapsed {seconds:.1f} s")
    return 0 if report.passed else 1


def cmd_ablate(args) -> int:
    data = Path(args.data)
    config = _model_config(args, data)
    tr, va, te = read_dataset_dir(data, config.get_schema())
    if not te:
        raise SystemExit(f"{data}: empty test split")
    variants = args.variants.split(",") if args.variants else VARIANTS
    results = ablate(tr, va, te, config, list(range(args.seeds)), variants, _train_config(args))
    table = ablation_table(results)
    if args.out:
        Path(args.out).write_text(table)
    sys.stdout.write(table)
    return 0


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="directory with train/val/test.jsonl")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--weight-mode", choices=("similarity", "literal"), default="similarity")
    p.add_argument("--dim", type=int, default=32, help="hidden size F")
    p.add_argument("--sigma", type=float, default=0.1, help="exclusive-loss margin")
    p.add_argument("--tau", type=float, default=0.07, help="contrastive temperature")
    p.add_argument("--weight-decay", type=float, default=0.01)
    for group, lr in DEFAULT_LRS.items():
        p.add_argument(f"--lr-{group}", type=float, default=lr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="codemsd", description="Toy multimodal sentiment model with completion and decomposition.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    g.add_argument("--schema", choices=(*SCHEMAS, "file"), default="mvsa")
    g.add_argument("--schema-file", help="JSON schema used with --schema file")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--sd-rate", type=float, default=0.425)
    g.add_argument("--ocr-rate", type=float, default=0.609)
    g.add_argument("--noise-std", type=float, default=0.5)
    g.add_argument("--cluster-sep", type=float, default=3.0)
    g.add_argument("--words-per-class", type=int, default=8)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--split", help="TRAIN,VAL counts (test gets the rest); default 80/10/10")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant and save the best checkpoint")
    _add_model_args(t)
    t.add_argument("--variant", choices=VARIANTS, default="full")
    t.add_argument("--seed", type=int, default=42)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--history", help="metrics history CSV (default: next to the checkpoint)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset file")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--batch", type=int, default=16)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every model parameter")
    c.add_argument("--config", help="JSON with model config fields plus optional batch_size, data_seed, h")
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train every variant over several seeds")
    _add_model_args(a)
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--variants", help="comma-separated subset of variants")
    a.add_argument("--out", help="also write the CSV here")
    a.set_defaults(func=cmd_ablate, variant="full", seed=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
