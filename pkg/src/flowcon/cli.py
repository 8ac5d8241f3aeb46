"""Command-line surface: data generation, training, scoring, evaluation, export.

Exit codes: 0 success, 2 usage/config errors, 3 numeric failure during
training.  All randomness derives from the single --seed / config seed via
named substreams.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import datasets, evalmetrics, flow, oodscore, train
from .errors import (ConfigError, FlowconError, FormatError, InvalidArgument, NumericError,
                     TrainingDiverged)
from .loss import LossConfig

_REQUIRED = object()

# key -> (python type, default, validator)
_CONFIG_SCHEMA: dict[str, tuple] = {
    "train_features": (str, _REQUIRED, None),
    "out_dir": (str, _REQUIRED, None),
    "epochs": (int, 700, lambda v: v >= 1),
    "batch_size": (int, 64, lambda v: v >= 2),
    "seed": (int, 0, None),
    "lr": (float, 1e-5, lambda v: v > 0),
    "weight_decay": (float, 1e-5, lambda v: v >= 0),
    "beta1": (float, 0.9, lambda v: 0 < v < 1),
    "beta2": (float, 0.999, lambda v: 0 < v < 1),
    "eps": (float, 1e-8, lambda v: v > 0),
    "lambda": (float, 0.07, lambda v: v >= 0),
    "tau1": (float, 1.5, lambda v: v > 0),
    "tau2": (float, 0.1, lambda v: v > 0),
    "exponent_clamp": (float, 40.0, lambda v: v > 0),
    "blocks": (int, 8, lambda v: v >= 1),
    "hidden": (int, 0, lambda v: v >= 0),      # 0 = derive from dimension
    "dim": (int, 0, lambda v: v >= 0),         # 0 = infer from the feature file
    "checkpoint_every": (int, 0, lambda v: v >= 0),
    "log_every": (int, 50, lambda v: v >= 1),
}


@dataclass
class RunConfig:
    train_features: str
    out_dir: str
    epochs: int
    batch_size: int
    seed: int
    lr: float
    weight_decay: float
    beta1: float
    beta2: float
    eps: float
    lam: float
    tau1: float
    tau2: float
    exponent_clamp: float
    blocks: int
    hidden: int
    dim: int
    checkpoint_every: int
    log_every: int

    def loss_config(self) -> LossConfig:
        return LossConfig(tau1=self.tau1, tau2=self.tau2, lam=self.lam,
                          exponent_clamp=self.exponent_clamp)

    def train_config(self) -> train.TrainConfig:
        return train.TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                                 seed=self.seed, loss=self.loss_config(), lr=self.lr,
                                 beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                                 weight_decay=self.weight_decay,
                                 checkpoint_every=self.checkpoint_every,
                                 log_every=self.log_every)

    def echo(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


def _coerce(key: str, raw: str):
    if key not in _CONFIG_SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    typ, _, validator = _CONFIG_SCHEMA[key]
    try:
        value = typ(raw) if typ is not int else int(raw, 0)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}")
    if validator is not None and not validator(value):
        raise ConfigError(f"config key {key!r}: value {value!r} out of range")
    return value


def parse_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    """Flat key=value file with # comments; unknown keys rejected."""
    values: dict[str, object] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    for lineno, line in enumerate(lines, 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line.strip()!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = (part.strip() for part in item.split("=", 1))
        values[key] = _coerce(key, raw)
    resolved: dict[str, object] = {}
    for key, (typ, default, _) in _CONFIG_SCHEMA.items():
        if key in values:
            resolved[key] = values[key]
        elif default is _REQUIRED:
            raise ConfigError(f"missing required config key {key!r}")
        else:
            resolved[key] = default
    resolved["lam"] = resolved.pop("lambda")
    return RunConfig(**resolved)


# -- commands --------------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "moons":
        if args.n < 4:
            raise InvalidArgument("--n must be >= 4 for a train/test split")
        full = datasets.gen_moons(args.n, args.noise, args.seed)
        ood = datasets.gen_moons_ood(args.n_ood or args.n // 5, args.seed)
    else:
        full = datasets.gen_blobs(args.k, args.d, args.n_per_class, args.mean_scale,
                                  args.sigma, args.seed)
        ood = datasets.gen_blobs_ood(args.n_ood or args.n_per_class, args.d,
                                     args.mean_scale, args.sigma, args.ood_shift,
                                     args.seed, num_classes=args.k)
    train_ds, test_ds = datasets.split(full, args.train_frac, args.seed)
    paths = {"id_train": out / "id_train.fcft", "id_test": out / "id_test.fcft",
             "ood": out / "ood.fcft"}
    datasets.write_features(train_ds, paths["id_train"])
    datasets.write_features(test_ds, paths["id_test"])
    datasets.write_features(ood, paths["ood"])
    for tag, path in paths.items():
        print(f"{tag}: {path}")
    return 0


def cmd_train(args) -> int:
    cfg = parse_config(args.config, args.set)
    ds = datasets.read_features(cfg.train_features)
    d = cfg.dim or ds.dim
    if d != ds.dim:
        raise ConfigError(f"config dim {cfg.dim} != feature dim {ds.dim}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = flow.init_model(d, cfg.blocks, cfg.hidden or None, cfg.seed)
    log_path = out / "train_log.jsonl"
    ckpt_path = out / "model.fckp"
    proto_path = out / "prototypes.fcpt"
    labels = ds.labels.astype(np.int64)
    train_cfg = cfg.train_config()
    adam = train_cfg.fresh_adam()
    with open(log_path, "w") as log_fh:
        log_fh.write(json.dumps({"config": cfg.echo()}, sort_keys=True) + "\n")

        def on_record(rec: dict) -> None:
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")

        try:
            train.fit(model, ds.x64(), labels, train_cfg,
                      checkpoint_dir=out / "checkpoints" if cfg.checkpoint_every else None,
                      adam=adam, on_record=on_record)
        except TrainingDiverged as exc:
            log_fh.write(json.dumps({"error": str(exc)}) + "\n")
            print(f"numeric failure: {exc}", file=sys.stderr)
            ckpts = sorted((out / "checkpoints").glob("*.fckp")) \
                if (out / "checkpoints").exists() else []
            if ckpts:
                print(f"last good checkpoint: {ckpts[-1]}", file=sys.stderr)
            return 3
    flow.save_checkpoint(model, ckpt_path)
    train.save_optimizer_state(adam, cfg.epochs, model, out / "model.fcos")
    prototypes = oodscore.compute_prototypes(model, ds)
    oodscore.save_prototypes(prototypes, proto_path)
    print(f"checkpoint: {ckpt_path}")
    print(f"prototypes: {proto_path}")
    print(f"log: {log_path}")
    return 0


def _load_pair(args) -> tuple[flow.FlowModel, oodscore.ClassPrototypes]:
    model = flow.load_checkpoint(args.checkpoint)
    prototypes = oodscore.load_prototypes(args.prototypes)
    if prototypes.d != model.d:
        raise InvalidArgument(f"prototype dim {prototypes.d} != checkpoint dim {model.d}")
    return model, prototypes


def _ood_args(paths: list[str]) -> list[tuple[str, datasets.FeatureDataset]]:
    out = []
    for item in paths:
        if "=" in item:
            name, path = item.split("=", 1)
        else:
            name, path = Path(item).stem, item
        out.append((name, datasets.read_features(path)))
    return out


def _check_dim(model: flow.FlowModel, ds: datasets.FeatureDataset, what: str) -> None:
    if ds.dim != model.d:
        raise InvalidArgument(f"{what} dim {ds.dim} != checkpoint dim {model.d}")


def _metric_table(reports: list[evalmetrics.EvalReport]) -> str:
    head = f"{'set':>12}  {'AUROC':>8}  {'AUPR-S':>8}  {'AUPR-E':>8}  {'FPR-95':>8}"
    rows = [head, "-" * len(head)]
    for r in reports:
        if r.error is not None:
            rows.append(f"{r.name:>12}  error: {r.error}")
        else:
            rows.append(f"{r.name:>12}  {r.auroc:8.4f}  {r.aupr_s:8.4f}  "
                        f"{r.aupr_e:8.4f}  {r.fpr95:8.4f}")
    return "\n".join(rows)


def _run_eval(args, with_metrics: bool) -> list[evalmetrics.EvalReport]:
    model, prototypes = _load_pair(args)
    id_test = datasets.read_features(args.id_test)
    _check_dim(model, id_test, "id-test")
    ood_sets = _ood_args(args.ood)
    for name, ds in ood_sets:
        _check_dim(model, ds, f"ood set {name!r}")
    accuracy = None
    if with_metrics and bool(np.any(id_test.labeled_mask())):
        mask = id_test.labeled_mask()
        _, pred = oodscore.score_rows(model, prototypes, id_test.x64()[mask])
        accuracy = float(np.mean(pred == id_test.labels[mask].astype(np.int64)))
    reports = evalmetrics.evaluate_suite(model, prototypes, id_test, ood_sets,
                                         seed=args.seed, ratio=args.ratio,
                                         accuracy=accuracy)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for report in reports:
        if with_metrics:
            (out / f"eval_{report.name}.json").write_text(report.to_json() + "\n")
        if report.histogram is not None:
            evalmetrics.write_histogram_csv(report.histogram, out / f"hist_{report.name}.csv")
    if with_metrics:
        print(_metric_table(reports))
    return reports


def cmd_eval(args) -> int:
    _run_eval(args, with_metrics=True)
    return 0


def cmd_export_hist(args) -> int:
    _run_eval(args, with_metrics=False)
    return 0


def cmd_classify(args) -> int:
    model, prototypes = _load_pair(args)
    ds = datasets.read_features(args.features)
    _check_dim(model, ds, "features")
    mask = ds.labeled_mask()
    n_excluded = int(np.sum(~mask))
    if not np.any(mask):
        raise InvalidArgument("no labeled rows in the feature file")
    _, pred = oodscore.score_rows(model, prototypes, ds.x64()[mask])
    accuracy = float(np.mean(pred == ds.labels[mask].astype(np.int64)))
    payload = {"accuracy": accuracy, "n_evaluated": int(mask.sum()),
               "n_excluded_unlabeled": n_excluded}
    print(json.dumps(payload, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(payload, sort_keys=True) + "\n")
    return 0


def cmd_export_embed(args) -> int:
    model = flow.load_checkpoint(args.checkpoint)
    inputs = []
    for item in args.inputs:
        if "=" not in item:
            raise InvalidArgument(f"--in expects tag=path, got {item!r}")
        tag, path = item.split("=", 1)
        ds = datasets.read_features(path)
        _check_dim(model, ds, f"input {tag!r}")
        inputs.append((tag, ds))
    with open(args.out, "w") as fh:
        fh.write(",".join([f"z{i}" for i in range(model.d)] + ["label", "source"]) + "\n")
        for tag, ds in inputs:
            out = flow.flow_forward(model, ds.x64())
            for row, label in zip(out.z_flow, ds.labels):
                lab = -1 if label == datasets.UNLABELED else int(label)
                fh.write(",".join(f"{v:.12g}" for v in row) + f",{lab},{tag}\n")
    return 0


def cmd_sweep(args) -> int:
    lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
    if not lambdas:
        raise InvalidArgument("--lambdas must list at least one value")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = []
    for lam in lambdas:
        run_dir = out / f"lambda_{lam:g}"
        ns = argparse.Namespace(config=args.config,
                                set=(args.set or []) + [f"lambda={lam}",
                                                        f"out_dir={run_dir}"])
        rc = cmd_train(ns)
        if rc != 0:
            return rc
        eval_ns = argparse.Namespace(checkpoint=str(run_dir / "model.fckp"),
                                     prototypes=str(run_dir / "prototypes.fcpt"),
                                     id_test=args.id_test, ood=args.ood,
                                     out=str(run_dir / "eval"), ratio=args.ratio,
                                     seed=args.seed)
        reports = _run_eval(eval_ns, with_metrics=False)
        mean = next(r for r in reports if r.name == "mean")
        if not mean.metrics_ok():
            raise InvalidArgument(f"sweep lambda={lam}: {mean.error}")
        table.append({"lambda": lam, "auroc": mean.auroc, "aupr_s": mean.aupr_s,
                      "aupr_e": mean.aupr_e, "fpr95": mean.fpr95})
    (out / "sweep.json").write_text(json.dumps(table, sort_keys=True) + "\n")
    with open(out / "sweep.csv", "w") as fh:
        fh.write("lambda,auroc,aupr_s,aupr_e,fpr95\n")
        for row in table:
            fh.write(f"{row['lambda']!r},{row['auroc']!r},{row['aupr_s']!r},"
                     f"{row['aupr_e']!r},{row['fpr95']!r}\n")
    head = f"{'lambda':>8}  {'AUROC':>8}  {'AUPR-S':>8}  {'AUPR-E':>8}  {'FPR-95':>8}"
    print(head)
    print("-" * len(head))
    for row in table:
        print(f"{row['lambda']:8.3f}  {row['auroc']:8.4f}  {row['aupr_s']:8.4f}  "
              f"{row['aupr_e']:8.4f}  {row['fpr95']:8.4f}")
    return 0


# -- argument wiring ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowcon",
                                     description="Flow-based class-conditional density "
                                                 "estimation and OOD detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate synthetic ID/OOD feature files")
    p.add_argument("--kind", choices=["moons", "blobs"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--n", type=int, default=2500, help="total ID points (moons)")
    p.add_argument("--noise", type=float, default=0.08)
    p.add_argument("--n-ood", type=int, default=0, help="OOD rows (0 = kind default)")
    p.add_argument("--k", type=int, default=10, help="classes (blobs)")
    p.add_argument("--d", type=int, default=64, help="dimension (blobs)")
    p.add_argument("--n-per-class", type=int, default=625)
    p.add_argument("--mean-scale", type=float, default=6.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--ood-shift", type=float, default=8.0,
                   help="OOD blob radius in units of mean-scale")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train a flow on a feature file")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry")
    p.set_defaults(func=cmd_train)

    for name, fn, with_metrics in (("eval", cmd_eval, True),
                                   ("export-hist", cmd_export_hist, False)):
        p = sub.add_parser(name, help="score ID vs OOD feature files"
                           + ("" if with_metrics else " (histograms only)"))
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--prototypes", required=True)
        p.add_argument("--id-test", required=True)
        p.add_argument("--ood", action="append", required=True,
                       metavar="[NAME=]PATH")
        p.add_argument("--out", required=True)
        p.add_argument("--ratio", type=float, default=evalmetrics.DEFAULT_RATIO)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=fn)

    p = sub.add_parser("classify", help="Bayes-rule accuracy on labeled features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prototypes", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("export-embed", help="dump latent vectors as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="inputs", action="append", required=True,
                   metavar="TAG=PATH")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embed)

    p = sub.add_parser("sweep", help="train/eval once per lambda and tabulate metrics")
    p.add_argument("--config", required=True)
    p.add_argument("--lambdas", required=True, help="comma-separated lambda values")
    p.add_argument("--id-test", required=True)
    p.add_argument("--ood", action="append", required=True, metavar="[NAME=]PATH")
    p.add_argument("--out", required=True)
    p.add_argument("--ratio", type=float, default=evalmetrics.DEFAULT_RATIO)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidArgument, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, NumericError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except FlowconError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
