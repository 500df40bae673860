"""Command-line interface chaining the library into experiment pipelines.

Subcommands: split, synth, train, evaluate, ablate, compare. Reports are
JSON, curves and tables additionally CSV; every report embeds the resolved
configuration and seeds. Exit codes: 0 success, 2 bad configuration or
input, 3 numeric/training failure. The CENSURA_THREADS environment
variable bounds the worker pool used for ensemble members.
"""

import argparse
import csv
import glob as globmod
import json
import os
import sys

from . import dataset as ds_mod
from . import evaluation, serialize, synthgen
from .errors import DataLoadError, NumericError, SearchError, SplitError, TrainingError
from .models import (
    KINDS,
    OBSERVED_ONLY_KINDS,
    ForestParams,
    ModelKind,
    TrainedModel,
    predict,
    train,
)
from .network import NetworkSpec, TrainConfig

_ALEATORIC_KINDS = ("gaussian", "gaussian_ensemble", "evidential")


def _default_source(kind_name):
    return "aleatoric" if kind_name in _ALEATORIC_KINDS else "epistemic"


def _load_config(path):
    with open(path) as fh:
        return json.load(fh)


def _schema_for(path, transform, sparse_dim):
    if sparse_dim:
        return ds_mod.ColumnSchema(
            sparse_column="sparse", sparse_dim=int(sparse_dim), transform=transform
        )
    with open(path, newline="") as fh:
        header = [h.strip() for h in next(csv.reader(fh))]
    return ds_mod.schema_from_header(header, transform=transform)


def _load_dataset(path, transform="none", sparse_dim=None):
    return ds_mod.load_csv(path, _schema_for(path, transform, sparse_dim))


def _dataset_from_config(cfg):
    """Dataset named by a config: either a CSV path or an inline synth spec."""
    if "synth" in cfg:
        spec = synthgen.SynthSpec(**cfg["synth"])
        ds, _ = synthgen.generate(spec, int(cfg.get("synth_seed", 0)))
    elif "dataset" in cfg:
        ds = _load_dataset(
            cfg["dataset"], cfg.get("transform", "none"), cfg.get("sparse_dim")
        )
    else:
        raise ValueError("config needs a 'dataset' path or a 'synth' block")
    if cfg.get("aggregate"):
        ds, _ = ds_mod.aggregate_duplicates(ds)
    if cfg.get("control_id"):
        ds, _ = ds_mod.extract_control(ds, cfg["control_id"])
    return ds


def _make_kind(cfg, name, input_dim):
    if name not in KINDS:
        raise ValueError(f"unknown model kind {name!r}")
    if name == "random_forest":
        return ModelKind(name=name, forest=ForestParams(**cfg.get("forest", {})))
    network = NetworkSpec(input_dim=input_dim, **cfg.get("network", {}))
    config = TrainConfig(**cfg.get("train", {}))
    return ModelKind(
        name=name,
        network=network,
        train_config=config,
        members=cfg.get("members"),
        inference_samples=int(cfg.get("inference_samples", 500)),
    )


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_split(args):
    ds = _load_dataset(args.input, args.transform, args.sparse_dim)
    control_std = None
    if args.aggregate:
        ds, _ = ds_mod.aggregate_duplicates(ds)
    if args.control_id:
        ds, control_std = ds_mod.extract_control(ds, args.control_id)
    ts = ds_mod.temporal_split(ds)
    os.makedirs(args.out, exist_ok=True)
    manifest = ds_mod.split_manifest(ts, ds)
    manifest["input"] = args.input
    if control_std is not None:
        manifest["control_std"] = control_std
    serialize.dump_json(manifest, os.path.join(args.out, "manifest.json"))
    for number in (1, 2, 3):
        tr, va, te = ts.setting(number)
        for part, idx in (("train", tr), ("validation", va), ("test", te)):
            ds_mod.save_csv(
                ds.take(idx),
                os.path.join(args.out, f"setting{number}_{part}.csv"),
            )
    print(f"wrote manifest and 3 settings to {args.out}")
    return 0


def cmd_synth(args):
    spec = synthgen.SynthSpec(**_load_config(args.spec))
    ds, gt = synthgen.generate(spec, args.seed)
    os.makedirs(args.out, exist_ok=True)
    ds_mod.save_csv(ds, os.path.join(args.out, "dataset.csv"))
    synthgen.save_ground_truth(gt, os.path.join(args.out, "ground_truth.csv"))
    serialize.dump_json(
        {"spec": spec.to_dict(), "seed": args.seed,
         "n_censored": ds.n_censored, "n_observed": ds.n_observed},
        os.path.join(args.out, "meta.json"),
    )
    print(f"wrote {len(ds)} rows ({ds.n_censored} censored) to {args.out}")
    return 0


def cmd_train(args):
    cfg = _load_config(args.config)
    ds = _dataset_from_config(cfg)
    ts = ds_mod.temporal_split(ds)
    tr_idx, va_idx, te_idx = ts.setting(args.setting)
    use_censored = args.censored == "on"
    seed = int(cfg.get("seed", 0))
    kind = _make_kind(cfg, args.model, ds.dim)
    model = train(kind, ds.take(tr_idx), ds.take(va_idx),
                  use_censored=use_censored, seed=seed)

    out_dir = args.out or cfg.get("out", ".")
    os.makedirs(out_dir, exist_ok=True)
    arm = "censored" if use_censored else "observed"
    stem = f"{args.model}_setting{args.setting}_{arm}"
    model_path = os.path.join(out_dir, f"{stem}.model.json")
    model.save(model_path)
    serialize.dump_json(
        {"config": cfg, "model": args.model, "setting": args.setting,
         "censored": use_censored, "seed": seed,
         "n_train": len(tr_idx), "n_validation": len(va_idx),
         "n_test": len(te_idx),
         "logs": model.metadata.get("training_logs", [])},
        os.path.join(out_dir, f"{stem}.log.json"),
    )
    print(f"wrote {model_path}")
    return 0


def cmd_evaluate(args):
    model = TrainedModel.load(args.model)
    test = _load_dataset(args.test, args.transform, args.sparse_dim)
    preds = predict(model, test.features)
    source = args.source
    if source == "auto":
        source = _default_source(model.kind.name)
    try:
        report = evaluation.evaluate(preds, test.targets, source, n_bins=args.bins)
    except ValueError as exc:
        raise ValueError(f"model kind {model.kind.name!r}: {exc}") from None

    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.model))[0]
    stem = stem[: -len(".model")] if stem.endswith(".model") else stem
    doc = report.to_dict()
    doc["model"] = model.kind.name
    doc["seed"] = model.metadata.get("seed")
    doc["artifact"] = args.model
    doc["test"] = args.test
    serialize.dump_json(doc, os.path.join(args.out, f"{stem}.report.json"))
    _write_csv(
        os.path.join(args.out, f"{stem}.calibration.csv"),
        ["expected", "observed"],
        [
            [repr(float(e)), repr(float(o))]
            for e, o in zip(
                report.calibration.expected_fractions,
                report.calibration.observed_fractions,
            )
        ],
    )
    rmse, rmv = evaluation.ence_bins(preds, test.targets, source, args.bins)
    _write_csv(
        os.path.join(args.out, f"{stem}.ence.csv"),
        ["bin", "rmse", "rmv"],
        [[i, repr(float(a)), repr(float(b))] for i, (a, b) in enumerate(zip(rmse, rmv))],
    )
    print(
        f"{model.kind.name} ({source}): mse={report.mse:.4f} "
        f"nll={report.nll:.4f} ence={report.ence:.4f}"
    )
    return 0


def _ablate_model_entries(cfg):
    entries = []
    for item in cfg.get("models", []):
        if isinstance(item, str):
            entry = {"kind": item, "source": _default_source(item)}
        else:
            entry = {"kind": item["kind"],
                     "source": item.get("source", _default_source(item["kind"]))}
        if entry["kind"] in OBSERVED_ONLY_KINDS:
            raise ValueError(
                f"{entry['kind']} is an observed-only baseline; "
                "it cannot join the censored-vs-observed ablation"
            )
        entries.append(entry)
    if not entries:
        raise ValueError("ablation config lists no models")
    return entries


def cmd_ablate(args):
    cfg = _load_config(args.config)
    entries = _ablate_model_entries(cfg)
    settings = cfg.get("settings", [1, 2, 3])
    repeats = int(cfg.get("repeats", 10))
    base_seed = int(cfg.get("seed", 0))
    alternative = cfg.get("alternative", "two_sided")
    ds = _dataset_from_config(cfg)
    ts = ds_mod.temporal_split(ds)

    rows = []
    detail = []
    for entry in entries:
        for setting in settings:
            tr_idx, va_idx, te_idx = ts.setting(setting)
            train_ds, val_ds = ds.take(tr_idx), ds.take(va_idx)
            test_ds = ds.take(te_idx)
            observed_scores, censored_scores = [], []
            for r in range(repeats):
                seed = base_seed + r
                kind = _make_kind(cfg, entry["kind"], ds.dim)
                for use_censored, bucket in (
                    (True, censored_scores),
                    (False, observed_scores),
                ):
                    model = train(kind, train_ds, val_ds,
                                  use_censored=use_censored, seed=seed)
                    preds = predict(model, test_ds.features)
                    bucket.append(
                        evaluation.eval_nll(preds, test_ds.targets, entry["source"])
                    )
            delta, p, verdict = evaluation.ablation_delta_nll(
                observed_scores, censored_scores, alternative=alternative
            )
            rows.append([entry["kind"], entry["source"], setting,
                         repr(delta), repr(p), verdict])
            detail.append(
                {"model": entry["kind"], "source": entry["source"],
                 "setting": setting, "delta_nll": delta, "p_value": p,
                 "verdict": verdict, "nll_observed": observed_scores,
                 "nll_censored": censored_scores}
            )
            print(f"{entry['kind']}/{entry['source']} setting {setting}: "
                  f"dNLL={delta:+.4f} p={p:.4g} -> {verdict}")

    os.makedirs(args.out, exist_ok=True)
    serialize.dump_json(
        {"config": cfg, "results": detail},
        os.path.join(args.out, "ablation.json"),
    )
    _write_csv(
        os.path.join(args.out, "ablation.csv"),
        ["model", "source", "setting", "delta_nll", "p_value", "verdict"],
        rows,
    )
    return 0


def cmd_compare(args):
    paths = sorted(globmod.glob(args.reports))
    if not paths:
        raise ValueError(f"no reports match {args.reports!r}")
    scores = {}
    for path in paths:
        doc = serialize.load_json(path)
        scores.setdefault(doc["model"], []).append(float(doc[args.metric]))
    ranking = evaluation.compare_models(scores, lower_is_better=True)
    os.makedirs(args.out, exist_ok=True)
    serialize.dump_json(
        {"metric": args.metric, "reports": paths, "ranking": ranking},
        os.path.join(args.out, "ranking.json"),
    )
    _write_csv(
        os.path.join(args.out, "ranking.csv"),
        ["model", "mean", "starred", "p_vs_best"],
        [
            [r["model"], repr(r["mean"]), r["starred"],
             "" if r["p_vs_best"] is None else repr(r["p_vs_best"])]
            for r in ranking
        ],
    )
    for r in ranking:
        star = "*" if r["starred"] else " "
        print(f"{star} {r['model']}: {args.metric}={r['mean']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="censura",
        description="censored-regression uncertainty quantification toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="temporal five-fold split of a CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--transform", default="none", choices=ds_mod.LABEL_TRANSFORMS)
    p.add_argument("--sparse-dim", type=int, default=None)
    p.add_argument("--aggregate", action="store_true",
                   help="aggregate duplicate ids before splitting")
    p.add_argument("--control-id", default=None)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="JSON file with SynthSpec fields")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model on one temporal setting")
    p.add_argument("--config", required=True)
    p.add_argument("--setting", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--model", required=True, choices=KINDS)
    p.add_argument("--censored", required=True, choices=("on", "off"))
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a model artifact on a test CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--source", default="auto",
                   choices=("auto", "aleatoric", "epistemic"))
    p.add_argument("--transform", default="none", choices=ds_mod.LABEL_TRANSFORMS)
    p.add_argument("--sparse-dim", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="censored-vs-observed training ablation")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("compare", help="rank models from evaluation reports")
    p.add_argument("--reports", required=True, help="glob of report JSON files")
    p.add_argument("--metric", default="mse", choices=("mse", "nll", "ence"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except (NumericError, TrainingError, SearchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataLoadError, SplitError, ValueError, KeyError, OSError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
