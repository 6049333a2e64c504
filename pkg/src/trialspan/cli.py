"""Command-line surface: ingest, stats, split, embed, train, baseline,
evaluate, predict, explain.

Configuration lives in one JSON document (``--config``); every field can
also be set with a dotted flag (``--provider.dim 32``), and flags override
the file. Each subcommand reads and writes only its declared artifacts and
is idempotent: identical inputs and seeds reproduce identical bytes.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
error; failures print one line to stderr prefixed ``ERROR <code>:``.
"""

from __future__ import annotations

import argparse
import glob as globmod
import hashlib
import json
import sys
from dataclasses import asdict
from datetime import date
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (
    GBDTConfig,
    flat_features,
    flat_mlp_fit,
    gbdt_fit,
    load_baseline,
    mean_fit,
    ridge_fit,
    save_baseline,
)
from .embedding import (
    HashedProvider,
    build_features,
    embed_dataset,
    load_cache,
    load_embedded,
    save_embedded,
)
from .encoder import ModelConfig, batch_arrays, forward_batch, load_checkpoint
from .errors import DataFormatError, TrialspanError, UsageError
from .explain import (
    EXACT_LIMIT,
    game_from_record,
    render_attribution,
    save_attribution,
    shapley_exact,
    shapley_sampled,
)
from .ingest import ingest_directory, load_jsonl, save_jsonl, split_temporal, summarize
from .metrics import (
    ComparisonReport,
    compare_errors,
    emit_report,
    evaluate,
    merge_runs,
)
from .training import TrainConfig, train, write_loss_csv

DEFAULT_CONFIG = {
    "paths": {
        "xml_dir": None,
        "dataset": None,
        "train": None,
        "test": None,
        "checkpoint": None,
        "report_dir": None,
    },
    "provider": {"kind": "hashed", "dim": 768, "seed": 0, "cache_path": None},
    "model": {
        "d": None,  # defaults to the embedding dim of the data
        "heads": 2,
        "layers": 1,
        "ffn_dim": None,
        "mlp_hidden1": None,
        "mlp_hidden2": None,
        "dropout": 0.1,
        "seed": 0,
    },
    "train": {
        "lr": 0.001,
        "batch_size": 32,
        "epochs": 200,
        "shuffle_seed": 0,
        "phase_filter": None,
        "early_stop_patience": None,
        "val_fraction": 0.1,
    },
    "cutoff": "2019-01-01",
    "seeds": [0, 1, 2, 3, 4],
}

# dotted flag -> (json type, help); registered per subcommand group
_FLAG_GROUPS = {
    "provider": {
        "provider.kind": (str, "embedding provider: hashed or cache"),
        "provider.dim": (int, "embedding dimension d"),
        "provider.seed": (int, "hash seed for the hashed provider"),
        "provider.cache_path": (str, "tdem-jsonl cache file for the cache provider"),
    },
    "model": {
        "model.d": (int, "model embedding dim (defaults to the data's dim)"),
        "model.heads": (int, "attention heads (2, 3 or 4)"),
        "model.layers": (int, "transformer layers"),
        "model.ffn_dim": (int, "feed-forward width (default d)"),
        "model.mlp_hidden1": (int, "first MLP hidden width (default 2d)"),
        "model.mlp_hidden2": (int, "second MLP hidden width (default d)"),
        "model.dropout": (float, "dropout ratio"),
        "model.seed": (int, "parameter init seed"),
    },
    "train": {
        "train.lr": (float, "Adam learning rate"),
        "train.batch_size": (int, "minibatch size"),
        "train.epochs": (int, "training epochs"),
        "train.shuffle_seed": (int, "shuffle/dropout seed"),
        "train.phase_filter": (int, "train only on this phase (1..4)"),
        "train.early_stop_patience": (int, "stop after this many stale validation epochs"),
        "train.val_fraction": (float, "validation tail fraction when early stopping"),
    },
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dest(dotted: str) -> str:
    return dotted.replace(".", "__")


def _add_group_flags(parser, groups):
    for group in groups:
        for dotted, (typ, help_text) in _FLAG_GROUPS[group].items():
            parser.add_argument(f"--{dotted}", dest=_dest(dotted), type=typ,
                                default=None, help=help_text, metavar="V")


def _merge_config(args) -> dict:
    config = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise DataFormatError(f"{args.config}: bad config JSON: {err}") from err
        for section, value in loaded.items():
            if isinstance(value, dict) and isinstance(config.get(section), dict):
                config[section].update(value)
            else:
                config[section] = value
    for group in _FLAG_GROUPS.values():
        for dotted in group:
            value = getattr(args, _dest(dotted), None)
            if value is not None:
                section, leaf = dotted.split(".", 1)
                config[section][leaf] = value
    return config


def _provider(config):
    cfg = config["provider"]
    if cfg["kind"] == "hashed":
        return HashedProvider(dim=int(cfg["dim"]), seed=int(cfg["seed"]))
    if cfg["kind"] == "cache":
        if not cfg.get("cache_path"):
            raise UsageError("provider.kind=cache requires provider.cache_path")
        return load_cache(cfg["cache_path"])
    raise UsageError(f"unknown provider kind {cfg['kind']!r}")


def _model_config(config, data_dim: int) -> ModelConfig:
    cfg = dict(config["model"])
    d = cfg.pop("d") or data_dim
    if d != data_dim:
        raise UsageError(f"model.d={d} but the embedded data has d={data_dim}")
    try:
        return ModelConfig(d=d, **cfg)
    except ValueError as err:
        raise UsageError(str(err)) from err


def _train_config(config) -> TrainConfig:
    cfg = config["train"]
    early = None
    if cfg.get("early_stop_patience") is not None:
        early = (int(cfg["early_stop_patience"]), float(cfg["val_fraction"]))
    try:
        return TrainConfig(
            lr=float(cfg["lr"]),
            batch_size=int(cfg["batch_size"]),
            epochs=int(cfg["epochs"]),
            shuffle_seed=int(cfg["shuffle_seed"]),
            phase_filter=cfg.get("phase_filter"),
            early_stop=early,
        )
    except ValueError as err:
        raise UsageError(str(err)) from err


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(path: Path, command: str, config: dict, artifacts: list[Path],
                    extra: dict | None = None) -> None:
    doc = {
        "command": command,
        "build": f"trialspan {__version__}",
        "config": config,
        "seeds": config.get("seeds"),
        "artifacts": {art.name: _sha256(art) for art in artifacts},
    }
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- subcommands ---------------------------------------------------------------


def _cmd_ingest(args, config):
    xml_dir = args.xml_dir or config["paths"]["xml_dir"]
    out = args.out or config["paths"]["dataset"]
    if not xml_dir or not out:
        raise UsageError("ingest needs --xml-dir and --out")
    records, skips = ingest_directory(xml_dir)
    save_jsonl(records, out)
    print(f"kept {len(records)} records -> {out}")
    reasons: dict[str, int] = {}
    for skip in skips:
        reasons[skip.reason] = reasons.get(skip.reason, 0) + 1
    for reason in sorted(reasons):
        print(f"skipped {reasons[reason]}: {reason}")
    return 0


def _cmd_stats(args, config):
    dataset = args.dataset or config["paths"]["dataset"]
    if not dataset:
        raise UsageError("stats needs --in")
    records = load_jsonl(dataset)
    stats = summarize(records)
    doc = {"overall": asdict(stats.overall),
           "per_phase": {str(k): None if v is None else asdict(v)
                         for k, v in stats.per_phase.items()}}
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def _cmd_split(args, config):
    dataset = args.dataset or config["paths"]["dataset"]
    train_out = args.train_out or config["paths"]["train"]
    test_out = args.test_out or config["paths"]["test"]
    if not dataset or not train_out or not test_out:
        raise UsageError("split needs --in, --train-out and --test-out")
    cutoff = date.fromisoformat(args.cutoff or config["cutoff"])
    split = split_temporal(load_jsonl(dataset), cutoff)
    save_jsonl(split.train, train_out)
    save_jsonl(split.test, test_out)
    print(f"train {len(split.train)} -> {train_out}")
    print(f"test {len(split.test)} -> {test_out}")
    return 0


def _cmd_embed(args, config):
    if not args.dataset or not args.out:
        raise UsageError("embed needs --in and --out")
    provider = _provider(config)
    trials = embed_dataset(provider, load_jsonl(args.dataset))
    save_embedded(trials, args.out)
    print(f"embedded {len(trials)} trials at d={provider.dim} -> {args.out}")
    return 0


def _cmd_train(args, config):
    if not args.embedded:
        raise UsageError("train needs --in (embedded dataset)")
    checkpoint = Path(args.checkpoint or config["paths"]["checkpoint"] or "model.ckpt")
    trials = load_embedded(args.embedded)
    if args.seed is not None:
        config["model"]["seed"] = args.seed
        config["train"]["shuffle_seed"] = args.seed
    if args.phase is not None:
        config["train"]["phase_filter"] = args.phase
    model_config = _model_config(config, trials[0].dim)
    train_config = _train_config(config)
    if args.pool != "mean":
        print(f"note: --pool {args.pool} is reserved for providers with "
              "token-level pooling; the built-in providers emit one vector "
              "per sentence, so it only gets recorded in the manifest")
    best_path = Path(args.best_checkpoint) if args.best_checkpoint else None
    result = train(model_config, train_config, trials,
                   checkpoint_path=checkpoint, best_checkpoint_path=best_path)
    loss_csv = Path(args.loss_csv) if args.loss_csv else checkpoint.parent / (checkpoint.name + ".loss.csv")
    write_loss_csv(result.history, loss_csv)
    artifacts = [checkpoint, checkpoint.parent / (checkpoint.name + ".bin"), loss_csv]
    if best_path is not None and result.best_params is not None:
        artifacts += [best_path, best_path.parent / (best_path.name + ".bin")]
    manifest = Path(args.manifest) if args.manifest else checkpoint.parent / (checkpoint.name + ".manifest.json")
    _write_manifest(manifest, "train", config, artifacts, extra={"pool": args.pool})
    final = result.history[-1]
    print(f"trained {len(result.history)} epochs, final train MSE "
          f"{final.train_mse:.6f} -> {checkpoint}")
    return 0


def _cmd_baseline(args, config):
    if not args.embedded or not args.out:
        raise UsageError("baseline needs --in and --out")
    trials = load_embedded(args.embedded)
    X, y, _ = flat_features(trials)
    if np.isnan(y).any():
        raise DataFormatError("baseline training data has unlabeled trials")
    if args.kind == "mean":
        model = mean_fit(y)
    elif args.kind == "ridge":
        model = ridge_fit(X, y, lam=args.ridge_lambda)
    elif args.kind == "gbdt":
        model = gbdt_fit(X, y, GBDTConfig(
            n_trees=args.gbdt_trees, max_depth=args.gbdt_depth,
            learning_rate=args.gbdt_lr, min_samples_leaf=args.gbdt_min_leaf))
    elif args.kind == "mlp":
        model = flat_mlp_fit(X, y, dropout=config["model"]["dropout"],
                             seed=config["model"]["seed"],
                             train_config=_train_config(config))
    else:
        raise UsageError(f"unknown baseline kind {args.kind!r}")
    save_baseline(model, args.out)
    print(f"fit {args.kind} baseline on {len(trials)} trials -> {args.out}")
    return 0


def _predictions(artifact: Path, trials, X):
    """Predictions for one model artifact: baseline JSON or checkpoint."""
    doc = json.loads(artifact.read_text(encoding="utf-8"))
    if "kind" in doc:
        return load_baseline(artifact).predict(X)
    params = load_checkpoint(artifact)
    yhat, _ = forward_batch(params, *batch_arrays(trials), train_mode=False)
    return yhat


def _resolve_models(spec: str, config) -> list[tuple[str, list[Path]]]:
    """Parse "name=path,name=path"; paths may be globs (one run per match).

    Bare names resolve to <report_dir>/<name>.json, or the configured
    checkpoint for the name "attention".
    """
    out = []
    report_dir = config["paths"]["report_dir"] or "."
    for entry in spec.split(","):
        entry = entry.strip()
        if not entry:
            continue
        if "=" in entry:
            name, pattern = entry.split("=", 1)
        elif entry == "attention" and config["paths"]["checkpoint"]:
            name, pattern = entry, config["paths"]["checkpoint"]
        else:
            name, pattern = entry, str(Path(report_dir) / f"{entry}.json")
        matches = sorted(globmod.glob(pattern))
        paths = [Path(p) for p in matches] if matches else [Path(pattern)]
        for p in paths:
            if not p.exists():
                raise DataFormatError(f"model artifact not found: {p}")
        out.append((name.strip(), paths))
    if not out:
        raise UsageError("no models given")
    return out


def _cmd_evaluate(args, config):
    if not args.test or not args.models:
        raise UsageError("evaluate needs --test and --models")
    trials = load_embedded(args.test)
    X, y, phases = flat_features(trials)
    if np.isnan(y).any():
        raise DataFormatError("evaluation data has unlabeled trials")
    models = _resolve_models(args.models, config)
    reports = []
    mean_preds: dict[str, np.ndarray] = {}
    for name, paths in models:
        runs = [_predictions(p, trials, X) for p in paths]
        reports.append(merge_runs([evaluate(name, y, yhat, phases) for yhat in runs]))
        mean_preds[name] = np.mean(runs, axis=0)
    p_values: dict[str, float | None] = {}
    if args.ref:
        if args.ref not in mean_preds:
            raise UsageError(f"--ref {args.ref} is not among the evaluated models")
        abs_errors = {name: np.abs(y - yhat) for name, yhat in mean_preds.items()}
        p_values = compare_errors(abs_errors, args.ref, n_boot=args.n_boot, seed=args.seed)
    report = ComparisonReport(models=reports, reference=args.ref,
                              p_values=p_values, n_boot=args.n_boot, seed=args.seed)
    base = Path(args.out or (Path(config["paths"]["report_dir"] or ".") / "report"))
    json_path, csv_path = emit_report(report, base)
    manifest = base.with_suffix(".manifest.json")
    _write_manifest(manifest, "evaluate", config, [json_path, csv_path])
    for er in report.models:
        row = er.row("All")
        mae_mean = np.mean([v for v in row.metrics["mae"] if v is not None])
        suffix = ""
        if er.model in p_values and p_values[er.model] is not None:
            suffix = f"  (p={p_values[er.model]:.4f} vs {args.ref})"
        print(f"{er.model}: MAE {mae_mean:.4f} years over {len(row.metrics['mae'])} run(s){suffix}")
    print(f"report -> {json_path} {csv_path}")
    return 0


def _find_record(records, nct_id):
    for record in records:
        if record.nct_id == nct_id:
            return record
    raise DataFormatError(f"no record with nct_id {nct_id}")


def _cmd_predict(args, config):
    checkpoint = args.checkpoint or config["paths"]["checkpoint"]
    if not checkpoint or not args.nct:
        raise UsageError("predict needs --checkpoint and --nct")
    params = load_checkpoint(Path(checkpoint))
    if args.embedded:
        trials = [t for t in load_embedded(args.embedded) if t.nct_id == args.nct]
        if not trials:
            raise DataFormatError(f"no embedded trial with nct_id {args.nct}")
        trial = trials[0]
    else:
        dataset = args.dataset or config["paths"]["dataset"]
        if not dataset:
            raise UsageError("predict needs --in (embedded) or --dataset (jsonl)")
        provider = _provider(config)
        if provider.dim != params.config.d:
            raise UsageError(f"provider dim {provider.dim} != model d {params.config.d}")
        record = _find_record(load_jsonl(dataset), args.nct)
        trial = build_features(provider, record)
    yhat, _ = forward_batch(params, *batch_arrays([trial]), train_mode=False)
    print(json.dumps({"nct_id": args.nct, "pred_years": float(yhat[0])}))
    return 0


def _cmd_explain(args, config):
    checkpoint = args.checkpoint or config["paths"]["checkpoint"]
    dataset = args.dataset or config["paths"]["dataset"]
    if not checkpoint or not dataset or not args.nct or not args.out:
        raise UsageError("explain needs --checkpoint, --dataset, --nct and --out")
    params = load_checkpoint(Path(checkpoint))
    provider = _provider(config)
    if provider.dim != params.config.d:
        raise UsageError(f"provider dim {provider.dim} != model d {params.config.d}")
    record = _find_record(load_jsonl(dataset), args.nct)
    game = game_from_record(params, provider, record, unit=args.unit,
                            sentence_index=args.sentence)
    if args.mode == "exact":
        if game.n > EXACT_LIMIT:
            raise UsageError(
                f"{game.n} items is too many for exact mode (limit {EXACT_LIMIT}); "
                "use --mode sampled")
        attr = shapley_exact(game)
    else:
        attr = shapley_sampled(game, n_perms=args.n_perms, seed=args.seed)
    base = Path(args.out)
    save_attribution(attr, base.with_suffix(".json"))
    txt_path, html_path = render_attribution(attr, base)
    print(f"attribution -> {base.with_suffix('.json')} {txt_path} {html_path}")
    return 0


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trialspan",
                     description="clinical-trial duration prediction pipeline")
    parser.add_argument("--version", action="version", version=f"trialspan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text, groups=()):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON config file; flags override it")
        _add_group_flags(p, groups)
        return p

    p = command("ingest", "parse registry XML files into a dataset JSONL")
    p.add_argument("--xml-dir", help="directory of one-trial-per-file XML documents")
    p.add_argument("--out", help="output dataset JSONL")
    p.set_defaults(func=_cmd_ingest)

    p = command("stats", "duration statistics for a dataset JSONL")
    p.add_argument("--in", dest="dataset", help="dataset JSONL")
    p.add_argument("--out", help="write JSON here instead of stdout")
    p.set_defaults(func=_cmd_stats)

    p = command("split", "temporal train/test partition by start date")
    p.add_argument("--in", dest="dataset", help="dataset JSONL")
    p.add_argument("--cutoff", help="ISO date; trials starting on/after it go to test")
    p.add_argument("--train-out", help="output JSONL for the training split")
    p.add_argument("--test-out", help="output JSONL for the test split")
    p.set_defaults(func=_cmd_split)

    p = command("embed", "embed a dataset JSONL into feature tensors", ("provider",))
    p.add_argument("--in", dest="dataset", help="dataset JSONL")
    p.add_argument("--out", help="output embedded dataset (.npz)")
    p.set_defaults(func=_cmd_embed)

    p = command("train", "train the attention model", ("model", "train"))
    p.add_argument("--in", dest="embedded", help="embedded training dataset (.npz)")
    p.add_argument("--checkpoint", help="output checkpoint manifest path")
    p.add_argument("--best-checkpoint", help="also write the best-validation checkpoint here")
    p.add_argument("--loss-csv", help="loss curve CSV (default <checkpoint>.loss.csv)")
    p.add_argument("--manifest", help="run manifest path (default <checkpoint>.manifest.json)")
    p.add_argument("--seed", type=int, help="sets both model.seed and train.shuffle_seed")
    p.add_argument("--phase", type=int, choices=(1, 2, 3, 4),
                   help="train on a single phase")
    p.add_argument("--pool", choices=("mean", "max", "cls"), default="mean",
                   help="reserved for providers that expose token-level pooling; "
                        "recorded in the manifest")
    p.set_defaults(func=_cmd_train)

    p = command("baseline", "fit a reference regressor on flat features", ("model", "train"))
    p.add_argument("--kind", required=True, choices=("mean", "ridge", "gbdt", "mlp"))
    p.add_argument("--in", dest="embedded", help="embedded training dataset (.npz)")
    p.add_argument("--out", help="output model artifact (JSON)")
    p.add_argument("--ridge-lambda", type=float, default=1.0, help="L2 penalty for ridge")
    p.add_argument("--gbdt-trees", type=int, default=200)
    p.add_argument("--gbdt-depth", type=int, default=3)
    p.add_argument("--gbdt-lr", type=float, default=0.1)
    p.add_argument("--gbdt-min-leaf", type=int, default=5)
    p.set_defaults(func=_cmd_baseline)

    p = command("evaluate", "comparative evaluation with significance vs a reference")
    p.add_argument("--test", help="embedded test dataset (.npz)")
    p.add_argument("--models", help="comma list of name=artifact (globs allowed) or bare names")
    p.add_argument("--ref", help="reference model name for paired-bootstrap p-values")
    p.add_argument("--n-boot", type=int, default=10000, help="bootstrap resamples")
    p.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    p.add_argument("--out", help="report base path (writes .json and .csv)")
    p.set_defaults(func=_cmd_evaluate)

    p = command("predict", "predict the duration of one trial", ("provider",))
    p.add_argument("--checkpoint", help="model checkpoint manifest")
    p.add_argument("--nct", help="trial identifier")
    p.add_argument("--in", dest="embedded", help="embedded dataset holding the trial")
    p.add_argument("--dataset", help="dataset JSONL (embedded on the fly)")
    p.set_defaults(func=_cmd_predict)

    p = command("explain", "Shapley attribution for one prediction", ("provider",))
    p.add_argument("--checkpoint", help="model checkpoint manifest")
    p.add_argument("--dataset", help="dataset JSONL with the trial")
    p.add_argument("--nct", help="trial identifier")
    p.add_argument("--unit", choices=("sentence", "word"), default="sentence")
    p.add_argument("--sentence", type=int,
                   help="sentence item index for the word unit")
    p.add_argument("--mode", choices=("exact", "sampled"), default="exact")
    p.add_argument("--n-perms", type=int, default=2000, help="permutations in sampled mode")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--out", help="output base path (.json, .txt, .html)")
    p.set_defaults(func=_cmd_explain)

    return parser


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        config = _merge_config(args)
        return args.func(args, config)
    except TrialspanError as err:
        print(f"ERROR {err.exit_code}: {err}", file=sys.stderr)
        return err.exit_code
    except (OSError, ValueError, KeyError) as err:
        print(f"ERROR 2: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
