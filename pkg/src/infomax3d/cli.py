"""Command-line pipeline: synthesize data, train, pretrain, probe,
evaluate folds and compare models.

Configuration is flat ``key=value`` text (``#`` comments allowed); command
line flags override file values and unknown keys are rejected. Exit codes:
0 success, 2 usage/config error, 3 numerical failure (non-finite loss).
Every command confines its outputs to its ``out_dir`` and snapshots the
resolved configuration there, so (snapshot, seed) reproduces the run.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from . import evaluation, gradsuite
from .encoders import build_encoder, load_checkpoint, save_checkpoint
from .objectives import StatisticsNetworks
from .encoders import ClassifierHead
from .training import (
    NumericalError,
    evaluate_split,
    head_balanced_accuracy,
    TrainConfig,
    extract_features,
    pretrain_dim,
    train_probe,
    train_supervised,
)

__all__ = ["main", "ConfigError"]


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config plumbing

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _as_bool(v):
    if isinstance(v, bool):
        return v
    if str(v).lower() not in _BOOL:
        raise ConfigError(f"expected a boolean, got {v!r}")
    return _BOOL[str(v).lower()]


def _as_int_list(v):
    if isinstance(v, list):
        return [int(x) for x in v]
    try:
        return [int(x) for x in str(v).split(",") if x != ""]
    except ValueError as err:
        raise ConfigError(f"expected comma-separated integers, got {v!r}") from err


_COMMON_RUN = {
    "out_dir": (str, None),
    "seed": (int, 0),
    "canonical": (_as_bool, True),
}

SCHEMAS: dict[str, dict] = {
    "synth": {
        **_COMMON_RUN,
        "side": (int, 32),
        "n_per_class": (_as_int_list, [50, 50, 50, 50]),
        "noise_sigma": (float, 0.2),
    },
    "train": {
        **_COMMON_RUN,
        "manifest": (str, None),
        "preset": (str, "alexnet_mini"),
        "input_side": (int, 0),
        "num_classes": (int, 4),
        "fold": (int, 0),
        "n_folds": (int, 5),
        "holdout_fraction": (float, 0.07),
        "split_seed": (int, 0),
        "epochs": (int, 500),
        "learning_rate": (float, 0.001),
        "batch_size": (int, 8),
        "lambda_l1": (float, 0.0),
        "burn_in": (int, 50),
        "augment": (_as_bool, False),
        "flip_prob": (float, 0.5),
    },
    "pretrain": {
        **_COMMON_RUN,
        "manifest": (str, None),
        "preset": (str, "dim_alexnet_mini"),
        "input_side": (int, 0),
        "estimator": (str, "jsd"),
        "embed_dim": (int, 512),
        "n_folds": (int, 5),
        "holdout_fraction": (float, 0.07),
        "split_seed": (int, 0),
        "epochs": (int, 1000),
        "learning_rate": (float, 0.0001),
        "batch_size": (int, 8),
        "lambda_l1": (float, 0.0),
        "ss": (_as_bool, False),
    },
    "probe": {
        **_COMMON_RUN,
        "manifest": (str, None),
        "encoder_ckpt": (str, None),
        "preset": (str, "dim_alexnet_mini"),
        "input_side": (int, 0),
        "tap": (str, "z"),
        "num_classes": (int, 4),
        "fold": (int, 0),
        "n_folds": (int, 5),
        "holdout_fraction": (float, 0.07),
        "split_seed": (int, 0),
        "epochs": (int, 1000),
        "learning_rate": (float, 0.001),
        "batch_size": (int, 8),
        "lambda_l1": (float, 0.0),
        "burn_in": (int, 50),
    },
    "eval": {
        **_COMMON_RUN,
        "manifest": (str, None),
        "model": (str, None),
        "runs": (str, None),  # comma-separated run directories, one per fold
        "n_folds": (int, 5),
        "holdout_fraction": (float, 0.07),
        "split_seed": (int, 0),
    },
    "compare": {
        **_COMMON_RUN,
        "scores": (str, None),  # comma-separated scores.jsonl files
        "reference": (str, ""),
        "n_folds": (int, 5),
    },
    "gradcheck": {
        "ops": (str, "all"),
        "seeds": (int, 3),
        "step": (float, 1e-5),
    },
}

_REQUIRED = {
    "synth": ("out_dir",),
    "train": ("out_dir", "manifest"),
    "pretrain": ("out_dir", "manifest"),
    "probe": ("out_dir", "manifest", "encoder_ckpt"),
    "eval": ("out_dir", "manifest", "model", "runs"),
    "compare": ("out_dir", "scores"),
    "gradcheck": (),
}


def parse_config_file(path) -> dict[str, str]:
    raw: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def resolve_config(command: str, config_file, overrides: dict) -> dict:
    schema = SCHEMAS[command]
    merged: dict = {}
    if config_file:
        if not Path(config_file).exists():
            raise ConfigError(f"config file not found: {config_file}")
        file_values = parse_config_file(config_file)
        unknown = sorted(set(file_values) - set(schema))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
        merged.update(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    cfg = {}
    for key, (conv, default) in schema.items():
        if key in merged:
            try:
                cfg[key] = conv(merged[key])
            except (ValueError, TypeError) as err:
                raise ConfigError(f"bad value for {key}: {merged[key]!r} ({err})") from err
        else:
            cfg[key] = default
    for key in _REQUIRED[command]:
        if cfg.get(key) in (None, ""):
            raise ConfigError(f"{command} requires {key}")
    return cfg


def _snapshot_config(cfg: dict, out_dir: Path, command: str) -> None:
    lines = [f"command={command}"] + [
        f"{k}={','.join(str(x) for x in v) if isinstance(v, list) else v}"
        for k, v in sorted(cfg.items())
    ]
    (out_dir / "config.snapshot").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_snapshot(run_dir: Path) -> dict[str, str]:
    path = run_dir / "config.snapshot"
    if not path.exists():
        raise ConfigError(f"missing config.snapshot in {run_dir}")
    return parse_config_file(path)


# ---------------------------------------------------------------------------
# dataset loading helpers


def _load_dataset(manifest_path):
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ConfigError(f"manifest not found: {manifest_path}")
    manifest = datamod.read_manifest(manifest_path)
    root = manifest_path.parent
    volumes = []
    for rel, label in manifest.records:
        rec = datamod.read_volume(root / rel, label)
        volumes.append(rec.values)
    return manifest, volumes, manifest.labels()


def _split(manifest, cfg):
    return datamod.stratified_split(
        manifest,
        holdout_fraction=cfg["holdout_fraction"],
        n_folds=cfg["n_folds"],
        seed=cfg["split_seed"],
    )


def _train_val_indices(manifest, plan, fold: int):
    if not 0 <= fold < plan.n_folds:
        raise ConfigError(f"fold must be in [0, {plan.n_folds}), got {fold}")
    val_idx = plan.fold_indices(manifest, fold)
    train_idx = [i for k in range(plan.n_folds) if k != fold for i in plan.fold_indices(manifest, k)]
    return sorted(train_idx), sorted(val_idx)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg) -> int:
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest, _ = datamod.generate_synthetic(
        cfg["n_per_class"], cfg["side"], cfg["seed"], out_dir=out_dir,
        noise_sigma=cfg["noise_sigma"],
    )
    _snapshot_config(cfg, out_dir, "synth")
    print(f"wrote {len(manifest.records)} volumes and manifest.csv to {out_dir}")
    return 0


def cmd_train(cfg) -> int:
    manifest, volumes, labels = _load_dataset(cfg["manifest"])
    plan = _split(manifest, cfg)
    train_idx, val_idx = _train_val_indices(manifest, plan, cfg["fold"])
    spec, params = build_encoder(
        cfg["preset"], cfg["input_side"], cfg["num_classes"], seed=cfg["seed"]
    )
    if spec.is_dim:
        raise ConfigError(f"preset {cfg['preset']} is a representation encoder; use pretrain")
    out_dir = Path(cfg["out_dir"])
    (out_dir / "ckpt").mkdir(parents=True, exist_ok=True)
    _snapshot_config(cfg, out_dir, "train")
    config = TrainConfig(
        learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"],
        epochs=cfg["epochs"], lambda_l1=cfg["lambda_l1"],
        burn_in_epochs=cfg["burn_in"], seed=cfg["seed"], canonical=cfg["canonical"],
    )
    aug = datamod.AugmentationConfig(
        target_side=spec.input_side, flip_prob=cfg["flip_prob"], enabled=cfg["augment"]
    )
    result = train_supervised(
        spec, params, volumes, labels, train_idx, val_idx, config,
        augment_config=aug, metrics_path=out_dir / "metrics.jsonl",
    )
    save_checkpoint(out_dir / "ckpt" / "final.ckpt", result.final_params)
    save_checkpoint(out_dir / "ckpt" / "selected.ckpt", result.selected.params)
    sel = result.selected
    print(f"selected epoch {sel.epoch} (train {sel.train_metric:.3f}, val {sel.val_metric:.3f}"
          f"{', fallback' if sel.is_fallback else ''})")
    return 0


def cmd_pretrain(cfg) -> int:
    manifest, volumes, labels = _load_dataset(cfg["manifest"])
    plan = _split(manifest, cfg)
    cv_idx = sorted(plan.cv_indices(manifest))
    spec, params = build_encoder(cfg["preset"], cfg["input_side"], seed=cfg["seed"])
    if not spec.is_dim:
        raise ConfigError(f"preset {cfg['preset']} outputs logits; pretrain needs a dim_* preset")
    if cfg["estimator"] not in ("jsd", "nce"):
        raise ConfigError(f"estimator must be jsd or nce, got {cfg['estimator']!r}")
    nets = StatisticsNetworks.for_encoder(spec, embed_dim=cfg["embed_dim"], seed=cfg["seed"] + 1)
    out_dir = Path(cfg["out_dir"])
    (out_dir / "ckpt").mkdir(parents=True, exist_ok=True)
    _snapshot_config(cfg, out_dir, "pretrain")
    config = TrainConfig(
        learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"],
        epochs=cfg["epochs"], lambda_l1=cfg["lambda_l1"],
        seed=cfg["seed"], canonical=cfg["canonical"],
    )
    result = pretrain_dim(
        spec, params, nets, volumes, cv_idx, config, estimator=cfg["estimator"],
        ss_labels=labels if cfg["ss"] else None,
        metrics_path=out_dir / "metrics.jsonl",
    )
    save_checkpoint(out_dir / "ckpt" / "final.ckpt", result.final_params)
    save_checkpoint(out_dir / "ckpt" / "best.ckpt", result.best_params)
    print(f"pretrained {cfg['epochs']} epochs; best mean objective {result.best_objective:.4f}")
    return 0


def cmd_probe(cfg) -> int:
    ckpt_path = Path(cfg["encoder_ckpt"])
    if not ckpt_path.exists():
        raise ConfigError(f"encoder checkpoint not found: {ckpt_path}")
    manifest, volumes, labels = _load_dataset(cfg["manifest"])
    plan = _split(manifest, cfg)
    train_idx, val_idx = _train_val_indices(manifest, plan, cfg["fold"])
    spec, params = build_encoder(cfg["preset"], cfg["input_side"], seed=cfg["seed"])
    arrays = load_checkpoint(ckpt_path)
    params.load_snapshot(arrays)
    if cfg["tap"] not in ("conv", "fc", "z"):
        raise ConfigError(f"tap must be conv, fc or z, got {cfg['tap']!r}")
    out_dir = Path(cfg["out_dir"])
    (out_dir / "ckpt").mkdir(parents=True, exist_ok=True)
    _snapshot_config(cfg, out_dir, "probe")
    config = TrainConfig(
        learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"],
        epochs=cfg["epochs"], lambda_l1=cfg["lambda_l1"],
        burn_in_epochs=cfg["burn_in"], seed=cfg["seed"], canonical=cfg["canonical"],
    )
    result, _head = train_probe(
        spec, params, cfg["tap"], volumes, labels, train_idx, val_idx, config,
        num_classes=cfg["num_classes"], metrics_path=out_dir / "metrics.jsonl",
    )
    save_checkpoint(out_dir / "ckpt" / "final.ckpt", result.final_params)
    save_checkpoint(out_dir / "ckpt" / "selected.ckpt", result.selected.params)
    sel = result.selected
    print(f"selected epoch {sel.epoch} (train {sel.train_metric:.3f}, val {sel.val_metric:.3f}"
          f"{', fallback' if sel.is_fallback else ''})")
    return 0


def _score_run(run_dir: Path, manifest, volumes, labels, plan) -> tuple[float, float]:
    """Balanced accuracy of a fold run's selected model on its validation
    fold and on the holdout set."""
    snap = _read_snapshot(run_dir)
    command = snap.get("command")
    fold = int(snap["fold"])
    val_idx = plan.fold_indices(manifest, fold)
    holdout_idx = plan.holdout_indices(manifest)
    ckpt = run_dir / "ckpt" / "selected.ckpt"
    if not ckpt.exists():
        raise ConfigError(f"missing checkpoint {ckpt}")
    arrays = load_checkpoint(ckpt)
    if command == "train":
        spec, params = build_encoder(snap["preset"], int(snap["input_side"]),
                                     int(snap["num_classes"]), seed=int(snap["seed"]))
        params.load_snapshot(arrays)
        _, cv = evaluate_split(spec, params, volumes, labels, val_idx, 16, spec.num_classes)
        _, ho = evaluate_split(spec, params, volumes, labels, holdout_idx, 16, spec.num_classes)
        return cv, ho
    if command == "probe":
        spec, params = build_encoder(snap["preset"], int(snap["input_side"]), seed=int(snap["seed"]))
        params.load_snapshot(load_checkpoint(Path(snap["encoder_ckpt"])))
        num_classes = int(snap["num_classes"])
        feats_val = extract_features(spec, params, volumes, val_idx, snap["tap"])
        feats_ho = extract_features(spec, params, volumes, holdout_idx, snap["tap"])
        head = ClassifierHead(feats_val.shape[1], num_classes)
        head.load_snapshot(arrays)
        labels = np.asarray(labels)
        cv = head_balanced_accuracy(head, feats_val, labels[val_idx], num_classes)
        ho = head_balanced_accuracy(head, feats_ho, labels[holdout_idx], num_classes)
        return cv, ho
    raise ConfigError(f"run {run_dir} is a {command!r} run; expected train or probe")


def cmd_eval(cfg) -> int:
    manifest, volumes, labels = _load_dataset(cfg["manifest"])
    plan = _split(manifest, cfg)
    run_dirs = [Path(p) for p in cfg["runs"].split(",") if p]
    missing = [str(d) for d in run_dirs if not (d / "ckpt" / "selected.ckpt").exists()]
    if missing:
        raise ConfigError(f"incomplete fold runs (no selected checkpoint): {', '.join(missing)}")
    if len(run_dirs) != cfg["n_folds"]:
        raise ConfigError(f"expected {cfg['n_folds']} fold runs, got {len(run_dirs)}")
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _snapshot_config(cfg, out_dir, "eval")
    rows = []
    for run_dir in run_dirs:
        snap = _read_snapshot(run_dir)
        cv, ho = _score_run(run_dir, manifest, volumes, labels, plan)
        rows.append({"model": cfg["model"], "fold": int(snap["fold"]), "cv": cv, "holdout": ho})
    scores_path = out_dir / "scores.jsonl"
    with open(scores_path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    rec = evaluation.aggregate(
        cfg["model"], [r["cv"] for r in rows], [r["holdout"] for r in rows], cfg["n_folds"]
    )
    print(evaluation.render_table([(rec, None)]))
    print(f"scores written to {scores_path}")
    return 0


def _read_scores(path: Path, n_folds: int):
    if not path.exists():
        raise ConfigError(f"scores file not found: {path}")
    by_model: dict[str, dict[int, tuple[float, float]]] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        by_model.setdefault(row["model"], {})[int(row["fold"])] = (row["cv"], row["holdout"])
    records = []
    for model, folds in by_model.items():
        missing = sorted(set(range(n_folds)) - set(folds))
        if missing:
            raise ConfigError(f"model {model!r} in {path} is missing folds {missing}")
        cv = [folds[k][0] for k in range(n_folds)]
        ho = [folds[k][1] for k in range(n_folds)]
        records.append(evaluation.aggregate(model, cv, ho, n_folds))
    return records


def cmd_compare(cfg) -> int:
    records = []
    for path in cfg["scores"].split(","):
        records.extend(_read_scores(Path(path), cfg["n_folds"]))
    if len(records) < 2:
        raise ConfigError("compare needs at least two models")
    reference = cfg["reference"] or None
    compared = evaluation.compare_to_reference(records, reference)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _snapshot_config(cfg, out_dir, "compare")
    table = evaluation.render_table(compared)
    (out_dir / "report.csv").write_text(evaluation.render_csv(compared), encoding="utf-8")
    print(table)
    print(f"report written to {out_dir / 'report.csv'}")
    return 0


def cmd_gradcheck(cfg) -> int:
    names = None if cfg["ops"] == "all" else [s for s in cfg["ops"].split(",") if s]
    if names is not None and not names:
        raise ConfigError("empty op selection")
    try:
        results = gradsuite.run_suite(names, seeds=cfg["seeds"], h=cfg["step"],
                                      include_composed=names is None)
    except KeyError as err:
        raise ConfigError(str(err)) from err
    failed = []
    for name, err in results.items():
        tol = gradsuite.COMPOSED_TOL if name == "composed" else gradsuite.OP_TOL
        status = "PASS" if err < tol else "FAIL"
        if status == "FAIL":
            failed.append(name)
        print(f"{status}  {name:14s} max rel err {err:.3e} (tol {tol:g})")
    return 3 if failed else 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="infomax3d",
        description="Mutual-information pretraining and evaluation for 3D volumes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, schema in SCHEMAS.items():
        p = sub.add_parser(command, help=f"{command} (keys: {', '.join(schema)})")
        p.add_argument("--config", help="key=value config file; flags override it")
        for key in schema:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, help=f"override {key}")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        cfg = resolve_config(args.command, args.config, overrides)
        return COMMANDS[args.command](cfg)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"numerical failure: {err} (epoch {err.epoch})", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
