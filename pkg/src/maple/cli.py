"""Command-line entry point: `train`, `eval`, `qwk`, and `sample` subcommands
driven by one JSON config plus dotted-path overrides.

Exit codes: 0 success, 2 config error, 3 data error, 4 training divergence.
Diagnostics go to stderr; stdout carries results only.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import evaluation, fusion, trainer
from .corpus import CorpusError, ScoreScale, level_of, load_corpus, load_fold_specs, resolve_split
from .episodes import EpisodeSampler, EpisodeUnavailable, Regime
from .trainer import TrainConfig, TrainingDiverged

SEED_ENV_VAR = "MAPLE_SEED"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


class ConfigError(ValueError):
    pass


_TRAIN_DEFAULTS: dict = {
    "k": 5,
    "m": 5,
    "max_classes": 5,
    "total_tasks": 30000,
    "batch_size": 12,
    "learning_rate": 1e-5,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "dev_every": 1000,
    "seed": None,  # resolved from MAPLE_SEED, else 0
    "dropout_rate": 0.5,
    "grad_clip": None,
}

_RUN_DEFAULTS: dict = {
    "manifest": None,
    "folds": None,
    "regime": {"classification": "multiclass", "support": "multi_prompt"},
    "use_context": True,
    "use_features": False,
    "holistic_trait": None,
    "output_dir": None,
    "train": _TRAIN_DEFAULTS,
}


def _merge(defaults: dict, given: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(defaults[key], dict) and defaults[key] and not key == "regime":
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}' must be an object")
            out[key] = _merge(defaults[key], value, where)
        elif key == "regime":
            if not isinstance(value, dict) or set(value) - {"classification", "support"}:
                raise ConfigError("'regime' must be {classification, support}")
            out[key] = {**defaults[key], **value}
        else:
            out[key] = value
    return out


def _apply_override(config: dict, dotted: str) -> None:
    if "=" not in dotted:
        raise ConfigError(f"override '{dotted}' must be key.path=value")
    key_path, raw = dotted.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key_path.split(".")
    node = config
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key '{key_path}'")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key '{key_path}'")
    node[parts[-1]] = value


def load_run_config(path: str, overrides: list[str], seed: int | None) -> dict:
    cfg_path = Path(path)
    if not cfg_path.is_file():
        raise ConfigError(f"config file not found: {cfg_path}")
    try:
        given = json.loads(cfg_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(given, dict):
        raise ConfigError("config root must be a JSON object")
    resolved = _merge(_RUN_DEFAULTS, given)
    for override in overrides:
        _apply_override(resolved, override)
    if seed is not None:
        resolved["train"]["seed"] = seed
    if resolved["train"]["seed"] is None:
        env = os.environ.get(SEED_ENV_VAR)
        resolved["train"]["seed"] = int(env) if env else 0
    for key in ("manifest", "folds"):
        if resolved[key] is None:
            raise ConfigError(f"config is missing '{key}'")
    # paths are interpreted relative to the config file's directory
    base = cfg_path.parent
    for key in ("manifest", "folds", "output_dir"):
        if resolved[key] is not None and not Path(resolved[key]).is_absolute():
            resolved[key] = str((base / resolved[key]).resolve())
    return resolved


def build_regime(resolved: dict) -> Regime:
    try:
        return Regime(**resolved["regime"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def build_train_config(resolved: dict) -> TrainConfig:
    section = dict(resolved["train"])
    grad_clip = section.pop("grad_clip")
    try:
        return TrainConfig(
            **section,
            grad_clip=None if grad_clip is None else float(grad_clip),
            use_context=bool(resolved["use_context"]),
            use_features=bool(resolved["use_features"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    resolved = load_run_config(args.config, args.set or [], args.seed)
    if resolved["output_dir"] is None:
        raise ConfigError("config is missing 'output_dir'")
    regime = build_regime(resolved)
    train_cfg = build_train_config(resolved)
    corpus = load_corpus(resolved["manifest"])
    specs = load_fold_specs(resolved["folds"])

    out_dir = Path(resolved["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n"
    )

    result = evaluation.run_cv(corpus, specs, regime, train_cfg, jobs=args.jobs)
    for outcome in result.folds:
        fold_dir = out_dir / f"fold_{outcome.fold_index}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        tr = outcome.train_result
        fusion.save_checkpoint(fold_dir / "checkpoint.mhd1", outcome.params,
                               outcome.head_config)
        sidecar = {
            "fold": outcome.fold_index,
            "dev_qwk": tr.best.dev_qwk if tr else None,
            "tasks_seen": tr.best.tasks_seen if tr else None,
            "config_hash": tr.best.config_hash if tr else None,
            "dev_series": [r.dev_qwk for r in tr.log if r.dev_qwk is not None] if tr else [],
        }
        (fold_dir / "checkpoint.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        if tr:
            trainer.write_log_csv(fold_dir / "train_log.csv", tr.log)

    report_dir = Path(args.report) if args.report else out_dir
    evaluation.write_report(result, report_dir, resolved["holistic_trait"])
    sys.stdout.write(result.report.to_pretty_text(resolved["holistic_trait"]))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    resolved = load_run_config(args.config, args.set or [], args.seed)
    regime = build_regime(resolved)
    train_cfg = build_train_config(resolved)
    corpus = load_corpus(resolved["manifest"])
    specs = load_fold_specs(resolved["folds"])

    ckpt_path = Path(args.checkpoints)
    if not ckpt_path.exists():
        raise CorpusError(f"checkpoint path not found: {ckpt_path}")

    def loader(fold_index: int):
        if ckpt_path.is_dir():
            path = ckpt_path / f"fold_{fold_index}" / "checkpoint.mhd1"
            if not path.is_file():
                raise CorpusError(f"missing checkpoint for fold {fold_index}: {path}")
        else:
            path = ckpt_path
        return fusion.load_checkpoint(path)

    result = evaluation.run_cv(corpus, specs, regime, train_cfg,
                               checkpoint_loader=loader, jobs=args.jobs)
    report_dir = Path(args.report) if args.report else None
    if report_dir is None and resolved["output_dir"] is not None:
        report_dir = Path(resolved["output_dir"])
    if report_dir is not None:
        evaluation.write_report(result, report_dir, resolved["holistic_trait"])
    sys.stdout.write(result.report.to_pretty_text(resolved["holistic_trait"]))
    return EXIT_OK


def _read_score_csv(path: str) -> dict[str, float]:
    src = Path(path)
    if not src.is_file():
        raise CorpusError(f"csv not found: {src}")
    out: dict[str, float] = {}
    with open(src, newline="") as fh:
        reader = csv.reader(fh)
        for i, row in enumerate(reader):
            if not row:
                continue
            if i == 0 and row[0] in ("essay_id",):
                continue
            if len(row) < 2:
                raise CorpusError(f"{src}: row {i + 1} needs essay_id,score")
            try:
                out[row[0]] = float(row[1])
            except ValueError:
                raise CorpusError(f"{src}: row {i + 1} score '{row[1]}' is not a number") from None
    if not out:
        raise CorpusError(f"{src}: no score rows")
    return out


def _parse_scale(text: str) -> ScoreScale:
    try:
        lo, hi, step = (float(x) for x in text.split(":"))
    except ValueError:
        raise ConfigError(f"--scale must be MIN:MAX:STEP, got '{text}'") from None
    n = int(round((hi - lo) / step)) + 1
    return ScoreScale(tuple(lo + i * step for i in range(n)))


def cmd_qwk(args: argparse.Namespace) -> int:
    pred = _read_score_csv(args.pred)
    gold = _read_score_csv(args.gold)
    missing = sorted(set(gold) - set(pred))
    if missing:
        raise CorpusError(f"predictions missing essay ids: {missing[:5]}")
    ids = [e for e in gold]
    if args.scale:
        scale = _parse_scale(args.scale)
    else:
        values = sorted(set(gold.values()) | set(pred.values()))
        if len(values) < 2:
            values = values + [values[0] + 1.0]
        scale = ScoreScale(tuple(values))
    gold_levels = [level_of(gold[e], scale) for e in ids]
    pred_levels = [level_of(pred[e], scale) for e in ids]
    kappa = evaluation.qwk(gold_levels, pred_levels, scale.n_levels)
    sys.stdout.write(f"{kappa}\n")
    return EXIT_OK


def cmd_sample(args: argparse.Namespace) -> int:
    resolved = load_run_config(args.config, args.set or [], args.seed)
    regime = build_regime(resolved)
    train_cfg = build_train_config(resolved)
    corpus = load_corpus(resolved["manifest"])
    specs = load_fold_specs(resolved["folds"])
    if not 0 <= args.fold < len(specs):
        raise ConfigError(f"--fold {args.fold} out of range for {len(specs)} folds")
    split = resolve_split(corpus, specs[args.fold])
    sampler = EpisodeSampler(
        corpus,
        split,
        regime,
        k=train_cfg.k,
        m=train_cfg.m,
        max_classes=train_cfg.max_classes,
        rng=np.random.default_rng(np.random.SeedSequence(train_cfg.seed).spawn(3)[1]),
    )
    tuples: set[tuple] = set()
    class_counts: dict[int, int] = {}
    written = 0
    with open(args.dump_episodes, "w") as fh:
        for episode in sampler.stream(args.count):
            fh.write(json.dumps(episode.to_json_dict(), sort_keys=True) + "\n")
            written += 1
            if regime.classification == "binary":
                tuples.add((episode.trait_id, episode.query_prompt_id,
                            episode.classes[0].levels[0]))
            else:
                tuples.add((episode.trait_id, episode.query_prompt_id))
            class_counts[episode.class_count] = class_counts.get(episode.class_count, 0) + 1
    hist = " ".join(f"{k}:{v}" for k, v in sorted(class_counts.items()))
    sys.stdout.write(f"episodes {written}\n")
    sys.stdout.write(f"unique_tasks {len(tuples)}\n")
    sys.stdout.write(f"class_count_hist {hist}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser / entry
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maple",
        description="Episodic meta-learning engine for cross-prompt essay trait scoring.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="shortcut for --set train.seed=N")

    p_train = sub.add_parser("train", help="train per fold, then meta-test and report")
    common(p_train)
    p_train.add_argument("--jobs", type=int, default=1, help="fold-level parallelism")
    p_train.add_argument("--report", default=None, help="report directory (default: output_dir)")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="meta-test existing checkpoints")
    common(p_eval)
    p_eval.add_argument("--checkpoints", required=True,
                        help="checkpoint file, or a train output dir with fold_<i>/")
    p_eval.add_argument("--jobs", type=int, default=1)
    p_eval.add_argument("--report", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_qwk = sub.add_parser("qwk", help="quadratic weighted kappa of two score CSVs")
    p_qwk.add_argument("--pred", required=True, help="CSV essay_id,predicted_score")
    p_qwk.add_argument("--gold", required=True, help="CSV essay_id,score")
    p_qwk.add_argument("--scale", default=None, help="MIN:MAX:STEP (default: infer from data)")
    p_qwk.set_defaults(func=cmd_qwk)

    p_sample = sub.add_parser("sample", help="dump an episode stream with statistics")
    common(p_sample)
    p_sample.add_argument("--count", type=int, required=True)
    p_sample.add_argument("--dump-episodes", required=True, metavar="PATH")
    p_sample.add_argument("--fold", type=int, default=0, help="fold whose split to sample from")
    p_sample.set_defaults(func=cmd_sample)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        sys.stderr.write(f"training diverged: {exc}\n")
        return EXIT_DIVERGED
    except (CorpusError, EpisodeUnavailable, FileNotFoundError) as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
