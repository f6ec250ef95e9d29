"""Command-line pipeline: gen -> stats -> train -> eval -> compare/ablate.

All randomness flows from the --seed flag; repeated runs with identical
configuration produce byte-identical artifacts. Diagnostics go to
stderr, stdout carries the paths of written artifacts only. Exit codes:
0 ok, 2 invalid configuration, 3 I/O failure, 4 training divergence,
5 checkpoint schema mismatch.

Flags can also be supplied through a JSON --config file whose keys match
the long flag names (dashes as underscores); explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import figures
from .evaluation import NoGroundTruth, ap_3d, paired_significance
from .fusion import (
    FusionConfig,
    TrainingDiverged,
    infer_dataset,
    load_model,
    prepare_dataset,
    save_model,
    train,
)
from .nn import CheckpointError
from .pairing import PairingConfig
from .simgen import (
    InvalidProfile,
    PROFILE_NAMES,
    generate_dataset,
    load_dataset,
    population_stats,
    resolve_profile,
    save_dataset,
)
from .uncertainty import (
    MissingStats,
    ScoringConfig,
    compute_validation_stats,
    load_stats,
    save_stats,
    score_frame,
    stats_from_dict,
    stats_to_dict,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_CHECKPOINT = 5

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.70, 0.15)     # train, val; the remainder is test

EVAL_HEADER = ("dataset", "profile", "method", "easy", "moderate", "hard")
LOG_HEADER = ("epoch", "loss", "val_ap_easy", "val_ap_moderate",
              "val_ap_hard", "lr")

METHODS = ("fused", "baseline", "fused_no_dr", "fused_no_reg", "fused_no_moe")
ABLATION_METHODS = ("fused", "fused_no_dr", "fused_no_reg", "fused_no_moe")


class ConfigError(ValueError):
    """Invalid command configuration (bad values, unknown names)."""


def _say(message: str) -> None:
    print(message, file=sys.stderr)


def _emit(path: str) -> None:
    print(path)


def _fmt(value) -> str:
    return "" if value is None else f"{value:.4f}"


def _write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _load_json_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return doc


def _merge_config(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from the --config JSON document."""
    doc = _load_json_config(args.config) if getattr(args, "config", None) else {}
    unknown = [k for k in doc if not hasattr(args, k)]
    if unknown:
        raise ConfigError(f"config keys not recognized: {', '.join(sorted(unknown))}")
    for key, value in doc.items():
        current = getattr(args, key)
        # Switch flags read False when absent; they can only be set, so an
        # explicit flag always wins and False always means "not given".
        if current is None or current is False:
            setattr(args, key, value)
    return args


def _resolved(args, key, default):
    value = getattr(args, key)
    return default if value is None else value


def _require_file(path) -> str:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"required file missing: {path}")
    return path


def _split_path(data_dir: str, split: str) -> str:
    return os.path.join(data_dir, f"{split}.jsonl")


def _load_split(data_dir: str, split: str):
    return load_dataset(_require_file(_split_path(data_dir, split)))


def _profile_of(frames, data_dir: str) -> str:
    tags = {f.profile_tag for f in frames if f.profile_tag}
    if len(tags) == 1:
        return tags.pop()
    return os.path.basename(os.path.normpath(data_dir))


def _method_flags(method: str) -> dict:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; valid: {', '.join(METHODS)}")
    return {
        "baseline": method == "baseline",
        "use_moe": method != "fused_no_moe",
        "use_dr": method != "fused_no_dr",
        "use_reg": method != "fused_no_reg",
    }


# -- gen ---------------------------------------------------------------


def cmd_gen(args) -> int:
    seed = int(_resolved(args, "seed", 0))
    n_frames = int(_resolved(args, "n_frames", 500))
    if n_frames < 3:
        raise ConfigError("n_frames must be >= 3 to fill all three splits")
    out = _resolved(args, "out", "data")
    names = args.profile or list(PROFILE_NAMES)
    profiles = [resolve_profile(name) for name in names]

    for profile in profiles:
        frames = generate_dataset(seed, profile, n_frames)
        perm = np.random.default_rng([seed, 17]).permutation(n_frames)
        n_train = int(n_frames * SPLIT_FRACTIONS[0])
        n_val = int(n_frames * SPLIT_FRACTIONS[1])
        chunks = {
            "train": [frames[i] for i in perm[:n_train]],
            "val": [frames[i] for i in perm[n_train:n_train + n_val]],
            "test": [frames[i] for i in perm[n_train + n_val:]],
        }
        profile_dir = os.path.join(out, profile.name)
        os.makedirs(profile_dir, exist_ok=True)
        for split in SPLITS:
            path = _split_path(profile_dir, split)
            save_dataset(path, chunks[split])
            _emit(path)
        counts = ", ".join(f"{s}={len(chunks[s])}" for s in SPLITS)
        _say(f"{profile.name}: {counts}")
    return EXIT_OK


# -- stats -------------------------------------------------------------


def cmd_stats(args) -> int:
    data_root = _resolved(args, "data", "data")
    out = _resolved(args, "out", data_root)
    os.makedirs(out, exist_ok=True)
    names = args.profile or [n for n in PROFILE_NAMES
                             if os.path.isdir(os.path.join(data_root, n))]
    if not names:
        raise FileNotFoundError(f"no profile directories under {data_root}")

    clear_val = _load_split(os.path.join(data_root, "clear"), "val")
    stats = compute_validation_stats(clear_val)
    stats_path = os.path.join(out, "stats.json")
    save_stats(stats_path, stats)
    _emit(stats_path)

    rows = []
    for name in names:
        frames = _load_split(os.path.join(data_root, name), "val")
        scored = [score_frame(list(f.lidar_proposals), list(f.camera_proposals),
                              stats) for f in frames]
        table = population_stats(frames, scored)
        for (modality, population), cell in sorted(table.items()):
            rows.append((name, modality, population, cell.count,
                         _fmt(cell.entropy_mean), _fmt(cell.deviation_mean),
                         _fmt(cell.reg_mean)))
    csv_path = os.path.join(out, "population.csv")
    _write_csv(csv_path, ("profile", "modality", "population", "count",
                          "entropy", "deviation_ratio", "reg_uncertainty"), rows)
    _emit(csv_path)

    if not args.no_figures:
        keys = ("profile", "modality", "population", "count", "entropy",
                "deviation_ratio", "reg_uncertainty")
        fig_path = os.path.join(out, "population.png")
        figures.save_population_figure(
            [dict(zip(keys, row)) for row in rows], fig_path)
        _emit(fig_path)
    return EXIT_OK


# -- train -------------------------------------------------------------


def _build_fusion_config(args, flags: dict, seed: int) -> FusionConfig:
    return FusionConfig(
        epochs=int(_resolved(args, "epochs", 20)),
        nms_threshold=getattr(args, "nms", None),
        pairing_mode=_resolved(args, "pairing", "sparse"),
        seed=seed,
        **flags,
    )


def _prepare(frames, stats, config: FusionConfig):
    return prepare_dataset(frames, stats, ScoringConfig(),
                           PairingConfig(config.pairing_mode),
                           target_iou=config.target_iou)


def _load_train_val(data_dirs):
    """Concatenated train split; the first dataset's val split drives
    snapshot selection."""
    train_frames = []
    for data_dir in data_dirs:
        train_frames.extend(_load_split(data_dir, "train"))
    val_frames = _load_split(data_dirs[0], "val")
    return train_frames, val_frames


def _stats_for(args, data_dirs):
    stats_path = getattr(args, "stats", None)
    if stats_path is None:
        stats_path = os.path.join(os.path.dirname(os.path.normpath(data_dirs[0])),
                                  "stats.json")
    return load_stats(_require_file(stats_path))


def _train_method(args, flags: dict, seed: int, stats, train_frames, val_frames,
                  prepared=None):
    config = _build_fusion_config(args, flags, seed)
    train_batches = prepared[0] if prepared else _prepare(train_frames, stats, config)
    val_batches = prepared[1] if prepared else _prepare(val_frames, stats, config)
    result = train(train_batches, val_batches, config)
    return result, config


def cmd_train(args) -> int:
    data_dirs = args.data or ["data/clear"]
    seed = int(_resolved(args, "seed", 0))
    out = _resolved(args, "out", "runs")
    os.makedirs(out, exist_ok=True)
    if args.baseline and (args.no_dr or args.no_reg or args.no_moe):
        raise ConfigError("--baseline ignores uncertainty channels; "
                          "ablation flags do not apply")
    flags = {"baseline": args.baseline, "use_moe": not args.no_moe,
             "use_dr": not args.no_dr, "use_reg": not args.no_reg}

    stats = _stats_for(args, data_dirs)
    train_frames, val_frames = _load_train_val(data_dirs)
    result, config = _train_method(args, flags, seed, stats,
                                   train_frames, val_frames)
    method = config.method
    _say(f"{method} seed {seed}: best epoch {result.best_epoch}"
         f" (val moderate AP {_fmt(result.best_moderate) or 'n/a'})")

    tag = f"{method}_seed{seed}"
    ckpt_path = os.path.join(out, f"{tag}.json")
    save_model(ckpt_path, result.model, {
        "stats": stats_to_dict(stats),
        "method": method,
        "seed": seed,
        "train_data": [os.path.normpath(d) for d in data_dirs],
        "best_epoch": result.best_epoch,
    })
    _emit(ckpt_path)

    log_path = os.path.join(out, f"{tag}_log.csv")
    _write_csv(log_path, LOG_HEADER,
               [(row["epoch"], _fmt(row["loss"]), _fmt(row["val_ap_easy"]),
                 _fmt(row["val_ap_moderate"]), _fmt(row["val_ap_hard"]),
                 f"{row['lr']:.6g}") for row in result.log])
    _emit(log_path)

    if not args.no_figures:
        fig_path = os.path.join(out, f"{tag}_log.png")
        figures.save_training_figure(result.log, fig_path)
        _emit(fig_path)
    return EXIT_OK


# -- eval --------------------------------------------------------------


def _eval_rows(model, method: str, stats, eval_dirs, split: str,
               config: FusionConfig, workers: int | None):
    rows = []
    for data_dir in eval_dirs:
        frames = _load_split(data_dir, split)
        profile = _profile_of(frames, data_dir)
        batches = _prepare(frames, stats, config)
        detections = infer_dataset(model, batches, max_workers=workers)
        try:
            result = ap_3d(detections, batches)
            rows.append((split, profile, method, _fmt(result.easy.ap),
                         _fmt(result.moderate.ap), _fmt(result.hard.ap)))
        except NoGroundTruth:
            rows.append((split, profile, method, "", "", ""))
    return rows


def cmd_eval(args) -> int:
    ckpt_path = _require_file(args.checkpoint)
    eval_dirs = args.data or ["data/clear"]
    split = _resolved(args, "split", "test")
    out = _resolved(args, "out", os.path.dirname(ckpt_path) or ".")
    os.makedirs(out, exist_ok=True)
    workers = getattr(args, "workers", None)

    model, meta = load_model(ckpt_path)
    if "stats" not in meta:
        raise CheckpointError("checkpoint metadata lacks validation statistics")
    stats = stats_from_dict(meta["stats"])
    method = meta.get("method", model.config.method)

    rows = _eval_rows(model, method, stats, eval_dirs, split, model.config,
                      workers)
    tag = _resolved(args, "tag", method)
    csv_path = os.path.join(out, f"eval_{tag}_{split}.csv")
    _write_csv(csv_path, EVAL_HEADER, rows)
    _emit(csv_path)

    if not args.no_figures:
        fig_rows = [dict(zip(EVAL_HEADER, row)) for row in rows if row[4] != ""]
        if fig_rows:
            fig_path = os.path.join(out, f"eval_{tag}_{split}.png")
            figures.save_eval_figure(fig_rows, fig_path)
            _emit(fig_path)
    return EXIT_OK


# -- compare -----------------------------------------------------------


def _float_or_none(text: str):
    return None if text == "" else float(text)


def cmd_compare(args) -> int:
    data_dirs = args.data or ["data/clear"]
    eval_dirs = args.eval_data or data_dirs
    n_seeds = int(_resolved(args, "seeds", 10))
    base_seed = int(_resolved(args, "seed", 0))
    out = _resolved(args, "out", "runs")
    method_a = _resolved(args, "method_a", "fused")
    method_b = _resolved(args, "method_b", "baseline")
    if n_seeds < 2:
        raise ConfigError("compare needs at least 2 seeds")
    os.makedirs(out, exist_ok=True)

    stats = _stats_for(args, data_dirs)
    train_frames, val_frames = _load_train_val(data_dirs)
    base_config = _build_fusion_config(args, _method_flags(method_a), base_seed)
    prepared = (_prepare(train_frames, stats, base_config),
                _prepare(val_frames, stats, base_config))

    run_rows = []
    per_profile: dict[str, dict[str, dict[int, float | None]]] = {}
    for offset in range(n_seeds):
        seed = base_seed + offset
        for method in (method_a, method_b):
            result, config = _train_method(args, _method_flags(method), seed,
                                           stats, train_frames, val_frames,
                                           prepared)
            rows = _eval_rows(result.model, method, stats, eval_dirs, "test",
                              config, getattr(args, "workers", None))
            for _, profile, _, easy, moderate, hard in rows:
                run_rows.append((profile, seed, method, easy, moderate, hard))
                per_profile.setdefault(profile, {}).setdefault(
                    method, {})[seed] = _float_or_none(moderate)
            _say(f"seed {seed} {method}: "
                 + ", ".join(f"{r[1]}={r[4] or 'n/a'}" for r in rows))

    runs_path = os.path.join(out, "compare_runs.csv")
    _write_csv(runs_path, ("profile", "seed", "method", "easy", "moderate",
                           "hard"), run_rows)
    _emit(runs_path)

    summary_rows = []
    for profile in sorted(per_profile):
        a_by_seed = per_profile[profile].get(method_a, {})
        b_by_seed = per_profile[profile].get(method_b, {})
        seeds = sorted(set(a_by_seed) & set(b_by_seed))
        a = [a_by_seed[s] for s in seeds]
        b = [b_by_seed[s] for s in seeds]
        if any(v is None for v in a + b) or len(seeds) < 2:
            p_value = None
            mean_a = std_a = mean_b = std_b = None
        else:
            p_value = paired_significance(a, b)
            mean_a, std_a = float(np.mean(a)), float(np.std(a))
            mean_b, std_b = float(np.mean(b)), float(np.std(b))
        summary_rows.append((profile, method_a, method_b, _fmt(mean_a),
                             _fmt(std_a), _fmt(mean_b), _fmt(std_b),
                             "" if p_value is None else f"{p_value:.6g}"))
    summary_path = os.path.join(out, "compare_summary.csv")
    _write_csv(summary_path, ("profile", "method_a", "method_b", "mean_a",
                              "std_a", "mean_b", "std_b", "p_value"),
               summary_rows)
    _emit(summary_path)

    if not args.no_figures:
        run_keys = ("profile", "seed", "method", "easy", "moderate", "hard")
        summary_dicts = [{"profile": row[0], "p_value": row[7]}
                         for row in summary_rows]
        fig_path = os.path.join(out, "compare.png")
        figures.save_compare_figure(
            [dict(zip(run_keys, row)) for row in run_rows if row[4] != ""],
            summary_dicts, fig_path)
        _emit(fig_path)
    return EXIT_OK


# -- ablate ------------------------------------------------------------


def cmd_ablate(args) -> int:
    data_dirs = args.data or ["data/clear"]
    eval_dirs = args.eval_data or data_dirs
    n_seeds = int(_resolved(args, "seeds", 3))
    base_seed = int(_resolved(args, "seed", 0))
    out = _resolved(args, "out", "runs")
    if n_seeds < 1:
        raise ConfigError("ablate needs at least 1 seed")
    os.makedirs(out, exist_ok=True)

    stats = _stats_for(args, data_dirs)
    train_frames, val_frames = _load_train_val(data_dirs)
    base_config = _build_fusion_config(args, _method_flags("fused"), base_seed)
    prepared = (_prepare(train_frames, stats, base_config),
                _prepare(val_frames, stats, base_config))

    run_rows = []
    moderates: dict[tuple[str, str], list[float]] = {}
    for offset in range(n_seeds):
        seed = base_seed + offset
        for method in ABLATION_METHODS:
            result, config = _train_method(args, _method_flags(method), seed,
                                           stats, train_frames, val_frames,
                                           prepared)
            rows = _eval_rows(result.model, method, stats, eval_dirs, "test",
                              config, getattr(args, "workers", None))
            for _, profile, _, easy, moderate, hard in rows:
                run_rows.append((profile, seed, method, easy, moderate, hard))
                value = _float_or_none(moderate)
                if value is not None:
                    moderates.setdefault((profile, method), []).append(value)
            _say(f"seed {seed} {method}: "
                 + ", ".join(f"{r[1]}={r[4] or 'n/a'}" for r in rows))

    runs_path = os.path.join(out, "ablate_runs.csv")
    _write_csv(runs_path, ("profile", "seed", "method", "easy", "moderate",
                           "hard"), run_rows)
    _emit(runs_path)

    summary_rows = []
    for (profile, method), values in sorted(moderates.items()):
        summary_rows.append((profile, method, _fmt(float(np.mean(values))),
                             _fmt(float(np.std(values))), len(values)))
    summary_path = os.path.join(out, "ablate_summary.csv")
    _write_csv(summary_path, ("profile", "method", "mean_moderate",
                              "std_moderate", "n_runs"), summary_rows)
    _emit(summary_path)

    if not args.no_figures:
        run_keys = ("profile", "seed", "method", "easy", "moderate", "hard")
        fig_path = os.path.join(out, "ablate.png")
        figures.save_ablation_figure(
            [dict(zip(run_keys, row)) for row in run_rows if row[4] != ""],
            fig_path)
        _emit(fig_path)
    return EXIT_OK


# -- parser ------------------------------------------------------------


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON file with default flag values")
    sub.add_argument("--seed", type=int, help="master seed (default 0)")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--no-figures", action="store_true",
                     help="skip PNG rendering next to CSV reports")


def _add_training(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--data", action="append",
                     help="profile dataset directory (repeatable; the first "
                          "one's val split drives snapshot selection)")
    sub.add_argument("--stats", help="validation stats JSON "
                                     "(default: <data-parent>/stats.json)")
    sub.add_argument("--epochs", type=int, help="training epochs (default 20)")
    sub.add_argument("--nms", type=float,
                     help="NMS IoU threshold (default 0.5 baseline / 0.7 fused)")
    sub.add_argument("--pairing", choices=("sparse", "full"),
                     help="pairing mode (default sparse)")
    sub.add_argument("--workers", type=int,
                     help="inference threads (results are order-stable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moefuse",
        description="Uncertainty-aware LiDAR/camera late-fusion experiments "
                    "on synthetic degraded scenes.")
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("gen", help="generate per-profile dataset splits")
    _add_common(gen)
    gen.add_argument("--profile", action="append",
                     help=f"profile name (repeatable; default all: "
                          f"{', '.join(PROFILE_NAMES)})")
    gen.add_argument("--n-frames", type=int, dest="n_frames",
                     help="frames per profile (default 500)")
    gen.set_defaults(func=cmd_gen)

    stats = subs.add_parser("stats", help="validation statistics and "
                                          "population table")
    _add_common(stats)
    stats.add_argument("--data", help="dataset root from gen (default data)")
    stats.add_argument("--profile", action="append",
                       help="profiles for the population table "
                            "(default: all present)")
    stats.set_defaults(func=cmd_stats)

    tr = subs.add_parser("train", help="train one fusion variant")
    _add_common(tr)
    _add_training(tr)
    tr.add_argument("--baseline", action="store_true",
                    help="confidence-only baseline head")
    tr.add_argument("--no-dr", action="store_true", dest="no_dr",
                    help="zero the class deviation ratio channels")
    tr.add_argument("--no-reg", action="store_true", dest="no_reg",
                    help="zero the regression uncertainty channels")
    tr.add_argument("--no-moe", action="store_true", dest="no_moe",
                    help="skip the expert/gate stage (8-channel head)")
    tr.set_defaults(func=cmd_train)

    ev = subs.add_parser("eval", help="AP table for a checkpoint")
    _add_common(ev)
    ev.add_argument("--checkpoint", required=True, help="checkpoint JSON")
    ev.add_argument("--data", action="append",
                    help="profile dataset directory to evaluate (repeatable)")
    ev.add_argument("--split", choices=SPLITS, help="split (default test)")
    ev.add_argument("--tag", help="output file tag (default: method name)")
    ev.add_argument("--workers", type=int,
                    help="inference threads (results are order-stable)")
    ev.set_defaults(func=cmd_eval)

    cp = subs.add_parser("compare", help="multi-seed paired comparison of "
                                         "two methods")
    _add_common(cp)
    _add_training(cp)
    cp.add_argument("--eval-data", action="append", dest="eval_data",
                    help="profile directory for test AP (default: --data)")
    cp.add_argument("--seeds", type=int, help="number of seeds (default 10)")
    cp.add_argument("--method-a", dest="method_a", choices=METHODS,
                    help="first method (default fused)")
    cp.add_argument("--method-b", dest="method_b", choices=METHODS,
                    help="second method (default baseline)")
    cp.set_defaults(func=cmd_compare)

    ab = subs.add_parser("ablate", help="channel/architecture ablation sweep")
    _add_common(ab)
    _add_training(ab)
    ab.add_argument("--eval-data", action="append", dest="eval_data",
                    help="profile directory for test AP (default: --data)")
    ab.add_argument("--seeds", type=int, help="seeds per variant (default 3)")
    ab.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _merge_config(args)
        return args.func(args)
    except TrainingDiverged as exc:
        _say(f"error: {exc}")
        return EXIT_DIVERGED
    except CheckpointError as exc:
        _say(f"error: {exc}")
        return EXIT_CHECKPOINT
    except ConfigError as exc:
        _say(f"error: {exc}")
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        _say(f"error: {exc}")
        return EXIT_IO
    except (OSError, MissingStats) as exc:
        _say(f"error: {exc}")
        return EXIT_IO
    except (InvalidProfile, ValueError) as exc:
        _say(f"error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
