"""Command-line entry point: ``lanerisk {synth,overlay,train,crossval,report}``.

Settings resolve in this order: command-line flag, ``--config`` file
(flat ``key = value`` lines), profile default. The seed additionally falls
back to ``LANERISK_SEED`` before the profile default. Every setting is
validated before anything is computed or written.

Exit codes: 0 on success, 2 for usage or configuration errors, 1 when a
command fails while running.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from .architectures import FAMILIES, INPUT_MODES, ModelSpec, build_model
from .datapipe import (
    DEFAULT_ALPHA,
    Clip,
    Dataset,
    ensure_dir,
    frame_path,
    overlay_clip,
    write_frame,
)
from .errors import LaneRiskError
from .evaluation import (
    ReportRow,
    cross_validate,
    kfold_split,
    read_report_csv,
    render_report,
    report_csv,
    sweep_csv,
)
from .layers import save_checkpoint
from .synthgen import SceneParams, generate
from .training import TrainConfig, train

log = logging.getLogger("lanerisk")

SEED_ENV = "LANERISK_SEED"

# Full-scale values of the original training protocol.
PAPER_PROFILE = {
    "epochs": 1000,
    "batch": 32,
    "lr": 1e-4,
    "decay": 0.01,
    "resolution": 32,
    "t_sweep": "5,10,15,20,50,100",
    "k": 10,
    "match_steps": False,
}

# Scaled down so a three-architecture comparison fits a desk CPU budget.
DESK_PROFILE = {
    "epochs": 30,
    "batch": 32,
    "lr": 2e-3,
    "decay": 0.0,
    "resolution": 16,
    "t_sweep": "10",
    "k": 10,
    "match_steps": True,
}

CONFIG_KEYS = {
    "dataset", "arch", "input", "t_sweep", "t", "k", "seed", "epochs", "batch", "lr",
    "decay", "resolution", "alpha", "jobs", "out", "profile", "split", "match_steps",
    "n_clips", "size", "frames", "clip",
}


class UsageError(LaneRiskError):
    """Bad flags, config values or paths; reported with exit code 2."""


@dataclass
class RunConfig:
    dataset: Path | None = None
    specs: list = field(default_factory=list)
    t_sweep: tuple = ()
    k: int = 10
    train: TrainConfig = field(default_factory=TrainConfig)
    resolution: tuple = (32, 32)
    alpha: float = DEFAULT_ALPHA
    jobs: int = 1
    out: Path | None = None
    profile: str = "paper"


# -- parsing ------------------------------------------------------------------


def read_config_file(path) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def write_config_file(path, values: dict) -> None:
    with open(path, "w") as fh:
        for key in sorted(values):
            fh.write(f"{key} = {values[key]}\n")


def _parse_int_list(text, name):
    try:
        vals = [int(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError:
        raise UsageError(f"--{name} must be comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise UsageError(f"--{name} needs positive integers, got {text!r}")
    return tuple(vals)


def _parse_resolution(text):
    parts = str(text).lower().replace("x", ",").split(",")
    try:
        vals = [int(p) for p in parts if p]
    except ValueError:
        raise UsageError(f"--resolution must look like 32 or 32x32, got {text!r}") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or min(vals) < 1:
        raise UsageError(f"--resolution must look like 32 or 32x32, got {text!r}")
    return tuple(vals)


def _parse_bool(text, name):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"{name} must be a boolean, got {text!r}")


def _number(kind, text, name):
    try:
        return kind(text)
    except (TypeError, ValueError):
        what = "an integer" if kind is int else "a number"
        raise UsageError(f"--{name} must be {what}, got {text!r}") from None


def merged_settings(args) -> dict:
    """Flag > config file > (seed: environment) > profile default."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    if getattr(args, "desk", False):
        profile = "desk"
    elif getattr(args, "paper", False):
        profile = "paper"
    else:
        profile = file_values.get("profile", "paper")
    if profile not in ("paper", "desk"):
        raise UsageError(f"unknown profile {profile!r}; use paper or desk")
    settings = dict(DESK_PROFILE if profile == "desk" else PAPER_PROFILE)
    settings["profile"] = profile
    env_seed = os.environ.get(SEED_ENV)
    if env_seed not in (None, ""):
        settings["seed"] = env_seed
    settings.update(file_values)
    for key, value in vars(args).items():
        if key in CONFIG_KEYS and value is not None:
            settings[key] = value
    settings.setdefault("seed", 0)
    return settings


def _specs(settings, dataset):
    archs = [a for a in str(settings.get("arch", "cnn-lstm")).split(",") if a]
    default_input = "features" if all(a.startswith("ft-") for a in archs) else "raw"
    inputs = [m for m in str(settings.get("input", default_input)).split(",") if m]
    for a in archs:
        if a not in FAMILIES:
            raise UsageError(f"unknown --arch {a!r}; choose from {', '.join(FAMILIES)}")
    for m in inputs:
        if m not in INPUT_MODES:
            raise UsageError(f"unknown --input {m!r}; choose from {', '.join(INPUT_MODES)}")
    resolution = _parse_resolution(settings["resolution"])
    feature_dim = None
    if "features" in inputs and any(a.startswith("ft-") for a in archs):
        try:
            feature_dim = dataset.feature_dim()
        except (OSError, LaneRiskError) as exc:
            raise UsageError(f"features input needs readable feature files: {exc}") from None
    specs = []
    for a in archs:
        for m in inputs:
            if a.startswith("ft-") != (m == "features"):
                continue
            try:
                specs.append(ModelSpec(a, m, 1, resolution, feature_dim if m == "features" else None))
            except LaneRiskError as exc:
                raise UsageError(str(exc)) from None
    if not specs:
        raise UsageError(f"no valid architecture/input pairs in --arch {archs} --input {inputs}")
    for spec in specs:
        if spec.family == "fbf-cnn" and (resolution[0] % 4 or resolution[1] % 4):
            raise UsageError(f"fbf-cnn needs a resolution divisible by 4, got {resolution}")
        if spec.family == "cnn-lstm" and (resolution[0] % 2 or resolution[1] % 2):
            raise UsageError(f"cnn-lstm needs an even resolution, got {resolution}")
    return specs


def build_run_config(settings, need_dataset=True, check_t=True) -> tuple[RunConfig, Dataset | None]:
    dataset = None
    path = settings.get("dataset")
    if need_dataset:
        if not path:
            raise UsageError("--dataset is required")
        try:
            dataset = Dataset(path, jobs=_number(int, settings.get("jobs", 1), "jobs"))
        except LaneRiskError as exc:
            raise UsageError(str(exc)) from None
    try:
        train_cfg = TrainConfig(
            batch_size=_number(int, settings["batch"], "batch"),
            epochs=_number(int, settings["epochs"], "epochs"),
            split=_number(float, settings.get("split", 0.9), "split"),
            seed=_number(int, settings["seed"], "seed"),
            lr=_number(float, settings["lr"], "lr"),
            decay=_number(float, settings["decay"], "decay"),
            match_steps=_parse_bool(settings.get("match_steps", False), "match_steps"),
        )
    except LaneRiskError as exc:
        raise UsageError(str(exc)) from None
    if train_cfg.seed < 0:
        raise UsageError(f"--seed must be >= 0, got {train_cfg.seed}")
    cfg = RunConfig(
        dataset=Path(path) if path else None,
        t_sweep=_parse_int_list(settings["t_sweep"], "t-sweep"),
        k=_number(int, settings["k"], "k"),
        train=train_cfg,
        resolution=_parse_resolution(settings["resolution"]),
        alpha=_number(float, settings.get("alpha", DEFAULT_ALPHA), "alpha"),
        jobs=_number(int, settings.get("jobs", 1), "jobs"),
        out=Path(settings["out"]) if settings.get("out") else None,
        profile=settings["profile"],
    )
    if not 0.0 <= cfg.alpha <= 1.0:
        raise UsageError(f"--alpha must lie in [0, 1], got {cfg.alpha}")
    if cfg.k < 2:
        raise UsageError(f"--k must be >= 2, got {cfg.k}")
    if cfg.jobs < 1:
        raise UsageError(f"--jobs must be >= 1, got {cfg.jobs}")
    if dataset is not None and check_t:
        cfg.specs = _specs(settings, dataset)
        n_frames = len(list((dataset.root / "clips" / dataset.clip_ids[0]).glob("frame_*.png")))
        too_long = [t for t in cfg.t_sweep if t > n_frames] if n_frames else []
        if too_long:
            raise UsageError(f"T values {too_long} exceed the {n_frames} frames per clip")
    return cfg, dataset


def _require_out(cfg):
    if cfg.out is None:
        raise UsageError("--out is required")
    return cfg.out


# -- commands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    settings = merged_settings(args)
    out = settings.get("out")
    if not out:
        raise UsageError("--out is required")
    try:
        size = _number(int, settings.get("size", 32), "size")
        params = SceneParams(
            n_clips=_number(int, settings.get("n_clips", 200), "n-clips"),
            height=size,
            width=size,
            n_frames=_number(int, settings.get("frames", 60), "frames"),
            seed=_number(int, settings["seed"], "seed"),
        )
    except LaneRiskError as exc:
        raise UsageError(str(exc)) from None
    jobs = _number(int, settings.get("jobs", 1), "jobs")
    truths = generate(params, out, jobs=max(jobs, 1))
    n_risky = sum(t.kind == "closing" for t in truths)
    print(f"wrote {len(truths)} clips ({n_risky} closing) to {out}")
    return 0


def cmd_overlay(args) -> int:
    settings = merged_settings(args)
    cfg, dataset = build_run_config(settings, check_t=False)
    out = _require_out(cfg)
    clip_id = settings.get("clip")
    if not clip_id:
        raise UsageError("--clip is required")
    if clip_id not in dataset.clip_ids:
        raise UsageError(f"unknown clip {clip_id!r}")
    records = dataset.masks(clip_id)
    frames = dataset.frames(clip_id)
    masked = overlay_clip(Clip(clip_id, frames), records, alpha=cfg.alpha)
    ensure_dir(out / "clips" / clip_id)
    for i, frame in enumerate(masked):
        write_frame(frame_path(out, clip_id, i), frame)
    print(f"wrote {len(masked)} masked frames to {out / 'clips' / clip_id}")
    return 0


def cmd_train(args) -> int:
    settings = merged_settings(args)
    cfg, dataset = build_run_config(settings)
    out = _require_out(cfg)
    if len(cfg.specs) != 1:
        raise UsageError("train takes exactly one architecture and input mode")
    t = _number(int, settings.get("t", cfg.t_sweep[0]), "t")
    spec = cfg.specs[0].with_T(t)
    samples = dataset.samples(t, spec.input_mode, spec.resolution, cfg.alpha)
    model = build_model(spec, seed=cfg.train.seed)
    ensure_dir(out)
    model, history = train(model, samples, cfg.train)
    save_checkpoint(out / "model.ckpt", list(model.named_params()))
    history.to_csv(out / "history.csv")
    write_config_file(out / "run.cfg", _echo(settings))
    last = history.records[-1] if history.records else None
    summary = f"train loss {last.train_loss:.4f}" if last else "no epochs run"
    print(f"{spec.name} ({spec.input_mode}, T={t}): {summary}; wrote {out / 'model.ckpt'}")
    return 0


def cmd_crossval(args) -> int:
    settings = merged_settings(args)
    cfg, dataset = build_run_config(settings)
    out = _require_out(cfg)
    risky = dataset.labels.as_dict()
    try:
        kfold_split(dataset.clip_ids, [risky[c] for c in dataset.clip_ids], cfg.k, cfg.train.seed)
    except LaneRiskError as exc:
        raise UsageError(str(exc)) from None
    rows = []
    for spec in cfg.specs:
        log.info("cross-validating %s (%s)", spec.name, spec.input_mode)
        rows.append(
            cross_validate(
                spec, dataset, k=cfg.k, t_sweep=cfg.t_sweep, config=cfg.train,
                jobs=cfg.jobs, alpha=cfg.alpha,
            )
        )
    ensure_dir(out)
    (out / "report.csv").write_text(report_csv(rows))
    (out / "sweep.csv").write_text(sweep_csv(rows))
    table = render_report(rows)
    (out / "report.txt").write_text(table)
    write_config_file(out / "run.cfg", _echo(settings))
    sys.stdout.write(table)
    return 0


def collect_reports(results_dir) -> list[ReportRow]:
    """Rows of every ``report.csv`` under ``results_dir``.

    When several runs report the same architecture and input mode, each such
    row is suffixed with its run id (the report's directory, relative).
    """
    root = Path(results_dir)
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    files = sorted(root.rglob("report.csv"))
    if not files:
        raise UsageError(f"no report.csv files under {root}")
    tagged = []
    for path in files:
        run_id = str(path.parent.relative_to(root)) if path.parent != root else "."
        tagged.extend((run_id, row) for row in read_report_csv(path))
    counts: dict = {}
    for _, row in tagged:
        counts[(row.architecture, row.input_mode)] = counts.get((row.architecture, row.input_mode), 0) + 1
    rows = []
    for run_id, row in tagged:
        if counts[(row.architecture, row.input_mode)] > 1:
            row = replace(row, architecture=f"{row.architecture} [{run_id}]")
        rows.append(row)
    return rows


def cmd_report(args) -> int:
    rows = collect_reports(args.results)
    table = render_report(rows)
    if args.out:
        out = ensure_dir(args.out)
        (out / "report.csv").write_text(report_csv(rows))
        (out / "report.txt").write_text(table)
    sys.stdout.write(table)
    return 0


def _echo(settings) -> dict:
    return {k: v for k, v in settings.items() if k in CONFIG_KEYS}


# -- argument parser ----------------------------------------------------------


def _add_common(p, dataset=True):
    p.add_argument("--config", help="key = value settings file; flags override it")
    p.add_argument("--seed", type=int, help=f"random seed (fallback: ${SEED_ENV}, then 0)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, help="worker processes (default 1)")
    prof = p.add_mutually_exclusive_group()
    prof.add_argument("--desk", action="store_true", help="desk-scale training profile")
    prof.add_argument("--paper", action="store_true", help="full-scale training profile (default)")
    if dataset:
        p.add_argument("--dataset", help="dataset directory")
        p.add_argument("--alpha", type=float, help=f"mask opacity (default {DEFAULT_ALPHA})")


def _add_training(p):
    p.add_argument("--arch", help=f"comma-separated families: {', '.join(FAMILIES)}")
    p.add_argument("--input", help=f"comma-separated input modes: {', '.join(INPUT_MODES)}")
    p.add_argument("--t-sweep", dest="t_sweep", help="comma-separated frame counts T")
    p.add_argument("--k", type=int, help="cross-validation folds")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--decay", type=float)
    p.add_argument("--resolution", help="input size, e.g. 32 or 32x32")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lanerisk", description="Lane-change risk classification from video clips."
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p, dataset=False)
    p.add_argument("--n-clips", dest="n_clips", type=int, help="number of clips (default 200)")
    p.add_argument("--size", type=int, help="frame height and width (default 32)")
    p.add_argument("--frames", type=int, help="frames per clip (default 60)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("overlay", help="write mask-composited frames of one clip")
    _add_common(p)
    p.add_argument("--clip", help="clip id")
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("train", help="train one model and save a checkpoint")
    _add_common(p)
    _add_training(p)
    p.add_argument("--t", type=int, help="frames per clip (default: first --t-sweep value)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("crossval", help="k-fold cross-validation over a T sweep")
    _add_common(p)
    _add_training(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("report", help="merge report.csv files from earlier runs")
    p.add_argument("results", help="directory searched recursively for report.csv")
    p.add_argument("--out", help="also write the merged report here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except LaneRiskError as exc:
        print(f"lanerisk: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"lanerisk: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
