"""Command-line entry point: ``hepacascade <subcommand> [flags]``.

Every run logs its resolved configuration as JSON. A RunConfig file
(``--config``) can set any module option; explicit flags win over it.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .cascade import CascadeError, load_models, run_cascade, write_overlays
from .cclabel import label
from .compnet_models import CompNet
from .experiment import (
    ConfigError,
    ExperimentConfig,
    PhantomExperimentConfig,
    crossval,
    find_file,
    from_dict,
    load_cases,
    run_phantom_experiment,
    split_validation,
    write_case,
)
from .metrics_eval import CaseMismatchError, evaluate
from .phantom import PhantomConfig, PhantomPlacementError, generate
from .preprocess import NoPeakError, normalize_equalize
from .sampler import cube_arrays, lesion_slice_set, liver_slice_set, load_dataset, save_dataset, small_lesion_cubes
from .training import TrainingError, TrainSchedule, train
from .volume_io import VolumeIOError, load_mask, load_volume, save_mask, save_volume

log = logging.getLogger("hepacascade")

CACHE_ENV = "HEPACASCADE_CACHE"
KNOWN_ERRORS = (
    ConfigError, VolumeIOError, TrainingError, CascadeError, CaseMismatchError,
    PhantomPlacementError, NoPeakError, FileNotFoundError, ValueError,
)


@dataclass(frozen=True)
class RunConfig:
    """All module options. ``profile`` picks the base: full-size networks or
    the scaled 64^3 phantom setup; ``experiment`` entries override it."""

    profile: str = "full"
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    phantom: PhantomConfig = field(default_factory=lambda: PhantomConfig(seed=7))

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _deep_update(base: dict, new: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in new.items():
        if key not in out:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict) and key != "phases":
            out[key] = _deep_update(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_run_config(path=None, data: dict | None = None, profile: str | None = None) -> RunConfig:
    """Read a RunConfig JSON; unknown keys anywhere are rejected. ``profile``
    overrides the file's."""
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    data = dict(data or {})
    unknown = set(data) - {f.name for f in dataclasses.fields(RunConfig)}
    if unknown:
        raise ConfigError(f"unknown RunConfig keys: {sorted(unknown)}")
    profile = profile or data.pop("profile", "full")
    data.pop("profile", None)
    if profile not in ("full", "phantom"):
        raise ConfigError(f"profile must be 'full' or 'phantom', got {profile!r}")
    base = ExperimentConfig() if profile == "full" else ExperimentConfig.phantom()
    exp = from_dict(ExperimentConfig, _deep_update(base.to_json(), data.pop("experiment", {}), "experiment."))
    phantom = from_dict(PhantomConfig, data.pop("phantom", {})) if "phantom" in data else RunConfig().phantom
    return RunConfig(profile, exp, phantom)


def _replace(obj, **changes):
    changes = {k: v for k, v in changes.items() if v is not None}
    return dataclasses.replace(obj, **changes) if changes else obj


def resolve(args) -> RunConfig:
    """RunConfig from ``--config`` with command-line overrides applied."""
    run = load_run_config(args.config, profile=args.profile)
    exp = run.experiment
    exp = _replace(exp, seed=getattr(args, "seed", None))
    exp = dataclasses.replace(
        exp,
        preprocess=_replace(exp.preprocess, bins=getattr(args, "bins", None), clip_range=getattr(args, "clip", None)),
        cascade=_replace(exp.cascade, stride=getattr(args, "stride", None)),
    )
    if getattr(args, "no_small_branch", False):
        exp = dataclasses.replace(exp, cascade=dataclasses.replace(exp.cascade, enable_small_branch=False))
    phantom = _replace(run.phantom, seed=getattr(args, "seed", None))
    return RunConfig(run.profile, exp, phantom)


def _clip(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}")
    return lo, hi


def _cache_dir(sub: str) -> Path | None:
    root = os.environ.get(CACHE_ENV)
    return Path(root) / sub if root else None


def _dump(obj, path=None) -> None:
    text = json.dumps(obj, indent=2, default=_json_default)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")
    print(text)


def _json_default(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# subcommands -----------------------------------------------------------------


def cmd_preprocess(args, run: RunConfig) -> int:
    vol = normalize_equalize(load_volume(args.inp), run.experiment.preprocess)
    save_volume(vol, args.out)
    log.info("wrote %s", args.out)
    return 0


def cmd_phantom_gen(args, run: RunConfig) -> int:
    cfg = run.phantom
    seeds = [int(s) for s in np.random.SeedSequence(cfg.seed).generate_state(args.n)]
    cfgs = [dataclasses.replace(cfg, seed=s) for s in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            phantoms = list(pool.map(generate, cfgs))
    else:
        phantoms = [generate(c) for c in cfgs]
    out = Path(args.out)
    manifest = {"config": dataclasses.asdict(cfg), "cases": []}
    for i, (p, s) in enumerate(zip(phantoms, seeds)):
        cid = f"phantom_{i:03d}"
        write_case(out / cid, p.volume, p.liver, p.lesions)
        manifest["cases"].append({
            "case": cid,
            "seed": s,
            "lesions": [{"tag": l.tag, "center": list(l.center), "radius": l.radius, **l.component.to_json()} for l in p.lesion_list],
        })
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    log.info("wrote %d phantoms to %s", args.n, out)
    return 0


def _datasets_dir(args) -> Path:
    d = args.out if getattr(args, "out", None) else getattr(args, "data", None)
    d = d or _cache_dir("datasets")
    if d is None:
        raise ConfigError(f"no dataset directory given and {CACHE_ENV} is unset")
    return Path(d)


def cmd_make_datasets(args, run: RunConfig) -> int:
    exp = run.experiment
    cases = load_cases(args.cases, None if args.preprocessed else exp.preprocess)
    train_cases, val_cases = split_validation(cases, exp.val_fraction, exp.seed)
    out = _datasets_dir(args)
    cc = exp.cascade
    index = {"val_cases": [c.case_id for c in val_cases], "sets": []}
    for split, group in (("train", train_cases), ("val", val_cases)):
        x, y = liver_slice_set(group)
        index["sets"].append(save_dataset(out, f"liver_{split}", x, y))
        x, y = lesion_slice_set(group, cc.rule)
        index["sets"].append(save_dataset(out, f"large_{split}", x, y))
        samples = [s for c in group for s in small_lesion_cubes(c, cc.rule, cc.cube_edge, cc.slices_above, cc.slices_below)]
        x, y = cube_arrays(samples)
        index["sets"].append(save_dataset(out, f"small_{split}", x, y, [[s.source[0], list(s.source[1])] for s in samples]))
    (out / "index.json").write_text(json.dumps(index, indent=1))
    log.info("datasets in %s: %s", out, {e["name"]: e["count"] for e in index["sets"]})
    return 0


def _train(args, run: RunConfig, name: str) -> int:
    exp = run.experiment
    data = _datasets_dir(args)
    spec = {"liver": exp.spec_liver, "large": exp.spec_large, "small": exp.spec_small}[name]
    schedule = {"liver": exp.liver_schedule, "large": exp.large_schedule, "small": exp.small_schedule}[name]
    if args.schedule:
        schedule = TrainSchedule.load(args.schedule)
    schedule = dataclasses.replace(schedule, seed=exp.seed)
    log.info("schedule %s", json.dumps(schedule.to_json()))
    torch.manual_seed(exp.seed)
    model = CompNet(spec)
    _, report = train(model, load_dataset(data, f"{name}_train"), load_dataset(data, f"{name}_val"), schedule, args.out_checkpoint)
    _dump(report.to_json(), args.report or Path(args.out_checkpoint).with_suffix(".report.json"))
    return 0


def cmd_predict(args, run: RunConfig) -> int:
    exp = run.experiment
    vol = load_volume(args.inp)
    if not args.preprocessed:
        vol = normalize_equalize(vol, exp.preprocess)
    cfg = exp.cascade
    if cfg.enable_small_branch and not args.small_ckpt:
        raise ConfigError("--small-ckpt is required unless --no-small-branch is given")
    models = load_models(args.liver_ckpt, args.large_ckpt, args.small_ckpt if cfg.enable_small_branch else None, cfg.batch_size)
    res = run_cascade(vol, models, cfg)
    save_mask(res.lesions, vol, args.out)
    if args.liver_out:
        save_mask(res.liver, vol, args.liver_out)
    if args.overlay_dir:
        written = write_overlays(vol, res.lesions, args.overlay_dir)
        log.info("wrote %d overlay images to %s", len(written), args.overlay_dir)
    log.info("lesion voxels %d, liver voxels %d", int(res.lesions.sum()), int(res.liver.sum()))
    return 0


def _mask_files(root) -> dict[str, Path]:
    """Lesion masks under ``root``: top-level mask files keyed by stem, or
    case folders keyed by folder name."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    found = {}
    for p in sorted(root.iterdir()):
        if p.is_dir():
            f = find_file(p, "lesions")
            if f is not None:
                found[p.name] = f
        elif p.name.endswith((".raw", ".nii", ".nii.gz")):
            found[p.name.split(".")[0]] = p
    return found


def cmd_evaluate(args, run: RunConfig) -> int:
    preds = {k: load_mask(p) for k, p in _mask_files(args.pred_dir).items()}
    gts = {k: load_mask(p) for k, p in _mask_files(args.gt_dir).items()}
    rep = evaluate(preds, gts)
    _dump(rep.to_json(), args.report)
    return 0


def cmd_crossval(args, run: RunConfig) -> int:
    exp = run.experiment
    cases = load_cases(args.cases, None if args.preprocessed else exp.preprocess)
    out = crossval(cases, exp, args.k, exp.seed, args.out)
    _dump(out, args.report)
    return 0


def cmd_phantom_eval(args, run: RunConfig) -> int:
    if run.profile != "phantom":
        log.warning("phantom-eval with the %r profile; pass --profile phantom for the scaled setup", run.profile)
    cfg = PhantomExperimentConfig(phantom=run.phantom, n_phantoms=args.n, n_test=args.n_test, experiment=run.experiment)
    out = run_phantom_experiment(cfg, args.out)
    _dump(out["result"], args.report)
    return 0


def cmd_components(args, run: RunConfig) -> int:
    mask = load_mask(args.inp)
    _, comps = label(mask, args.connectivity)
    if args.json:
        _dump([c.to_json() for c in comps])
    else:
        for c in comps:
            print(f"{c.label}\t{c.voxel_count}\t{c.bbox}")
    return 0


# parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="hepacascade",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"Dataset cache: ${CACHE_ENV}. Use --dump-config to print every resolved default.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--profile", choices=("full", "phantom"), help="base configuration (default: full, or the file's)")
    common.add_argument("--jobs", type=int, default=1, help="CPU threads / worker processes")
    common.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    common.add_argument("--dump-config", action="store_true", help="print the resolved RunConfig and exit")
    seeded = argparse.ArgumentParser(add_help=False)
    seeded.add_argument("--seed", type=int, help="overrides the config seed")

    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, func, help, parents=(common,)):
        p = sub.add_parser(name, help=help, parents=list(parents), formatter_class=fmt)
        p.set_defaults(func=func)
        return p

    p = add("preprocess", cmd_preprocess, "clip, peak-normalize and equalize one CT volume")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, help="histogram bins (config default 256)")
    p.add_argument("--clip", type=_clip, help="LO,HI clip range in HU, written --clip=LO,HI when LO is negative (config default -200,400)")

    p = add("make-datasets", cmd_make_datasets, "build liver, large-lesion and cube training sets", (common, seeded))
    p.add_argument("--cases", required=True, help="folder of case folders with ct/liver/lesions volumes")
    p.add_argument("--out", help=f"output folder (default ${CACHE_ENV}/datasets)")
    p.add_argument("--preprocessed", action="store_true", help="cases are already preprocessed")

    for name in ("liver", "large", "small"):
        p = add(f"train-{name}", lambda a, r, n=name: _train(a, r, n), f"train the {name} network", (common, seeded))
        p.add_argument("--data", help=f"dataset folder from make-datasets (default ${CACHE_ENV}/datasets)")
        p.add_argument("--out-checkpoint", required=True)
        p.add_argument("--schedule", help="TrainSchedule JSON replacing the configured one")
        p.add_argument("--report", help="TrainReport JSON path (default next to the checkpoint)")

    p = add("predict", cmd_predict, "run the cascade on one CT volume")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--liver-ckpt", required=True)
    p.add_argument("--large-ckpt", required=True)
    p.add_argument("--small-ckpt")
    p.add_argument("--stride", type=int, help="sliding-cube stride (config default 8)")
    p.add_argument("--out", required=True, help="lesion mask output path")
    p.add_argument("--liver-out", help="optional liver mask output path")
    p.add_argument("--no-small-branch", action="store_true")
    p.add_argument("--overlay-dir", help="write per-slice PNG outlines here")
    p.add_argument("--preprocessed", action="store_true", help="input is already preprocessed")

    p = add("evaluate", cmd_evaluate, "Dice per case and overall for predicted vs reference masks")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--report", help="JSON report path")

    p = add("crossval", cmd_crossval, "k-fold train, predict and evaluate by case", (common, seeded))
    p.add_argument("--cases", required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--out", help="folder for per-fold checkpoints")
    p.add_argument("--report", help="JSON report path")
    p.add_argument("--preprocessed", action="store_true")
    p.add_argument("--no-small-branch", action="store_true")

    p = add("phantom-gen", cmd_phantom_gen, "write synthetic phantom cases and a manifest", (common, seeded))
    p.add_argument("--n", type=int, default=25)
    p.add_argument("--out", required=True)

    p = add("phantom-eval", cmd_phantom_eval, "train on phantoms and compare the cascade with and without the small branch", (common, seeded))
    p.add_argument("--n", type=int, default=25)
    p.add_argument("--n-test", type=int, default=5)
    p.add_argument("--out", help="folder for checkpoints and experiment.json")
    p.add_argument("--report", help="JSON report path")

    p = add("components", cmd_components, "list connected components of a mask")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--connectivity", choices=("full", "face"), default="full")
    p.add_argument("--json", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        torch.set_num_threads(args.jobs)
        run = resolve(args)
        if args.dump_config:
            _dump(run.to_json())
            return 0
        log.info("command %s, config %s", args.command, json.dumps(run.to_json(), default=_json_default))
        return args.func(args, run)
    except KNOWN_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
