"""``despeckle`` command line: simulate, train, despeckle, evaluate.

Exit codes: 0 success, 2 argument or configuration error, 3 I/O error,
4 numeric abort during training, 5 checkpoint-format error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import specklesim as ss
from .config import PRESETS, ConfigError, TrainConfig
from .data import load_image_set
from .imageio import Image, atomic_write_bytes, read_image, write_image
from .metrics import evaluate, read_rois
from .networks import generator_forward
from .tensorcore import Tensor
from .training import (LOG_HEADER, CheckpointError, StepRecord, TrainingAborted, init_state,
                       load_checkpoint, run_phases)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4, 5
PHASES = ("pretrain-g", "pretrain-d", "gan")
IMAGE_SUFFIXES = (".pgm", ".png")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class SimulatorSettings:
    size: int = 128
    n_low: int = 40
    n_high: int = 40
    seed: int = 0
    max_inclusions: int = 3


@dataclass(frozen=True)
class RunConfig:
    """Training settings plus the dataset and run directories.

    Relative paths are resolved against the directory holding the config file.
    """
    train: TrainConfig = field(default_factory=TrainConfig)
    simulator: SimulatorSettings = field(default_factory=SimulatorSettings)
    low_dir: Path = Path("data/low")
    high_dir: Path = Path("data/high")
    run_dir: Path = Path("run")

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path(".")) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        known = {"preset", "train", "simulator", "low_dir", "high_dir", "run_dir"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        preset = d.get("preset", "paper")
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        train = _merge(PRESETS[preset]().to_dict(), d.get("train", {}), "train")
        sim = d.get("simulator", {})
        if not isinstance(sim, dict):
            raise ConfigError("simulator must be a mapping")
        sim_fields = {f.name for f in dataclasses.fields(SimulatorSettings)}
        if set(sim) - sim_fields:
            raise ConfigError(f"unknown config keys: {', '.join('simulator.' + k for k in sorted(set(sim) - sim_fields))}")
        paths = {k: (base / d[k]).resolve() if k in d else (base / getattr(cls, k)).resolve()
                 for k in ("low_dir", "high_dir", "run_dir")}
        return cls(TrainConfig.from_dict(train), SimulatorSettings(**sim), **paths)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(raw, path.resolve().parent)


def _merge(base: dict, override: dict, prefix: str) -> dict:
    if not isinstance(override, dict):
        raise ConfigError(f"{prefix} must be a mapping")
    out = dict(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config keys: {prefix}.{k}")
        out[k] = _merge(base[k], v, f"{prefix}.{k}") if isinstance(base[k], dict) else v
    return out


def _image_files(directory: Path) -> list[Path]:
    """Files named in the manifest if present, else every PGM/PNG in sorted order."""
    manifest = directory / "manifest.txt"
    if manifest.exists():
        return [directory / name for name, _, _ in ss.read_manifest(manifest)]
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _read_all(directory: Path, quality: str) -> list[Image]:
    if not directory.is_dir():
        raise CliError(f"not a directory: {directory}", EXIT_IO)
    files = _image_files(directory)
    if not files:
        raise CliError(f"no images in {directory}", EXIT_IO)
    return [read_image(p, quality) for p in files]


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    out = Path(args.out)
    for label, profile, n, seed in (("low", ss.LOW_QUALITY, args.n_low, args.seed),
                                    ("high", ss.HIGH_QUALITY, args.n_high, args.seed + 1)):
        ss.make_dataset(n, profile, out / label, seed, size=args.size,
                        max_inclusions=args.max_inclusions)
        print(f"wrote {n} {profile.label} images to {out / label}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = RunConfig.load(args.config) if args.config else RunConfig.from_dict({"preset": args.preset})
    cfg = run.train
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    run_dir = Path(args.run_dir).resolve() if args.run_dir else run.run_dir
    low_dir = Path(args.low_dir).resolve() if args.low_dir else run.low_dir
    high_dir = Path(args.high_dir).resolve() if args.high_dir else run.high_dir
    phases = list(PHASES) if args.phase == "all" else [args.phase]

    try:
        low = load_image_set(low_dir, "low_quality")
        high = load_image_set(high_dir, "high_quality") if phases != ["pretrain-g"] else []
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load datasets: {exc}", EXIT_IO) from exc

    if args.resume:
        state = load_checkpoint(args.resume, expected=cfg)
        if args.phase == "all" and state.phase in PHASES:
            phases = list(PHASES[PHASES.index(state.phase):])
    else:
        state = init_state(cfg)

    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "train.log"
    with open(log_path, "a") as logf:
        print(LOG_HEADER)
        logf.write(LOG_HEADER + "\n")

        def sink(rec: StepRecord) -> None:
            line = rec.line()
            print(line)
            logf.write(line + "\n")

        try:
            run_phases(state, low, high, phases, ckpt_dir, sink)
        except TrainingAborted as exc:
            print(f"numeric abort: {exc}", file=sys.stderr)
            if exc.checkpoint is not None:
                print(f"diagnostic checkpoint: {exc.checkpoint}", file=sys.stderr)
            return EXIT_NUMERIC
    print(f"checkpoints in {ckpt_dir}")
    return EXIT_OK


def cmd_despeckle(args) -> int:
    state = load_checkpoint(args.checkpoint)
    src = Path(args.inp)
    out = Path(args.out)
    if src.is_dir():
        files = _image_files(src)
        targets = [out / p.name for p in files]
    elif src.is_file():
        files = [src]
        targets = [out / src.name if out.is_dir() else out]
    else:
        raise CliError(f"input not found: {src}", EXIT_IO)
    images = [read_image(p) for p in files]
    results = []
    for img in images:
        t0 = time.perf_counter()
        y = generator_forward(state.gen, Tensor(img.pixels[None, None]), "infer").data[0, 0]
        results.append((y, time.perf_counter() - t0))
    if src.is_dir():
        out.mkdir(parents=True, exist_ok=True)
    for (y, secs), path, target in zip(results, files, targets):
        write_image(target, y)
        print(f"{path.name}\t{secs:.3f}s\t-> {target}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        rois = read_rois(args.rois)
    except ValueError as exc:
        raise ConfigError(f"{args.rois}: {exc}") from exc
    ref = _read_all(Path(args.reference_dir), "high_quality")
    inp = _read_all(Path(args.input_dir), "low_quality")
    out = _read_all(Path(args.despeckled_dir), "generated")
    if not (len(ref) == len(inp) == len(out)):
        raise ConfigError(f"directory sizes differ: reference {len(ref)}, input {len(inp)}, "
                          f"despeckled {len(out)}")
    report = evaluate(ref, inp, out, rois)
    text = report.to_text()
    print(text, end="")
    stem = Path(args.report)
    atomic_write_bytes(stem.with_suffix(".txt"), text.encode())
    atomic_write_bytes(stem.with_suffix(".tsv"), report.to_tsv().encode())
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="despeckle", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write simulated low- and high-quality datasets")
    s.add_argument("--out", required=True, help="output directory (gets low/ and high/)")
    s.add_argument("--n-low", type=int, default=40)
    s.add_argument("--n-high", type=int, default=40)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-inclusions", type=int, default=3)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="run training phases")
    t.add_argument("--config", help="run config JSON")
    t.add_argument("--preset", choices=sorted(PRESETS), default="paper",
                   help="settings used when no --config is given")
    t.add_argument("--phase", choices=PHASES + ("all",), default="all")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--run-dir")
    t.add_argument("--low-dir")
    t.add_argument("--high-dir")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("despeckle", help="apply a trained generator")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--in", dest="inp", required=True, help="image file or directory")
    d.add_argument("--out", required=True, help="output file or directory")
    d.set_defaults(func=cmd_despeckle)

    e = sub.add_parser("evaluate", help="SSNR and KL report over ROIs")
    e.add_argument("--reference-dir", required=True)
    e.add_argument("--input-dir", required=True)
    e.add_argument("--despeckled-dir", required=True)
    e.add_argument("--rois", required=True, help="one 'label x y w h' per line")
    e.add_argument("--report", required=True, help="path stem; writes .txt and .tsv")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "simulate" and (min(args.n_low, args.n_high) < 1 or args.size < 64):
        print("despeckle: error: image counts must be >= 1 and --size >= 64", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"despeckle: error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"despeckle: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"despeckle: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (OSError, ValueError) as exc:
        print(f"despeckle: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
