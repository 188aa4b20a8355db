"""End-to-end desk-scale reproduction on simulated data.

Builds unpaired low/high-quality training sets, runs the three training phases,
despeckles held-out homogeneous low-quality images and scores them against
held-out high-quality images over a fixed central ROI.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.ndimage import uniform_filter

from . import specklesim as ss
from .config import TrainConfig, desk_preset
from .data import load_image_set
from .imageio import Image
from .losses import MsSsimConfig, ms_ssim_loss
from .metrics import MetricsReport, Roi, evaluate, ssnr
from .networks import ModelParams, generator_forward
from .tensorcore import Tensor
from .training import Sink, TrainState, init_state, run_phases

log = logging.getLogger(__name__)

IMAGE_SIZE = 128
EVAL_ROI = Roi(16, 16, 96, 96, "parenchyma")


@dataclass
class DeskData:
    low: list[Image]
    high: list[Image]
    held_low: list[Image]
    held_high: list[Image]


def build_datasets(root: Path, seed: int = 0, n_train: int = 40, n_held: int = 8) -> DeskData:
    """Simulate (or reuse) the four desk-scale image sets under ``root``."""
    root = Path(root)
    specs = [("low", ss.LOW_QUALITY, n_train, 3, seed * 10 + 1),
             ("high", ss.HIGH_QUALITY, n_train, 3, seed * 10 + 2),
             ("held_low", ss.LOW_QUALITY, n_held, 0, seed * 10 + 3),
             ("held_high", ss.HIGH_QUALITY, n_held, 0, seed * 10 + 4)]
    sets = {}
    for name, profile, n, max_inc, s in specs:
        d = root / name
        if not (d / "manifest.txt").exists():
            ss.make_dataset(n, profile, d, s, size=IMAGE_SIZE, max_inclusions=max_inc)
        sets[name] = load_image_set(d, profile.label)
    return DeskData(**sets)


def despeckle_images(gen: ModelParams, images: list[Image]) -> tuple[list[Image], list[float]]:
    outs, secs = [], []
    for img in images:
        t0 = time.perf_counter()
        y = generator_forward(gen, Tensor(img.pixels[None, None]), "infer").data[0, 0]
        secs.append(time.perf_counter() - t0)
        outs.append(Image(y.astype(np.float32), "generated", img.source))
    return outs, secs


@dataclass
class DeskScores:
    kl_y_x: float
    kl_y_xhat: float
    ssnr_x: float
    ssnr_xhat: float
    ssnr_y: float
    ssnr_box5: float
    ms_ssim_loss: float
    report: MetricsReport

    @property
    def kl_ratio(self) -> float:
        return self.kl_y_xhat / self.kl_y_x

    @property
    def ssnr_gain(self) -> float:
        return self.ssnr_xhat / self.ssnr_x

    def summary(self) -> str:
        return (f"KL(y,x)={self.kl_y_x:.4f} KL(y,xhat)={self.kl_y_xhat:.4f} ratio={self.kl_ratio:.3f} | "
                f"SSNR x={self.ssnr_x:.3f} xhat={self.ssnr_xhat:.3f} y={self.ssnr_y:.3f} "
                f"box5={self.ssnr_box5:.3f} gain={self.ssnr_gain:.3f} | MS-SSIM loss={self.ms_ssim_loss:.4f}")


def score(gen: ModelParams, data: DeskData, roi: Roi = EVAL_ROI) -> DeskScores:
    xhat, secs = despeckle_images(gen, data.held_low)
    report = evaluate(data.held_high, data.held_low, xhat, [roi], secs)
    box5 = float(np.mean([ssnr(uniform_filter(x.pixels.astype(np.float64), 5, mode="reflect"), roi)
                          for x in data.held_low]))
    x = np.stack([im.pixels for im in data.held_low])[:, None].astype(np.float32)
    xh = np.stack([im.pixels for im in xhat])[:, None].astype(np.float32)
    mss = ms_ssim_loss(Tensor(xh), Tensor(x), MsSsimConfig()).item()
    return DeskScores(report.mean("kl_y_x"), report.mean("kl_y_xhat"), report.mean("ssnr_x"),
                      report.mean("ssnr_xhat"), report.mean("ssnr_y"), box5, mss, report)


def run_desk_experiment(workdir: Path, cfg: TrainConfig | None = None, sink: Sink | None = None,
                        phases=("pretrain-g", "pretrain-d", "gan"),
                        on_phase: Callable[[str, TrainState], None] | None = None) -> tuple[TrainState, DeskScores]:
    workdir = Path(workdir)
    cfg = cfg or desk_preset()
    data = build_datasets(workdir / "data", cfg.seed)
    state = init_state(cfg)
    for phase in phases:
        t0 = time.perf_counter()
        run_phases(state, data.low, data.high, [phase], workdir / "checkpoints",
                   sink or (lambda rec: None))
        log.info("%s finished in %.1f s", phase, time.perf_counter() - t0)
        if on_phase is not None:
            on_phase(phase, state)
    return state, score(state.gen, data)
