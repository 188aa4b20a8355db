"""Generator pretraining, discriminator pretraining and the adversarial loop, with checkpoints."""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import tensorcore as tc
from .config import TrainConfig
from .data import (
    PatchSet,
    ReplayBuffer,
    assemble_d_minibatch,
    buffer_insert,
    extract_patch_set,
    random_crop_batch,
)
from .imageio import Image, atomic_write_bytes
from .losses import discriminator_loss, generator_total_loss, l1_loss
from .networks import (
    ModelParams,
    build_discriminator,
    build_generator,
    config_from_dict,
    discriminator_forward,
    generator_forward,
)
from .tensorcore import AdamState, BatchNormState, NumericError, Tape, Tensor, adam_step, backward

log = logging.getLogger(__name__)

MAGIC = b"DSPK"
FORMAT_VERSION = 1


class TrainingAborted(RuntimeError):
    """A non-finite loss stopped training; ``checkpoint`` holds the state before the failing step."""

    def __init__(self, message: str, checkpoint: Path | None):
        super().__init__(message)
        self.checkpoint = checkpoint


class CheckpointError(ValueError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# log records


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


@dataclass
class StepRecord:
    phase: str
    iteration: int
    step: int
    loss_total: float
    loss_adv: float | None = None
    loss_l1: float | None = None
    loss_msssim: float | None = None
    d_real_mean: float | None = None
    d_fake_mean: float | None = None
    buffer_fill: int | None = None
    n_real: int | None = None
    n_fresh: int | None = None
    n_buffered: int | None = None

    def line(self) -> str:
        return " ".join(_fmt(v) for v in (
            self.phase, self.iteration, self.step, self.loss_total, self.loss_adv, self.loss_l1,
            self.loss_msssim, self.d_real_mean, self.d_fake_mean, self.buffer_fill,
            self.n_real, self.n_fresh, self.n_buffered))

    @classmethod
    def parse(cls, line: str) -> "StepRecord":
        f = line.split()
        if len(f) != 13:
            raise ValueError(f"malformed log line: {line!r}")

        def num(s, typ):
            return None if s == "-" else typ(s)

        return cls(f[0], int(f[1]), int(f[2]), float(f[3]), *(num(s, float) for s in f[4:9]),
                   *(num(s, int) for s in f[9:13]))


LOG_HEADER = ("phase iter step loss_total loss_adv loss_l1 loss_msssim d_real_mean d_fake_mean "
              "buffer_fill n_real n_fresh n_buffered")

Sink = Callable[[StepRecord], None]


def _null_sink(rec: StepRecord) -> None:
    pass


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    cfg: TrainConfig
    gen: ModelParams
    disc: ModelParams | None
    opt_g: AdamState = field(default_factory=AdamState)
    opt_d: AdamState = field(default_factory=AdamState)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    buffer: ReplayBuffer = field(default_factory=ReplayBuffer)
    phase: str = "init"
    counter: int = 0


def init_state(cfg: TrainConfig) -> TrainState:
    return TrainState(
        cfg=cfg,
        gen=build_generator(cfg.generator, cfg.seed),
        disc=build_discriminator(cfg.discriminator, cfg.seed + 1),
        rng=np.random.default_rng(cfg.seed + 2),
        buffer=ReplayBuffer(cfg.gan.buffer_capacity, cfg.seed + 3),
    )


def _start_phase(state: TrainState, phase: str) -> None:
    if state.phase != phase:
        state.phase = phase
        state.counter = 0
        state.opt_g = AdamState()
        state.opt_d = AdamState()


def _generate(gen: ModelParams, batch: np.ndarray, chunk: int = 16) -> np.ndarray:
    outs = [generator_forward(gen, Tensor(batch[i:i + chunk]), "infer").data
            for i in range(0, len(batch), chunk)]
    return np.concatenate(outs).astype(np.float32)


def _abort(state: TrainState, ckpt_dir: Path | None, what: str, exc: Exception) -> TrainingAborted:
    path = None
    if ckpt_dir is not None:
        path = Path(ckpt_dir) / f"diagnostic_{state.phase}_{state.counter:05d}.dspk"
        save_checkpoint(state, path)
    return TrainingAborted(f"non-finite value in {what}: {exc}", path)


# ---------------------------------------------------------------------------
# phase 1: generator reproduces its input


def pretrain_generator(state: TrainState, low_quality: list[Image], sink: Sink = _null_sink,
                       ckpt_dir: Path | None = None) -> list[float]:
    """l1 self-reconstruction on random crops; returns the per-epoch mean loss."""
    if not low_quality:
        raise ValueError("low-quality set is empty")
    cfg = state.cfg.pretrain_g
    _start_phase(state, "pretrain-g")
    steps = max(1, cfg.samples_per_epoch // cfg.batch)
    curve = []
    while state.counter < cfg.epochs:
        epoch = state.counter + 1
        losses = []
        for step in range(1, steps + 1):
            x = Tensor(random_crop_batch(low_quality, cfg.crop, cfg.batch, state.rng))
            try:
                with Tape() as tape:
                    loss = l1_loss(generator_forward(state.gen, x, "train"), x)
                grads = backward(loss, tape)
                adam_step(state.gen.params, state.gen.grads(grads), state.opt_g, cfg.lr)
            except NumericError as exc:
                raise _abort(state, ckpt_dir, f"pretrain-g epoch {epoch} step {step}", exc) from exc
            losses.append(loss.item())
            sink(StepRecord("pretrain-g", epoch, step, loss.item(), loss_l1=loss.item()))
        state.counter = epoch
        curve.append(float(np.mean(losses)))
        log.info("pretrain-g epoch %d mean l1 %.5f", epoch, curve[-1])
    return curve


def reconstruction_error(gen: ModelParams, images: list[Image], crop: int, n: int,
                         rng: np.random.Generator) -> float:
    """Mean |G(x) - x| over ``n`` random held-out crops, inference mode."""
    x = random_crop_batch(images, crop, n, rng)
    return float(np.abs(_generate(gen, x) - x).mean())


# ---------------------------------------------------------------------------
# phase 2: discriminator separates high-quality patches from G outputs


def generated_patch_set(gen: ModelParams, low_quality: list[Image], size: int) -> PatchSet:
    ps = extract_patch_set(low_quality, size)
    out = _generate(gen, ps.stack())
    return PatchSet([p[0] for p in out], size, "generated", ps.offsets)


def _d_update(state: TrainState, real: np.ndarray, fake: np.ndarray, lr: float):
    with Tape() as tape:
        d_real = discriminator_forward(state.disc, Tensor(real))
        d_fake = discriminator_forward(state.disc, Tensor(fake))
        loss = discriminator_loss(d_real, d_fake)
    grads = backward(loss, tape)
    adam_step(state.disc.params, state.disc.grads(grads), state.opt_d, lr)
    return loss.item(), float(d_real.data.mean()), float(d_fake.data.mean())


def pretrain_discriminator(state: TrainState, high_quality: PatchSet, generated: PatchSet,
                           sink: Sink = _null_sink, ckpt_dir: Path | None = None) -> list[float]:
    """Balanced-batch BCE training; an epoch is one pass over the smaller class."""
    if not len(high_quality) or not len(generated):
        raise ValueError("both patch sets must be non-empty")
    cfg = state.cfg.pretrain_d
    _start_phase(state, "pretrain-d")
    half = cfg.batch // 2
    n = min(len(high_quality), len(generated))
    steps = max(1, n // half)
    real_all, fake_all = high_quality.stack(), generated.stack()
    curve = []
    while state.counter < cfg.epochs:
        epoch = state.counter + 1
        # the larger class is subsampled afresh each epoch
        ri = state.rng.permutation(len(real_all))
        fi = state.rng.permutation(len(fake_all))
        losses = []
        for step in range(1, steps + 1):
            sl = slice((step - 1) * half, step * half)
            try:
                loss, dr, df = _d_update(state, real_all[ri[sl]], fake_all[fi[sl]], cfg.lr)
            except NumericError as exc:
                raise _abort(state, ckpt_dir, f"pretrain-d epoch {epoch} step {step}", exc) from exc
            losses.append(loss)
            sink(StepRecord("pretrain-d", epoch, step, loss, d_real_mean=dr, d_fake_mean=df,
                            n_real=half, n_fresh=half))
        state.counter = epoch
        curve.append(float(np.mean(losses)))
        log.info("pretrain-d epoch %d mean bce %.5f", epoch, curve[-1])
    return curve


def discriminator_accuracy(disc: ModelParams, real: np.ndarray, fake: np.ndarray) -> float:
    pr = discriminator_forward(disc, Tensor(real)).data
    pf = discriminator_forward(disc, Tensor(fake)).data
    return float(((pr > 0.5).sum() + (pf < 0.5).sum()) / (len(pr) + len(pf)))


# ---------------------------------------------------------------------------
# phase 3: adversarial training


def gan_iteration(state: TrainState, low_quality: list[Image], high_quality: list[Image],
                  sink: Sink = _null_sink, ckpt_dir: Path | None = None) -> list[StepRecord]:
    """One D update on a 50/25/25 minibatch, then ``g_steps_per_iter`` G updates."""
    cfg = state.cfg.gan
    lam_cfg = state.cfg.loss
    _start_phase(state, "gan")
    it = state.counter + 1
    rng = state.rng
    quarter, half = cfg.d_batch // 4, cfg.d_batch // 2
    records = []
    fresh = None
    for d_step in range(1, cfg.d_steps_per_iter + 1):
        n_fresh = half - min(len(state.buffer), quarter)
        fresh = _generate(state.gen, random_crop_batch(low_quality, cfg.d_crop, n_fresh, rng))
        reals = random_crop_batch(high_quality, cfg.d_crop, half, rng)
        mb = assemble_d_minibatch(state.buffer, reals, fresh, cfg.d_batch, rng)
        try:
            loss, dr, df = _d_update(state, mb.images[:half], mb.images[half:], cfg.d_lr)
        except NumericError as exc:
            raise _abort(state, ckpt_dir, f"gan iteration {it} D step {d_step}", exc) from exc
        rec = StepRecord("gan-d", it, d_step, loss, d_real_mean=dr, d_fake_mean=df,
                         buffer_fill=len(state.buffer), n_real=mb.n_real, n_fresh=mb.n_fresh,
                         n_buffered=mb.n_buffered)
        records.append(rec)
        sink(rec)

    state.disc.set_requires_grad(False)
    try:
        for g_step in range(1, cfg.g_steps_per_iter + 1):
            x = Tensor(random_crop_batch(low_quality, cfg.g_crop, cfg.g_batch, rng))
            try:
                with Tape() as tape:
                    out = generator_forward(state.gen, x, "train")
                    d_fake = discriminator_forward(state.disc, out)
                    parts = generator_total_loss(d_fake, out, x, lam_cfg)
                grads = backward(parts.total, tape)
                adam_step(state.gen.params, state.gen.grads(grads), state.opt_g, cfg.g_lr)
            except NumericError as exc:
                raise _abort(state, ckpt_dir, f"gan iteration {it} G step {g_step}", exc) from exc
            rec = StepRecord("gan-g", it, g_step, parts.total.item(), parts.adversarial, parts.l1,
                             parts.ms_ssim, d_fake_mean=float(d_fake.data.mean()),
                             buffer_fill=len(state.buffer))
            records.append(rec)
            sink(rec)
    finally:
        state.disc.set_requires_grad(True)

    buffer_insert(state.buffer, fresh[:quarter])
    state.counter = it
    return records


def train_gan(state: TrainState, low_quality: list[Image], high_quality: list[Image],
              sink: Sink = _null_sink, ckpt_dir: Path | None = None,
              iterations: int | None = None) -> TrainState:
    """Run the adversarial loop up to ``iterations`` (default: the configured total).

    Checkpoints go to ``ckpt_dir`` every ``checkpoint_every`` iterations and at the end.
    """
    cfg = state.cfg.gan
    target = cfg.iterations if iterations is None else iterations
    _start_phase(state, "gan")
    while state.counter < target:
        gan_iteration(state, low_quality, high_quality, sink, ckpt_dir)
        if ckpt_dir is not None and state.counter % cfg.checkpoint_every == 0:
            save_checkpoint(state, Path(ckpt_dir) / f"gan_{state.counter:05d}.dspk")
    if ckpt_dir is not None:
        save_checkpoint(state, Path(ckpt_dir) / "gan_final.dspk")
    return state


# ---------------------------------------------------------------------------
# checkpoints


def _named_arrays(state: TrainState) -> Iterable[tuple[str, np.ndarray]]:
    models = [("G", state.gen)] + ([("D", state.disc)] if state.disc is not None else [])
    for prefix, mp in models:
        for name, t in mp.params.items():
            yield f"{prefix}/p/{name}", t.data
        for name, s in mp.bn.items():
            yield f"{prefix}/bn/{name}/mean", s.mean
            yield f"{prefix}/bn/{name}/var", s.var
    for prefix, opt in (("optG", state.opt_g), ("optD", state.opt_d)):
        for name in opt.m:
            yield f"{prefix}/m/{name}", opt.m[name]
            yield f"{prefix}/v/{name}", opt.v[name]
    for i, p in enumerate(state.buffer.pool):
        yield f"buffer/{i:06d}", p


def _adam_meta(opt: AdamState) -> dict:
    return {"t": opt.t, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}


def encode_checkpoint(state: TrainState) -> bytes:
    meta = {
        "phase": state.phase,
        "counter": state.counter,
        "config": state.cfg.to_dict(),
        "generator": state.gen.config_dict(),
        "discriminator": state.disc.config_dict() if state.disc is not None else None,
        "opt_g": _adam_meta(state.opt_g),
        "opt_d": _adam_meta(state.opt_d),
        "rng": state.rng.bit_generator.state,
        "buffer": {"capacity": state.buffer.capacity, "rng": state.buffer.rng.bit_generator.state},
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(state.cfg.hash())
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    arrays = list(_named_arrays(state))
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(path, encode_checkpoint(state))
    return path


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("checkpoint is truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _rng_from(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def decode_checkpoint(raw: bytes, expected: TrainConfig | None = None) -> TrainState:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    digest = r.take(32)
    try:
        meta = json.loads(r.take(r.u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from exc
    cfg = TrainConfig.from_dict(meta["config"])
    if cfg.hash() != digest:
        raise CheckpointError("stored config does not match the config hash")
    if expected is not None and expected.hash() != digest:
        raise ConfigMismatchError("checkpoint was written with a different training config")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(raw):
        raise CheckpointError("trailing bytes after checkpoint payload")

    def model(prefix: str, cfg_dict: dict) -> ModelParams:
        mp = ModelParams(config_from_dict(cfg_dict))
        for key, arr in arrays.items():
            parts = key.split("/")
            if parts[0] != prefix:
                continue
            if parts[1] == "p":
                mp.params[parts[2]] = Tensor(arr, requires_grad=True, name=parts[2])
            elif parts[1] == "bn":
                st = mp.bn.setdefault(parts[2], BatchNormState(np.zeros(0), np.zeros(0)))
                setattr(st, parts[3], arr)
        return mp

    def adam(prefix: str, m: dict) -> AdamState:
        opt = AdamState(t=m["t"], beta1=m["beta1"], beta2=m["beta2"], eps=m["eps"])
        for key, arr in arrays.items():
            parts = key.split("/", 2)
            if parts[0] == prefix:
                getattr(opt, parts[1])[parts[2]] = arr
        return opt

    buffer = ReplayBuffer(meta["buffer"]["capacity"])
    buffer.rng = _rng_from(meta["buffer"]["rng"])
    buffer.pool = [arr for key, arr in arrays.items() if key.startswith("buffer/")]
    return TrainState(
        cfg=cfg,
        gen=model("G", meta["generator"]),
        disc=model("D", meta["discriminator"]) if meta["discriminator"] else None,
        opt_g=adam("optG", meta["opt_g"]),
        opt_d=adam("optD", meta["opt_d"]),
        rng=_rng_from(meta["rng"]),
        buffer=buffer,
        phase=meta["phase"],
        counter=meta["counter"],
    )


def load_checkpoint(path: str | Path, expected: TrainConfig | None = None) -> TrainState:
    raw = Path(path).read_bytes()
    try:
        return decode_checkpoint(raw, expected)
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, struct.error) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# all phases


def run_phases(state: TrainState, low_quality: list[Image], high_quality: list[Image],
               phases: Iterable[str], ckpt_dir: Path, sink: Sink = _null_sink) -> TrainState:
    """Run the named phases in order, writing one checkpoint at the end of each."""
    ckpt_dir = Path(ckpt_dir)
    for phase in phases:
        if phase == "pretrain-g":
            pretrain_generator(state, low_quality, sink, ckpt_dir)
            save_checkpoint(state, ckpt_dir / "pretrain_g.dspk")
        elif phase == "pretrain-d":
            crop = state.cfg.pretrain_d.crop
            real = extract_patch_set(high_quality, crop)
            fake = generated_patch_set(state.gen, low_quality, crop)
            pretrain_discriminator(state, real, fake, sink, ckpt_dir)
            save_checkpoint(state, ckpt_dir / "pretrain_d.dspk")
        elif phase == "gan":
            train_gan(state, low_quality, high_quality, sink, ckpt_dir)
        else:
            raise ValueError(f"unknown phase {phase!r}")
    return state
