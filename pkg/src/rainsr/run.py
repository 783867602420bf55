"""Stage sequencing, checkpoint wiring, and run bookkeeping.

A run owns one output directory (guarded by a lock file) and executes the
three training stages in order: translator, then dsn (which needs the
frozen translator), then srn (which needs both).  Each stage writes a
CSV loss log, an atomic checkpoint, and appends a record to the run
manifest.

Everything stochastic derives from the config's master seed through a
fixed splitting rule (stage tag, then purpose tag, then step index), so a
resumed run replays exactly the batches and buffer draws of an
uninterrupted one.
"""

from __future__ import annotations

import os
import time
from contextlib import contextmanager
from dataclasses import asdict, fields

import numpy as np
import torch

from . import dsn as dsn_mod
from . import srn as srn_mod
from . import translator as tr_mod
from .checkpoint import CheckpointData, Section, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .datasets import (BatchStream, DatasetIndex, MicroDatasetManifest,
                       MicroSizes, RainParams, ingest_folder,
                       make_micro_dataset, read_manifest)
from .errors import CheckpointError, RainSRError, SequencingError, TrainingDivergenceError
from .metrics import MetricsReport, evaluate_pipeline
from .rng import derive_seed
from .translator import NetBundle

STAGES = ("translator", "dsn", "srn")


def rain_params_from_config(config: TrainConfig) -> RainParams:
    d = config.data
    return RainParams(
        streak_count=d.rain_streaks, length_px=d.rain_length,
        width_px=d.rain_width, angle_deg=d.rain_angle_deg,
        opacity=d.rain_opacity, contrast_dim=d.rain_contrast_dim,
        seed=derive_seed(config.seed, "rain"),
    )


def synth_dataset(config: TrainConfig,
                  out_root: str | None = None) -> MicroDatasetManifest:
    """Generate the procedural micro-dataset the config describes."""
    d = config.data
    return make_micro_dataset(
        out_root or d.root, config.seed,
        sizes=MicroSizes(d.sunny, d.rainy, d.real_lr, d.eval),
        scene_size=d.scene_size, rain=rain_params_from_config(config),
    )


def stage_paths(config: TrainConfig, stage: str) -> tuple[str, str]:
    return (os.path.join(config.run_dir, f"{stage}.ckpt"),
            os.path.join(config.run_dir, f"{stage}_loss.csv"))


@contextmanager
def run_lock(run_dir: str):
    """Exclusive ownership of a run directory via an O_EXCL lock file."""
    os.makedirs(run_dir, exist_ok=True)
    lock_path = os.path.join(run_dir, ".lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RainSRError(
            f"run directory {run_dir} is locked by another run "
            f"(remove {lock_path} if that run is dead)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        if os.path.exists(lock_path):
            os.unlink(lock_path)


def lr_at(base: float, step: int, total: int, schedule: str) -> float:
    """Constant, or linear decay to zero over the final half of training."""
    if schedule == "constant" or total <= 1:
        return base
    half = total // 2
    if step < half:
        return base
    return base * (total - step) / max(total - half, 1)


# ---------------------------------------------------------------------------
# bundle <-> checkpoint sections

def _bundle_sections(tag: str, bundle: NetBundle) -> dict[str, Section]:
    spec = bundle.net.spec
    params = Section(meta={
        "family": spec.family,
        "base_channels": str(spec.base_channels),
        "residual_blocks": str(spec.residual_blocks),
    })
    for name, p in bundle.params.params.items():
        params.tensors[name] = p.detach().numpy().copy()
    opt = Section(meta={"t": str(bundle.opt.t)})
    for name in bundle.params.names():
        opt.tensors[f"m/{name}"] = bundle.opt.m[name].numpy().copy()
        opt.tensors[f"v/{name}"] = bundle.opt.v[name].numpy().copy()
    return {f"params/{tag}": params, f"opt/{tag}": opt}


def _restore_bundle(data: CheckpointData, tag: str, bundle: NetBundle) -> None:
    try:
        params = data.sections[f"params/{tag}"]
        opt = data.sections[f"opt/{tag}"]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint missing section for {tag}") from None
    spec = bundle.net.spec
    recorded = (params.meta.get("family"), params.meta.get("base_channels"),
                params.meta.get("residual_blocks"))
    expected = (spec.family, str(spec.base_channels), str(spec.residual_blocks))
    if recorded != expected:
        raise CheckpointError(
            f"network spec mismatch for {tag}: checkpoint has {recorded}, "
            f"config builds {expected}"
        )
    if set(params.tensors) != set(bundle.params.params):
        raise CheckpointError(f"parameter names mismatch for {tag}")
    with torch.no_grad():
        for name, arr in params.tensors.items():
            p = bundle.params.params[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"shape mismatch for {tag}:{name}")
            p.copy_(torch.from_numpy(arr))
        for name in bundle.params.names():
            bundle.opt.m[name].copy_(torch.from_numpy(opt.tensors[f"m/{name}"]))
            bundle.opt.v[name].copy_(torch.from_numpy(opt.tensors[f"v/{name}"]))
    bundle.opt.t = int(opt.meta["t"])


def _buffer_section(buffer: tr_mod.ReplayBuffer) -> Section:
    sec = Section(meta={"count": str(len(buffer.images)),
                        "capacity": str(buffer.capacity)})
    for i, img in enumerate(buffer.images):
        sec.tensors[f"img{i:04d}"] = img.numpy().copy()
    return sec


def _restore_buffer(sec: Section, buffer: tr_mod.ReplayBuffer) -> None:
    buffer.capacity = int(sec.meta["capacity"])
    buffer.images = [torch.from_numpy(sec.tensors[f"img{i:04d}"].copy())
                     for i in range(int(sec.meta["count"]))]


def translator_to_checkpoint(state: tr_mod.TranslatorState,
                             fingerprint: str) -> CheckpointData:
    data = CheckpointData("translator", fingerprint, state.step, state.seed)
    for tag, bundle in (("g_s2r", state.g_s2r), ("g_r2s", state.g_r2s),
                        ("d_rainy", state.d_rainy), ("d_sunny", state.d_sunny)):
        data.sections.update(_bundle_sections(tag, bundle))
    data.sections["buffer/rainy"] = _buffer_section(state.buffer_rainy)
    data.sections["buffer/sunny"] = _buffer_section(state.buffer_sunny)
    return data


def restore_translator(data: CheckpointData, state: tr_mod.TranslatorState) -> None:
    if data.stage != "translator":
        raise CheckpointError(f"expected translator checkpoint, got {data.stage}")
    for tag, bundle in (("g_s2r", state.g_s2r), ("g_r2s", state.g_r2s),
                        ("d_rainy", state.d_rainy), ("d_sunny", state.d_sunny)):
        _restore_bundle(data, tag, bundle)
    _restore_buffer(data.sections["buffer/rainy"], state.buffer_rainy)
    _restore_buffer(data.sections["buffer/sunny"], state.buffer_sunny)
    state.step = data.step
    state.seed = data.seed


def dsn_to_checkpoint(state: dsn_mod.DsnState, fingerprint: str) -> CheckpointData:
    data = CheckpointData("dsn", fingerprint, state.step, state.seed)
    data.sections.update(_bundle_sections("dsn", state.dsn))
    data.sections.update(_bundle_sections("d_lr", state.d_lr))
    return data


def restore_dsn(data: CheckpointData, state: dsn_mod.DsnState) -> None:
    if data.stage != "dsn":
        raise CheckpointError(f"expected dsn checkpoint, got {data.stage}")
    _restore_bundle(data, "dsn", state.dsn)
    _restore_bundle(data, "d_lr", state.d_lr)
    state.step = data.step
    state.seed = data.seed


def srn_to_checkpoint(state: srn_mod.SrnState, fingerprint: str) -> CheckpointData:
    data = CheckpointData("srn", fingerprint, state.step, state.seed)
    data.sections.update(_bundle_sections("srn", state.srn))
    data.sections.update(_bundle_sections("d_hr", state.d_hr))
    return data


def restore_srn(data: CheckpointData, state: srn_mod.SrnState) -> None:
    if data.stage != "srn":
        raise CheckpointError(f"expected srn checkpoint, got {data.stage}")
    _restore_bundle(data, "srn", state.srn)
    _restore_bundle(data, "d_hr", state.d_hr)
    state.step = data.step
    state.seed = data.seed


# ---------------------------------------------------------------------------
# state construction from config

def build_translator_state(config: TrainConfig) -> tr_mod.TranslatorState:
    c = config.translator
    return tr_mod.init_translator(
        seed=derive_seed(config.seed, "stage", "translator"),
        base_channels=c.base_channels, residual_blocks=c.residual_blocks,
        disc_channels=c.disc_channels, lr=c.lr, beta1=c.beta1, beta2=c.beta2,
        lambda_cyc=c.lambda_cyc, lambda_id=c.lambda_id,
        buffer_capacity=c.buffer_capacity,
    )


def build_dsn_state(config: TrainConfig) -> dsn_mod.DsnState:
    c = config.dsn
    return dsn_mod.init_dsn(
        seed=derive_seed(config.seed, "stage", "dsn"),
        base_channels=c.base_channels, disc_channels=c.disc_channels,
        lr=c.lr, beta1=c.beta1, beta2=c.beta2,
        lambda_content=c.lambda_content, lambda_adv=c.lambda_adv,
    )


def build_srn_state(config: TrainConfig) -> srn_mod.SrnState:
    c = config.srn
    return srn_mod.init_srn(
        seed=derive_seed(config.seed, "stage", "srn"),
        base_channels=c.base_channels, residual_blocks=c.residual_blocks,
        disc_channels=c.disc_channels, lr=c.lr, beta1=c.beta1, beta2=c.beta2,
        lambda_pix=c.lambda_pix, lambda_adv=c.lambda_adv,
        use_domain_weights=c.use_domain_weights,
    )


def load_translator_state(config: TrainConfig, path: str) -> tr_mod.TranslatorState:
    state = build_translator_state(config)
    restore_translator(load_checkpoint(path), state)
    return state


def load_dsn_state(config: TrainConfig, path: str) -> dsn_mod.DsnState:
    state = build_dsn_state(config)
    restore_dsn(load_checkpoint(path), state)
    return state


def load_srn_state(config: TrainConfig, path: str) -> srn_mod.SrnState:
    state = build_srn_state(config)
    restore_srn(load_checkpoint(path), state)
    return state


# ---------------------------------------------------------------------------
# loss logs and run manifest

def _append_losses(path: str, record) -> None:
    names = [f.name for f in fields(record)]
    fresh = not os.path.exists(path)
    with open(path, "a", encoding="utf-8") as fh:
        if fresh:
            fh.write(",".join(names) + "\n")
        row = asdict(record)
        fh.write(",".join(
            str(row[n]) if n == "step" else f"{row[n]:.8f}" for n in names) + "\n")


def read_loss_log(path: str) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    cols = {name: np.array([float(r[i]) for r in rows])
            for i, name in enumerate(header)}
    return cols


def append_run_manifest(config: TrainConfig, stage: str, ckpt: str,
                        loss_log: str, wall_time: float) -> str:
    """Append a stage record; re-running a stage drops stale later records."""
    path = os.path.join(config.run_dir, "run_manifest.txt")
    records = read_run_manifest(path) if os.path.exists(path) else []
    order = STAGES.index(stage)
    records = [r for r in records if STAGES.index(r["stage"]) < order]
    records.append({
        "stage": stage,
        "fingerprint": config.fingerprint(),
        "checkpoint": os.path.basename(ckpt),
        "loss_log": os.path.basename(loss_log),
        "wall_time_s": f"{wall_time:.3f}",
    })
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            for key in ("stage", "fingerprint", "checkpoint", "loss_log",
                        "wall_time_s"):
                fh.write(f"{key} = {rec[key]}\n")
            fh.write("\n")
    return path


def read_run_manifest(path: str) -> list[dict[str, str]]:
    records: list[dict[str, str]] = []
    current: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                if current:
                    records.append(current)
                    current = {}
                continue
            key, _, value = line.partition("=")
            current[key.strip()] = value.strip()
    if current:
        records.append(current)
    return records


# ---------------------------------------------------------------------------
# stage loops

def _ingest(config: TrainConfig, sub: str, expected: int = 0) -> DatasetIndex:
    return ingest_folder(os.path.join(config.data.root, sub), sub,
                         expected_count=expected or None)


def _set_lr(bundles: list[NetBundle], base: float, step: int, total: int,
            schedule: str) -> None:
    value = lr_at(base, step, total, schedule)
    for b in bundles:
        b.opt.lr = value


def _run_translator(config: TrainConfig, resume: str | None,
                    log_path: str) -> tr_mod.TranslatorState:
    c = config.translator
    sunny = _ingest(config, "sunny_hr", config.data.expected_sunny)
    rainy = _ingest(config, "rainy_hr", config.data.expected_rainy)
    state = build_translator_state(config)
    if resume:
        restore_translator(load_checkpoint(resume), state)
    total = config.translator_iters(min(len(sunny), len(rainy)))
    stage_seed = derive_seed(config.seed, "stage", "translator")
    s_stream = BatchStream(sunny, c.patch_size, c.batch_size,
                           derive_seed(stage_seed, "sunny"))
    r_stream = BatchStream(rainy, c.patch_size, c.batch_size,
                           derive_seed(stage_seed, "rainy"))
    bundles = [state.g_s2r, state.g_r2s, state.d_rainy, state.d_sunny]
    for step in range(state.step, total):
        _set_lr(bundles, c.lr, step, total, c.lr_schedule)
        try:
            rec = tr_mod.train_step_translator(
                state,
                torch.from_numpy(s_stream.batch(step)),
                torch.from_numpy(r_stream.batch(step)),
            )
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(f"translator step {step + 1}: {exc}") from None
        _append_losses(log_path, rec)
    return state


def _run_dsn(config: TrainConfig, resume: str | None,
             log_path: str) -> dsn_mod.DsnState:
    c = config.dsn
    t_ckpt = stage_paths(config, "translator")[0]
    if not os.path.isfile(t_ckpt):
        raise SequencingError(
            f"dsn stage needs the translator checkpoint at {t_ckpt}; "
            "run `train translator` first"
        )
    t_state = load_translator_state(config, t_ckpt)
    sunny = _ingest(config, "sunny_hr", config.data.expected_sunny)
    real_lr = _ingest(config, "real_lr")
    if c.patch_size % 4:
        raise SequencingError("dsn patch_size must be a multiple of 4")
    state = build_dsn_state(config)
    if resume:
        restore_dsn(load_checkpoint(resume), state)
    stage_seed = derive_seed(config.seed, "stage", "dsn")
    s_stream = BatchStream(sunny, c.patch_size, c.batch_size,
                           derive_seed(stage_seed, "sunny"))
    lr_stream = BatchStream(real_lr, c.patch_size // 4, c.batch_size,
                            derive_seed(stage_seed, "real_lr"))
    bundles = [state.dsn, state.d_lr]
    for step in range(state.step, c.iters):
        _set_lr(bundles, c.lr, step, c.iters, "constant")
        with torch.no_grad():
            rainy_hr = tr_mod.translate_batch(
                t_state, torch.from_numpy(s_stream.batch(step)))
        try:
            rec = dsn_mod.train_step_dsn(
                state, rainy_hr, torch.from_numpy(lr_stream.batch(step)))
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(f"dsn step {step + 1}: {exc}") from None
        _append_losses(log_path, rec)
    return state


def _run_srn(config: TrainConfig, resume: str | None,
             log_path: str) -> srn_mod.SrnState:
    c = config.srn
    t_ckpt = stage_paths(config, "translator")[0]
    d_ckpt = stage_paths(config, "dsn")[0]
    missing = [p for p in (t_ckpt, d_ckpt) if not os.path.isfile(p)]
    if missing:
        raise SequencingError(
            f"srn stage needs prior checkpoints, missing: {', '.join(missing)}"
        )
    t_state = load_translator_state(config, t_ckpt)
    d_state = load_dsn_state(config, d_ckpt)
    sunny = _ingest(config, "sunny_hr", config.data.expected_sunny)
    state = build_srn_state(config)
    if resume:
        restore_srn(load_checkpoint(resume), state)

    translate_fn = lambda img: tr_mod.translate_sunny_to_rainy(t_state, img)
    degrade_fn = lambda img: dsn_mod.degrade(d_state, img)
    weight_fn = None
    if c.use_domain_weights:
        def weight_fn(lr_img):
            from .imaging import to_model_range
            t = torch.from_numpy(to_model_range(lr_img).astype(np.float32))[None]
            d_fwd = lambda x: d_state.d_lr.net(d_state.d_lr.params, x)
            return dsn_mod.domain_distance_weight(d_fwd, t)[0, 0].numpy().astype(np.float64)

    stage_seed = derive_seed(config.seed, "stage", "srn")
    bundles = [state.srn, state.d_hr]
    for step in range(state.step, c.iters):
        _set_lr(bundles, c.lr, step, c.iters, "constant")
        pairs = srn_mod.make_pseudo_pairs(
            translate_fn, degrade_fn, sunny, c.batch_size,
            derive_seed(stage_seed, "pairs", step),
            patch_size=c.patch_size, weight_fn=weight_fn,
        )
        try:
            rec = srn_mod.train_step_srn(state, pairs)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(f"srn step {step + 1}: {exc}") from None
        _append_losses(log_path, rec)
    return state


def run_stage(config: TrainConfig, stage: str,
              resume: str | None = None) -> tuple[str, str]:
    """Execute one training stage to its configured length.

    Returns (checkpoint path, loss log path).  Prerequisite checkpoints are
    enforced; the checkpoint is written atomically at the end and the run
    manifest gains a record.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    ckpt_path, log_path = stage_paths(config, stage)
    started = time.monotonic()
    with run_lock(config.run_dir):
        if stage == "translator":
            state = _run_translator(config, resume, log_path)
            data = translator_to_checkpoint(state, config.fingerprint())
        elif stage == "dsn":
            state = _run_dsn(config, resume, log_path)
            data = dsn_to_checkpoint(state, config.fingerprint())
        else:
            state = _run_srn(config, resume, log_path)
            data = srn_to_checkpoint(state, config.fingerprint())
        save_checkpoint(ckpt_path, data)
        append_run_manifest(config, stage, ckpt_path, log_path,
                            time.monotonic() - started)
    return ckpt_path, log_path


def evaluate_run(config: TrainConfig, out_dir: str | None = None) -> MetricsReport:
    """Score the trained SRN on the paired eval split of the dataset."""
    s_ckpt = stage_paths(config, "srn")[0]
    if not os.path.isfile(s_ckpt):
        raise SequencingError(f"evaluate needs the srn checkpoint at {s_ckpt}")
    state = load_srn_state(config, s_ckpt)
    manifest = read_manifest(os.path.join(config.data.root, "manifest.txt"))
    sr_fn = lambda lr: srn_mod.super_resolve(state, lr)
    return evaluate_pipeline(
        sr_fn, config.data.root, manifest.eval_triplets(),
        out_dir or os.path.join(config.run_dir, "report"),
        fingerprint=config.fingerprint(),
    )
