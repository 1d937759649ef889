"""Experiment orchestration: configs, file formats, and subcommands.

Artifacts are flat binary tensor files (16-byte magic, u32 version, u32 rank,
u64 extents, little-endian float64 payload) with JSON sidecars; metrics are
UTF-8 CSV with ``\\n`` line endings and a mandatory header. Every output
embeds the digest of the config that produced it, and any command run twice
with the same config and seed produces byte-identical files. Wall-clock
timing is therefore excluded from the metrics CSV unless
``io.deterministic_timing`` is switched off.

Subcommands: ``gen-data``, ``train``, ``sample``, ``reconstruct``, ``eval``,
``inspect``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import struct
import sys
from pathlib import Path

import numpy as np

from .diffusion import (
    DiffusionSchedule,
    ddim_sample,
    ddpm_sample,
    linear_schedule,
    reconstruct,
    t_min_for_noise_var,
    zero_filled,
)
from .evaluation import (
    GaussianPosteriorDenoiser,
    TwoDeltasPosteriorDenoiser,
    denoising_mse_sweep,
    distribution_distance,
    generalization_psnr,
    independence_demo,
    uncertainty_map,
)
from .losses import LossConfig
from .model import Denoiser
from .operators import (
    DegradationFamily,
    FixedMask,
    IdentityTransform,
    LineSubsampleMasks,
    Measurement,
    PatchDropMasks,
    RealDFTTransform,
    SingleDropMasks,
    corrupt,
)
from .training import TrainConfig, derived_rng, precompute, train

__all__ = [
    "Checkpoint",
    "ConfigError",
    "FormatError",
    "build_degradation_family",
    "build_model",
    "build_schedule",
    "cmd_eval",
    "cmd_gen_data",
    "cmd_reconstruct",
    "cmd_sample",
    "cmd_train",
    "config_digest",
    "generate_signals",
    "load_checkpoint",
    "load_config",
    "main",
    "read_tensor_file",
    "save_checkpoint",
    "validate_config",
    "write_pgm",
    "write_tensor_file",
]

TENSOR_MAGIC = b"SPECDIFF-TENSOR\x00"
CHECKPOINT_MAGIC = b"SPECDIFF-CKPT\x00\x00\x00"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed or future-versioned artifact file."""


class ConfigError(ValueError):
    """Config fails schema validation."""


# -- binary tensor files ------------------------------------------------------


def write_tensor_file(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype("<f8").tobytes())


def read_tensor_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:16] != TENSOR_MAGIC:
        raise FormatError(f"{path}: not a tensor file")
    version, rank = struct.unpack_from("<II", raw, 16)
    if version > FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version} is newer than supported")
    offset = 24
    if len(raw) < offset + 8 * rank:
        raise FormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q", raw, offset)
    offset += 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(raw) != offset + 8 * count:
        raise FormatError(f"{path}: payload size does not match extents")
    data = np.frombuffer(raw, dtype="<f8", offset=offset, count=count)
    return data.reshape(shape).copy()


def write_pgm(path, image: np.ndarray) -> None:
    """Portable graymap (P2) of one 2-D array, min-max normalized."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("PGM conversion needs a 2-D array")
    lo, hi = image.min(), image.max()
    scaled = np.zeros_like(image) if hi == lo else (image - lo) / (hi - lo)
    pixels = np.rint(scaled * 255).astype(int)
    lines = ["P2", f"{image.shape[1]} {image.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in pixels]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_csv(path, header: list[str], rows: list[tuple]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


# -- config schema -------------------------------------------------------------

_SCHEMA = {
    "data": {
        "kind": (str, None),
        "count": (int, None),
        "seed": (int, None),
        "dim": (int, 2),
        "prior_var": (float, 1.0),
        "height": (int, 16),
        "width": (int, 16),
        "path": (str, ""),
        "holdout": (int, 0),
    },
    "degradation": {
        "family": (str, "none"),
        "p": (float, 0.2),
        "patch": (int, 4),
        "accel": (int, 4),
        "sigma0": (float, 0.0),
        "s_const": (float, 1.0),
    },
    "schedule": {
        "T": (int, 1000),
        "beta1": ((int, float, str), "sigma0_squared"),
        "betaT": (float, 0.2),
    },
    "model": {
        "hidden": (list, [256, 256, 256]),
        "emb_dim": (int, 32),
        "mean_type": (str, "predict_x"),
        "ema_decay": (float, 0.999),
        "nonlin": (str, "tanh"),
        "seed": (int, 0),
    },
    "train": {
        "iterations": (int, 0),
        "batch_size": (int, 32),
        "learning_rate": (float, 1e-3),
        "seed": (int, None),
        "oracle_mode": (bool, False),
        "log_interval": (int, 50),
        "chunk_size": (int, 16),
        "threads": (int, 1),
        "loss": (dict, {}),
    },
    "loss": {  # nested under train.loss
        "gamma": (str, "constant"),
        "lambda": (str, "constant"),
        "lambda_coef": (float, 1e-4),
        "use_ybar_variant": (bool, True),
        "probes": (int, 1),
        "probe_kind": (str, "gaussian"),
    },
    "eval": {
        "operations": (list, []),
        "seed": (int, 1234),
        "count": (int, 256),
        "ts": (list, []),
        "t_stride": (int, 100),
        "snr_levels": (list, [0.001, 10.0]),
        "n_samples": (int, 10000),
        "n_permutations": (int, 200),
        "n_projections": (int, 256),
        "uncertainty_k": (int, 8),
        "uncertainty_sigma0": (float, 0.4),
        "steps": (int, 100),
        "eta": (float, 0.0),
        "peak": (float, 1.0),
    },
    "io": {
        "out_dir": (str, "out"),
        "data_dir": (str, ""),
        "deterministic_timing": (bool, True),
    },
}

_REQUIRED = {"data": ("kind", "count", "seed"), "train": ("seed",)}

DATA_KINDS = ("two-deltas", "isotropic-gaussian", "synthetic-shapes", "external-binary")
FAMILY_KINDS = ("none", "patch-drop", "line-subsample", "single-drop")


def _check_section(name: str, section: dict, required: tuple) -> dict:
    table = _SCHEMA[name]
    unknown = set(section) - set(table)
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
    for key in required:
        if key not in section:
            raise ConfigError(f"{name}: missing required key {key!r}")
    out = {}
    for key, (types, default) in table.items():
        if key in section:
            value = section[key]
            ok_types = types if isinstance(types, tuple) else (types,)
            if bool not in ok_types and isinstance(value, bool):
                raise ConfigError(f"{name}.{key}: expected {types}, got bool")
            if float in ok_types and int not in ok_types and isinstance(value, int):
                value = float(value)
            if not isinstance(value, ok_types):
                raise ConfigError(f"{name}.{key}: expected {types}, got {type(value).__name__}")
            out[key] = value
        else:
            out[key] = default
    return out


def validate_config(raw: dict) -> dict:
    """Schema-check a config document; unknown keys are rejected."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - {k for k in _SCHEMA if k != "loss"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    cfg = {}
    for name in ("data", "degradation", "schedule", "model", "train", "eval", "io"):
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"{name} must be an object")
        cfg[name] = _check_section(name, section, _REQUIRED.get(name, ()))
    cfg["train"]["loss"] = _check_section("loss", cfg["train"]["loss"], ())
    if cfg["data"]["kind"] not in DATA_KINDS:
        raise ConfigError(f"data.kind must be one of {DATA_KINDS}")
    if cfg["degradation"]["family"] not in FAMILY_KINDS:
        raise ConfigError(f"degradation.family must be one of {FAMILY_KINDS}")
    return cfg


def load_config(path) -> dict:
    return validate_config(json.loads(Path(path).read_text(encoding="utf-8")))


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


# -- experiment assembly --------------------------------------------------------


def generate_signals(data_cfg: dict, count: int, seed: int) -> np.ndarray:
    """Clean signal rows for the configured distribution."""
    kind = data_cfg["kind"]
    rng = derived_rng(seed, 0)
    if kind == "two-deltas":
        signs = rng.integers(0, 2, size=count) * 2 - 1
        return np.outer(signs, np.ones(2))
    if kind == "isotropic-gaussian":
        return np.sqrt(data_cfg["prior_var"]) * rng.standard_normal(
            (count, data_cfg["dim"]))
    if kind == "synthetic-shapes":
        return _shapes(count, data_cfg["height"], data_cfg["width"], rng)
    arr = read_tensor_file(data_cfg["path"])
    if arr.ndim != 2 or arr.shape[0] < count:
        raise ConfigError("external-binary file must hold at least `count` rows")
    return arr[:count]


def _shapes(count: int, h: int, w: int, rng) -> np.ndarray:
    """Random axis-aligned rectangles and discs on a small grid, values in [0, 1]."""
    out = np.zeros((count, h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    for i in range(count):
        for _ in range(rng.integers(1, 4)):
            intensity = rng.uniform(0.4, 1.0)
            if rng.random() < 0.5:
                y0 = rng.integers(0, h - 2)
                x0 = rng.integers(0, w - 2)
                y1 = rng.integers(y0 + 2, min(h, y0 + h // 2) + 1)
                x1 = rng.integers(x0 + 2, min(w, x0 + w // 2) + 1)
                patch = np.zeros((h, w))
                patch[y0:y1, x0:x1] = intensity
            else:
                cy = rng.uniform(2, h - 2)
                cx = rng.uniform(2, w - 2)
                r = rng.uniform(1.5, min(h, w) / 4)
                patch = intensity * ((yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2)
            out[i] = np.maximum(out[i], patch)
    return out.reshape(count, h * w)


def _signal_dim(cfg: dict) -> int:
    kind = cfg["data"]["kind"]
    if kind == "two-deltas":
        return 2
    if kind == "isotropic-gaussian":
        return cfg["data"]["dim"]
    if kind == "synthetic-shapes":
        return cfg["data"]["height"] * cfg["data"]["width"]
    return read_tensor_file(cfg["data"]["path"]).shape[1]


def build_degradation_family(cfg: dict) -> DegradationFamily:
    deg = cfg["degradation"]
    n = _signal_dim(cfg)
    family = deg["family"]
    if family == "patch-drop":
        if cfg["data"]["kind"] == "synthetic-shapes":
            grid = (cfg["data"]["height"], cfg["data"]["width"])
        else:
            grid = (1, n)  # flat signals: patches tile a single row
        masks = PatchDropMasks(grid[0], grid[1], deg["patch"], deg["p"])
        vt = IdentityTransform(n)
    elif family == "line-subsample":
        if n % 2:
            raise ConfigError("line-subsample needs an even signal dimension "
                              "(real/imaginary channel pairs)")
        masks = LineSubsampleMasks(lines=n // 2, accel=deg["accel"])
        vt = RealDFTTransform(n // 2)
    elif family == "single-drop":
        masks = SingleDropMasks(n)
        vt = IdentityTransform(n)
    else:
        masks = FixedMask(np.ones(n, dtype=bool))
        vt = IdentityTransform(n)
    return DegradationFamily(vt, masks, deg["sigma0"], s_const=deg["s_const"])


def build_schedule(cfg: dict) -> DiffusionSchedule:
    sched = cfg["schedule"]
    beta1 = sched["beta1"]
    if beta1 == "sigma0_squared":
        beta1 = max(cfg["degradation"]["sigma0"] ** 2, 1e-5)
    elif isinstance(beta1, str):
        raise ConfigError(f"schedule.beta1: unknown rule {beta1!r}")
    return linear_schedule(sched["T"], float(beta1), sched["betaT"])


def build_model(cfg: dict, n: int) -> Denoiser:
    m = cfg["model"]
    return Denoiser.create(n, hidden=tuple(m["hidden"]), emb_dim=m["emb_dim"],
                           mean_type=m["mean_type"], ema_decay=m["ema_decay"],
                           rng=derived_rng(m["seed"], 77), nonlin=m["nonlin"])


def build_train_config(cfg: dict, seed_override: int | None = None) -> TrainConfig:
    t = cfg["train"]
    loss = t["loss"]
    loss_cfg = LossConfig(gamma=loss["gamma"], lam=loss["lambda"],
                          lam_coef=loss["lambda_coef"],
                          use_ybar_variant=loss["use_ybar_variant"],
                          probes=loss["probes"], probe_kind=loss["probe_kind"])
    return TrainConfig(iterations=t["iterations"], batch_size=t["batch_size"],
                       learning_rate=t["learning_rate"],
                       seed=t["seed"] if seed_override is None else seed_override,
                       loss=loss_cfg, oracle_mode=t["oracle_mode"],
                       log_interval=t["log_interval"], chunk_size=t["chunk_size"],
                       threads=t["threads"])


def _vt_from_descriptor(desc: dict):
    if desc["kind"] == "identity":
        return IdentityTransform(desc["n"])
    if desc["kind"] == "real_dft":
        return RealDFTTransform(desc["lines"])
    if desc["kind"] == "permutation":
        from .operators import PermutationTransform

        return PermutationTransform(desc["perm"])
    raise FormatError(f"transform kind {desc['kind']!r} cannot be rebuilt "
                      "from its descriptor")


# -- checkpoints -----------------------------------------------------------------


class Checkpoint:
    """Serialized training outcome: parameters, shadow parameters, provenance."""

    def __init__(self, arch: dict, params: np.ndarray, ema_params: np.ndarray,
                 step_count: int, config_digest: str, schedule: dict,
                 vt_descriptor: dict):
        self.arch = arch
        self.params = np.asarray(params, dtype=np.float64)
        self.ema_params = np.asarray(ema_params, dtype=np.float64)
        self.step_count = int(step_count)
        self.config_digest = config_digest
        self.schedule = schedule
        self.vt_descriptor = vt_descriptor

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "arch": self.arch,
            "step_count": self.step_count,
            "config_digest": self.config_digest,
            "schedule": self.schedule,
            "schedule_digest": hashlib.sha256(
                json.dumps(self.schedule, sort_keys=True).encode()).hexdigest(),
            "vt": self.vt_descriptor,
            "param_count": int(self.params.size),
        }

    def model(self) -> Denoiser:
        return Denoiser.from_arch(self.arch, self.params, self.ema_params)

    def rebuild_schedule(self) -> DiffusionSchedule:
        import dataclasses

        sched = linear_schedule(self.schedule["T"], self.schedule["beta1"],
                                self.schedule["betaT"])
        return dataclasses.replace(sched, t_min_valid=self.schedule["t_min_valid"])

    def __eq__(self, other):
        return (isinstance(other, Checkpoint)
                and self.header() == other.header()
                and np.array_equal(self.params, other.params)
                and np.array_equal(self.ema_params, other.ema_params))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = json.dumps(ckpt.header(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(ckpt.params.astype("<f8").tobytes())
        fh.write(ckpt.ema_params.astype("<f8").tobytes())


def load_checkpoint(path, expect_config_digest: str | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:16] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack_from("<II", raw, 16)
    if version > FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version} is newer than supported")
    header = json.loads(raw[24:24 + header_len].decode("utf-8"))
    count = header["param_count"]
    offset = 24 + header_len
    if len(raw) != offset + 16 * count:
        raise FormatError(f"{path}: parameter payload size mismatch")
    params = np.frombuffer(raw, dtype="<f8", offset=offset, count=count).copy()
    ema = np.frombuffer(raw, dtype="<f8", offset=offset + 8 * count,
                        count=count).copy()
    if expect_config_digest is not None and header["config_digest"] != expect_config_digest:
        raise FormatError(f"{path}: config digest mismatch")
    return Checkpoint(arch=header["arch"], params=params, ema_params=ema,
                      step_count=header["step_count"],
                      config_digest=header["config_digest"],
                      schedule=header["schedule"], vt_descriptor=header["vt"])


# -- commands ---------------------------------------------------------------------


def _out_dir(cfg: dict, out: str | None) -> Path:
    path = Path(out if out is not None else cfg["io"]["out_dir"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_gen_data(cfg: dict, out: str | None = None,
                 seed_override: int | None = None) -> Path:
    """Write clean signals and precomputed measurements with a JSON sidecar."""
    out_path = _out_dir(cfg, out)
    seed = cfg["data"]["seed"] if seed_override is None else seed_override
    count = cfg["data"]["count"]
    family = build_degradation_family(cfg)
    signals = generate_signals(cfg["data"], count + cfg["data"]["holdout"], seed)
    clean, holdout = signals[:count], signals[count:]
    data = precompute(clean, family, seed=seed)
    write_tensor_file(out_path / "clean.bin", clean)
    write_tensor_file(out_path / "ybar.bin", data.ybar)
    write_tensor_file(out_path / "masks.bin", data.masks.astype(np.float64))
    if cfg["data"]["holdout"]:
        write_tensor_file(out_path / "holdout.bin", holdout)
    _write_json(out_path / "dataset.json", {
        "format_version": FORMAT_VERSION,
        "config_digest": config_digest(cfg),
        "kind": cfg["data"]["kind"],
        "count": count,
        "holdout": cfg["data"]["holdout"],
        "n": family.n,
        "sigma0": family.sigma0,
        "s_const": family.s_const,
        "seed": seed,
        "vt": family.vt.descriptor(),
    })
    return out_path


def _load_dataset_dir(path: Path):
    meta = json.loads((path / "dataset.json").read_text(encoding="utf-8"))
    if meta["format_version"] > FORMAT_VERSION:
        raise FormatError("dataset format is newer than supported")
    ybar = read_tensor_file(path / "ybar.bin")
    masks = read_tensor_file(path / "masks.bin").astype(bool)
    clean_path = path / "clean.bin"
    clean = read_tensor_file(clean_path) if clean_path.exists() else None
    return meta, ybar, masks, clean


def _dataset_from_config(cfg: dict):
    """Measurements for training: from io.data_dir when set, else simulated."""
    from .training import PrecomputedDataset

    family = build_degradation_family(cfg)
    data_dir = cfg["io"]["data_dir"]
    if data_dir:
        meta, ybar, masks, clean = _load_dataset_dir(Path(data_dir))
        if meta["n"] != family.n or meta["vt"] != family.vt.descriptor():
            raise ConfigError("dataset directory does not match the configured "
                              "degradation family")
        nv = masks * (meta["sigma0"] / meta["s_const"]) ** 2
        clean_xbar = family.vt.apply(clean) if clean is not None else None
        return PrecomputedDataset(
            ybar=ybar, masks=masks, noise_var=nv, sigma0=meta["sigma0"],
            w=family.weights(), vt_descriptor=family.vt.descriptor(),
            clean_xbar=clean_xbar,
        ), family
    signals = generate_signals(cfg["data"], cfg["data"]["count"],
                               cfg["data"]["seed"])
    return precompute(signals, family, seed=cfg["data"]["seed"]), family


def cmd_train(cfg: dict, out: str | None = None,
              seed_override: int | None = None) -> Path:
    """Precompute measurements, run the training loop, persist the outcome."""
    out_path = _out_dir(cfg, out)
    data, family = _dataset_from_config(cfg)
    schedule = build_schedule(cfg)
    model = build_model(cfg, family.n)
    train_cfg = build_train_config(cfg, seed_override)
    measure = not cfg["io"]["deterministic_timing"]
    result = train(model, train_cfg, data, schedule, measure_time=measure)

    digest = config_digest(cfg)
    sched_meta = {
        "T": schedule.T,
        "beta1": float(schedule.betas[0]),
        "betaT": float(schedule.betas[-1]),
        "t_min_valid": result.t_min_valid,
    }
    ckpt = Checkpoint(arch=model.arch(), params=model.params,
                      ema_params=model.ema_params, step_count=result.steps,
                      config_digest=digest, schedule=sched_meta,
                      vt_descriptor=family.vt.descriptor())
    save_checkpoint(out_path / "checkpoint.bin", ckpt)
    write_csv(out_path / "metrics.csv",
              ["step", "loss", "divergence_term", "grad_norm", "wall_ms"],
              [(r.step, r.loss, r.divergence_term, r.grad_norm, r.wall_ms)
               for r in result.metrics])
    _write_json(out_path / "run.json", {
        "config_digest": digest,
        "steps": result.steps,
        "t_min_valid": result.t_min_valid,
    })
    return out_path


def cmd_sample(checkpoint_path, out: str | None, sampler: str, steps: int,
               count: int, seed: int, eta: float = 0.0,
               chunk: int = 64) -> Path:
    """Generate samples from a checkpoint; chunks use derived seeds."""
    ckpt = load_checkpoint(checkpoint_path)
    model = ckpt.model()
    schedule = ckpt.rebuild_schedule()
    vt = _vt_from_descriptor(ckpt.vt_descriptor)
    out_path = Path(out if out is not None else "samples")
    out_path.mkdir(parents=True, exist_ok=True)
    if sampler not in ("ddim", "ddpm"):
        raise ValueError("sampler must be 'ddim' or 'ddpm'")
    blocks = []
    for ci, lo in enumerate(range(0, count, chunk)):
        size = min(chunk, count - lo)
        rng = derived_rng(seed, ci)
        if sampler == "ddim":
            blocks.append(ddim_sample(model, schedule, steps, eta, rng, vt,
                                      count=size))
        else:
            blocks.append(ddpm_sample(model, schedule, rng, vt, count=size))
    samples = np.concatenate(blocks) if blocks else np.zeros((0, vt.n))
    write_tensor_file(out_path / "samples.bin", samples)
    _write_json(out_path / "samples.json", {
        "format_version": FORMAT_VERSION,
        "config_digest": ckpt.config_digest,
        "sampler": sampler,
        "steps": steps,
        "eta": eta,
        "count": count,
        "seed": seed,
    })
    return out_path


def cmd_reconstruct(checkpoint_path, measurements_dir, out: str | None,
                    steps: int, seed: int, eta: float = 0.0,
                    limit: int | None = None, r_sweep: list[int] | None = None,
                    clean_path=None) -> Path:
    """Reconstruct stored measurements; optionally sweep acceleration factors."""
    ckpt = load_checkpoint(checkpoint_path)
    model = ckpt.model()
    schedule = ckpt.rebuild_schedule()
    vt = _vt_from_descriptor(ckpt.vt_descriptor)
    out_path = Path(out if out is not None else "recon")
    out_path.mkdir(parents=True, exist_ok=True)

    if r_sweep:
        if clean_path is None:
            raise ValueError("an acceleration sweep needs clean signals")
        clean = read_tensor_file(clean_path)
        rows = []
        for r in r_sweep:
            fam = DegradationFamily(vt, LineSubsampleMasks(lines=vt.n // 2,
                                                           accel=r),
                                    sigma0=0.01)
            resid = 0.0
            count = min(len(clean), 8)
            for i in range(count):
                rng = derived_rng(seed, r, i)
                m = corrupt(clean[i], fam.sample(rng), rng)
                rec = reconstruct(model, schedule, m, steps,
                                  derived_rng(seed, r, i, 1), vt, eta=eta)
                resid += float(np.linalg.norm(rec - clean[i]))
            rows.append((r, resid / count, bool(np.isfinite(resid))))
        write_csv(out_path / "rsweep.csv", ["accel", "residual_norm", "finite"], rows)
        return out_path

    meta, ybar, masks, _ = _load_dataset_dir(Path(measurements_dir))
    nv_scale = (meta["sigma0"] / meta["s_const"]) ** 2
    count = len(ybar) if limit is None else min(limit, len(ybar))
    recons = np.empty((count, vt.n))
    zf = np.empty((count, vt.n))
    for i in range(count):
        m = Measurement(ybar=ybar[i], mask=masks[i], sigma0=meta["sigma0"],
                        noise_var=masks[i] * nv_scale)
        zf[i] = zero_filled(m, vt)
        recons[i] = reconstruct(model, schedule, m, steps, derived_rng(seed, i),
                                vt, eta=eta)
    write_tensor_file(out_path / "recon.bin", recons)
    write_tensor_file(out_path / "zero_filled.bin", zf)
    _write_json(out_path / "recon.json", {
        "format_version": FORMAT_VERSION,
        "config_digest": ckpt.config_digest,
        "steps": steps,
        "eta": eta,
        "seed": seed,
        "count": count,
    })
    return out_path


def _eval_ts(cfg: dict, schedule: DiffusionSchedule, t_min: int) -> list[int]:
    ts = [int(t) for t in cfg["eval"]["ts"]]
    if not ts:
        ts = list(range(t_min, schedule.T + 1, cfg["eval"]["t_stride"]))
        if ts[-1] != schedule.T:
            ts.append(schedule.T)
    return ts


def cmd_eval(cfg: dict, out: str | None = None, checkpoint=None,
             checkpoint_b=None, samples_a=None, samples_b=None) -> Path:
    """Run the configured evaluation operations, one CSV per operation."""
    out_path = _out_dir(cfg, out)
    ops = cfg["eval"]["operations"]
    seed = cfg["eval"]["seed"]

    def _models():
        ca = load_checkpoint(checkpoint)
        cb = load_checkpoint(checkpoint_b)
        return ca, cb, ca.model(), cb.model()

    for op in ops:
        if op == "mse_sweep":
            ca, cb, ma, mb = _models()
            schedule = ca.rebuild_schedule()
            clean = generate_signals(cfg["data"], cfg["eval"]["count"], seed)
            family = build_degradation_family(cfg)
            xbar = family.vt.apply(clean)
            ts = _eval_ts(cfg, schedule, ca.schedule["t_min_valid"])
            res = denoising_mse_sweep(ma, mb, xbar, schedule, ts,
                                      derived_rng(seed, 1))
            write_csv(out_path / "mse_sweep.csv", ["t", "mse_a", "mse_b"], res.rows)
        elif op == "generalization_psnr":
            ca, cb, ma, mb = _models()
            schedule = ca.rebuild_schedule()
            clean = generate_signals(cfg["data"], cfg["eval"]["count"], seed)
            family = build_degradation_family(cfg)
            xbar = family.vt.apply(clean)
            ts = _eval_ts(cfg, schedule, ca.schedule["t_min_valid"])
            rows = generalization_psnr(ma, mb, xbar, schedule, ts,
                                       derived_rng(seed, 2),
                                       peak=cfg["eval"]["peak"])
            write_csv(out_path / "psnr.csv", ["t", "psnr"], rows)
        elif op == "independence_demo":
            rows = []
            for prior, model in (("isotropic-gaussian", GaussianPosteriorDenoiser()),
                                 ("two-deltas", TwoDeltasPosteriorDenoiser())):
                recs = independence_demo(prior, model, cfg["eval"]["snr_levels"],
                                         cfg["eval"]["n_samples"],
                                         derived_rng(seed, 3),
                                         n_permutations=cfg["eval"]["n_permutations"])
                rows += [(prior, r.snr, r.abar, r.energy, r.z, r.null_mean,
                          r.null_sd) for r in recs]
            write_csv(out_path / "independence.csv",
                      ["prior", "snr", "abar", "energy", "z", "null_mean", "null_sd"],
                      rows)
        elif op == "distribution_distance":
            a = read_tensor_file(samples_a)
            b = read_tensor_file(samples_b)
            res = distribution_distance(a, b, cfg["eval"]["n_projections"],
                                        derived_rng(seed, 4))
            write_csv(out_path / "distance.csv",
                      ["sliced_wasserstein", "mean_gap", "cov_gap"],
                      [(res.sliced_wasserstein, res.mean_gap, res.cov_gap)])
        elif op == "uncertainty":
            ca = load_checkpoint(checkpoint)
            model = ca.model()
            schedule = ca.rebuild_schedule()
            vt = _vt_from_descriptor(ca.vt_descriptor)
            clean = generate_signals(cfg["data"], 1, seed)[0]
            sigma0 = cfg["eval"]["uncertainty_sigma0"]
            fam = DegradationFamily(vt, FixedMask(np.ones(vt.n, dtype=bool)),
                                    sigma0)
            rng = derived_rng(seed, 5)
            m = corrupt(clean, fam.sample(rng), rng)
            t_min = t_min_for_noise_var(schedule, fam.worst_noise_var())
            import dataclasses

            sched = dataclasses.replace(schedule,
                                        t_min_valid=max(t_min,
                                                        schedule.t_min_valid))
            mean, std = uncertainty_map(model, sched, m,
                                        cfg["eval"]["uncertainty_k"],
                                        rng=derived_rng(seed, 6), vt=vt,
                                        steps=cfg["eval"]["steps"],
                                        eta=max(cfg["eval"]["eta"], 0.5))
            write_tensor_file(out_path / "uncertainty_mean.bin", mean)
            write_tensor_file(out_path / "uncertainty_std.bin", std)
        else:
            raise ConfigError(f"unknown eval operation {op!r}")
    return out_path


def cmd_inspect(path, pgm=None, index: int = 0, height: int | None = None,
                width: int | None = None, stream=None) -> None:
    """Describe an artifact file; optionally dump one record as a graymap."""
    stream = stream or sys.stdout
    path = Path(path)
    if path.suffix == ".json":
        print(path.read_text(encoding="utf-8").strip(), file=stream)
        return
    arr = read_tensor_file(path)
    print(f"{path}: shape={arr.shape} dtype=float64 "
          f"min={arr.min(initial=np.inf):.6g} max={arr.max(initial=-np.inf):.6g}",
          file=stream)
    if pgm is not None:
        record = arr[index] if arr.ndim == 2 else arr
        if height is None or width is None:
            side = int(np.sqrt(record.size))
            if side * side != record.size:
                raise ValueError("record is not square; pass height and width")
            height = width = side
        write_pgm(pgm, record.reshape(height, width))


# -- argument parsing ---------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specdiff",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")

    p = sub.add_parser("gen-data", help="write clean signals and measurements")
    add_common(p)

    p = sub.add_parser("train", help="train a model per the config")
    add_common(p)

    p = sub.add_parser("sample", help="generate samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--sampler", choices=["ddim", "ddpm"], default="ddim")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--eta", type=float, default=0.0)

    p = sub.add_parser("reconstruct", help="reconstruct stored measurements")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--measurements", default=None, help="gen-data output directory")
    p.add_argument("--out", default=None)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--r-sweep", default=None,
                   help="comma-separated acceleration factors")
    p.add_argument("--clean", default=None, help="clean signals for the sweep")

    p = sub.add_parser("eval", help="run configured evaluation operations")
    add_common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--checkpoint-b", default=None)
    p.add_argument("--samples-a", default=None)
    p.add_argument("--samples-b", default=None)

    p = sub.add_parser("inspect", help="describe an artifact file")
    p.add_argument("path")
    p.add_argument("--pgm", default=None)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "gen-data":
        cmd_gen_data(load_config(args.config), args.out, args.seed)
    elif args.command == "train":
        cmd_train(load_config(args.config), args.out, args.seed)
    elif args.command == "sample":
        cmd_sample(args.checkpoint, args.out, args.sampler, args.steps,
                   args.count, args.seed, eta=args.eta)
    elif args.command == "reconstruct":
        sweep = [int(r) for r in args.r_sweep.split(",")] if args.r_sweep else None
        cmd_reconstruct(args.checkpoint, args.measurements, args.out, args.steps,
                        args.seed, eta=args.eta, limit=args.limit,
                        r_sweep=sweep, clean_path=args.clean)
    elif args.command == "eval":
        cmd_eval(load_config(args.config), args.out, checkpoint=args.checkpoint,
                 checkpoint_b=args.checkpoint_b, samples_a=args.samples_a,
                 samples_b=args.samples_b)
    elif args.command == "inspect":
        cmd_inspect(args.path, pgm=args.pgm, index=args.index,
                    height=args.height, width=args.width)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
