"""Measurement precompute, the stochastic training loop, and Adam.

The whole trajectory is a pure function of (config, data): every random draw
comes from a generator derived from the config seed and a structural key
(step index, purpose, chunk index), and batches are evaluated in fixed-size
chunks whose gradients are reduced in chunk order. Chunks may be evaluated by
a thread pool; because the chunking is a function of the batch size alone and
the reduction order is fixed, results are bit-identical across thread counts.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError
from .diffusion import DiffusionSchedule, perturb_batch, t_min_for_noise_var
from .losses import LossConfig, gsure_loss_from_samples, supervised_loss_from_samples
from .model import Denoiser
from .operators import (
    DegradationFamily,
    Measurement,
    corrupt,
    expected_projection,
    weight_matrix,
)

__all__ = [
    "AdamState",
    "MetricsRow",
    "PrecomputedDataset",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "adam_step",
    "derived_rng",
    "merge_datasets",
    "precompute",
    "precompute_measurements",
    "train",
]


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries the failing step index."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


def derived_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator tied to (seed, structural key); independent of call order."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


@dataclass
class AdamState:
    """First/second moment accumulators for one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def for_params(cls, params: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(params), v=np.zeros_like(params))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("params, grads and state must share one shape")
    state.step += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grads
    state.v *= beta2
    state.v += (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    params -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass(frozen=True)
class TrainConfig:
    """Training-loop hyperparameters. The seed is mandatory: there is no
    entropy-source fallback anywhere in the loop."""

    iterations: int
    batch_size: int
    learning_rate: float
    seed: int
    loss: LossConfig = field(default_factory=LossConfig.faces)
    oracle_mode: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    log_interval: int = 50
    chunk_size: int = 16
    threads: int = 1

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("iterations >= 0, batch_size >= 1, learning_rate > 0")
        if self.chunk_size < 1 or self.threads < 1 or self.log_interval < 1:
            raise ValueError("chunk_size, threads and log_interval must be >= 1")


@dataclass(frozen=True)
class PrecomputedDataset:
    """Transformed measurements sharing one orthogonal transform.

    Rows of ``ybar``/``masks``/``noise_var`` are the records; ``w`` is the
    balancing weight vector derived from the mask distribution. Clean spectral
    signals are retained only in simulation mode (oracle training needs them).
    """

    ybar: np.ndarray
    masks: np.ndarray
    noise_var: np.ndarray
    sigma0: float
    w: np.ndarray
    vt_descriptor: dict
    clean_xbar: np.ndarray | None = None

    def __post_init__(self):
        if not (self.ybar.shape == self.masks.shape == self.noise_var.shape):
            raise ValueError("ybar, masks and noise_var must have equal shapes")
        if self.w.shape != (self.ybar.shape[1],):
            raise ValueError("w must be one weight per spectral coordinate")
        if self.clean_xbar is not None and self.clean_xbar.shape != self.ybar.shape:
            raise ValueError("clean_xbar must align with ybar")

    def __len__(self) -> int:
        return self.ybar.shape[0]

    @property
    def n(self) -> int:
        return self.ybar.shape[1]

    def worst_noise_var(self) -> float:
        return float(self.noise_var.max(initial=0.0))

    def measurement(self, i: int) -> Measurement:
        return Measurement(ybar=self.ybar[i], mask=self.masks[i],
                           sigma0=self.sigma0, noise_var=self.noise_var[i])


def precompute(signals: np.ndarray, family: DegradationFamily,
               seed: int) -> PrecomputedDataset:
    """Simulation mode: corrupt clean signals record by record.

    Record ``i`` consumes the generator derived from ``(seed, i)``, so the
    dataset is reproducible and independent of iteration order.
    """
    signals = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    count = signals.shape[0]
    n = family.n
    if signals.shape[1] != n:
        raise ValueError(f"signals have dimension {signals.shape[1]}, family {n}")
    ybar = np.empty((count, n))
    masks = np.empty((count, n), dtype=bool)
    noise_var = np.empty((count, n))
    for i in range(count):
        rng = derived_rng(seed, i)
        deg = family.sample(rng)
        m = corrupt(signals[i], deg, rng)
        ybar[i] = m.ybar
        masks[i] = m.mask
        noise_var[i] = m.noise_var
    clean = family.vt.apply(signals) if count else np.zeros((0, n))
    return PrecomputedDataset(ybar=ybar, masks=masks, noise_var=noise_var,
                              sigma0=family.sigma0, w=family.weights(),
                              vt_descriptor=family.vt.descriptor(),
                              clean_xbar=clean)


def precompute_measurements(measurements: list[Measurement], vt,
                            mask_dist=None) -> PrecomputedDataset:
    """Ingestion mode: store supplied measurements verbatim.

    Weights come from the declared mask distribution when given, otherwise
    from the empirical mask frequencies (which must be entrywise positive).
    """
    if not measurements:
        raise ValueError("ingestion requires at least one measurement")
    n = measurements[0].n
    sigma0 = measurements[0].sigma0
    for m in measurements:
        if m.n != n:
            raise ValueError("measurements have mixed dimensions")
        if m.sigma0 != sigma0:
            raise ValueError("measurements have mixed noise levels")
    if vt.n != n:
        raise ValueError("transform dimension does not match measurements")
    masks = np.stack([m.mask for m in measurements])
    if mask_dist is not None:
        ep = expected_projection(mask_dist)
    else:
        ep = masks.mean(axis=0)
        if np.any(ep <= 0.0):
            raise ValueError("empirical E[P] has a zero entry")
    return PrecomputedDataset(
        ybar=np.stack([m.ybar for m in measurements]),
        masks=masks,
        noise_var=np.stack([m.noise_var for m in measurements]),
        sigma0=sigma0,
        w=weight_matrix(ep),
        vt_descriptor=vt.descriptor(),
    )


def merge_datasets(a: PrecomputedDataset, b: PrecomputedDataset) -> PrecomputedDataset:
    """Concatenate datasets; refuses records from a different transform."""
    if a.vt_descriptor != b.vt_descriptor:
        raise ValueError("datasets come from different transforms; mixing is undefined")
    if a.sigma0 != b.sigma0:
        raise ValueError("datasets have different noise levels")
    clean = None
    if a.clean_xbar is not None and b.clean_xbar is not None:
        clean = np.concatenate([a.clean_xbar, b.clean_xbar])
    return PrecomputedDataset(
        ybar=np.concatenate([a.ybar, b.ybar]),
        masks=np.concatenate([a.masks, b.masks]),
        noise_var=np.concatenate([a.noise_var, b.noise_var]),
        sigma0=a.sigma0, w=a.w, vt_descriptor=a.vt_descriptor, clean_xbar=clean,
    )


@dataclass(frozen=True)
class MetricsRow:
    step: int
    loss: float
    divergence_term: float
    grad_norm: float
    wall_ms: float


@dataclass
class TrainResult:
    model: Denoiser
    steps: int
    metrics: list[MetricsRow]
    t_min_valid: int


def _chunk_bounds(batch_size: int, chunk_size: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + chunk_size, batch_size))
            for lo in range(0, batch_size, chunk_size)]


def _evaluate_chunk(model, cfg: TrainConfig, data: PrecomputedDataset,
                    schedule: DiffusionSchedule, idx: np.ndarray,
                    t_vec: np.ndarray, rng) -> tuple[float, float, np.ndarray]:
    """One chunk's (loss, divergence term, flat gradient), all chunk means."""
    if cfg.oracle_mode:
        xbar = data.clean_xbar[idx]
        abar = np.asarray(schedule.abar(t_vec))[:, None]
        eps = rng.standard_normal(xbar.shape)
        xbar_t = np.sqrt(abar) * xbar + np.sqrt(1.0 - abar) * eps
        out = supervised_loss_from_samples(model, xbar, xbar_t, t_vec, schedule,
                                           cfg.loss)
    else:
        ybar = data.ybar[idx]
        nv = data.noise_var[idx]
        xbar_t = perturb_batch(ybar, nv, t_vec, schedule, rng)
        probes = rng.standard_normal((cfg.loss.probes * idx.size, data.n)) \
            if cfg.loss.probe_kind == "gaussian" \
            else rng.integers(0, 2, size=(cfg.loss.probes * idx.size, data.n)) * 2.0 - 1.0
        out = gsure_loss_from_samples(model, ybar, data.masks[idx], xbar_t,
                                      t_vec, probes, schedule, data.w, cfg.loss)
    return out.value, out.divergence_term, out.backward_flat(model)


def train(model: Denoiser, cfg: TrainConfig, data: PrecomputedDataset,
          schedule: DiffusionSchedule, measure_time: bool = False) -> TrainResult:
    """Run the stochastic loop: sample, perturb, estimate risk, step, shadow.

    Timesteps are drawn uniformly from the feasible range
    ``[t_min_valid, T]`` induced by the dataset's worst measurement variance.
    ``measure_time`` fills the wall_ms metrics column; it is off by default so
    identical runs produce identical metrics.
    """
    if cfg.oracle_mode and data.clean_xbar is None:
        raise ValueError("oracle mode needs clean signals (simulation-mode dataset)")
    if model.n != data.n:
        raise ValueError(f"model dimension {model.n} != data dimension {data.n}")
    if len(data) == 0 and cfg.iterations > 0:
        raise ValueError("cannot train on an empty dataset")

    t_min = t_min_for_noise_var(schedule, data.worst_noise_var())
    state = AdamState.for_params(model.params)
    metrics: list[MetricsRow] = []
    bounds = _chunk_bounds(cfg.batch_size, cfg.chunk_size)
    pool = None
    if cfg.threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        pool = ThreadPoolExecutor(max_workers=cfg.threads)
    started = time.perf_counter()

    try:
        for step in range(1, cfg.iterations + 1):
            idx = derived_rng(cfg.seed, step, 0).integers(0, len(data),
                                                          size=cfg.batch_size)
            t_vec = derived_rng(cfg.seed, step, 1).integers(
                t_min, schedule.T + 1, size=cfg.batch_size)

            def run_chunk(ci_lo_hi):
                ci, (lo, hi) = ci_lo_hi
                rng = derived_rng(cfg.seed, step, 2 + ci)
                return _evaluate_chunk(model, cfg, data, schedule, idx[lo:hi],
                                       t_vec[lo:hi], rng)

            jobs = list(enumerate(bounds))
            if pool is None:
                results = [run_chunk(j) for j in jobs]
            else:
                results = list(pool.map(run_chunk, jobs))

            # fixed-order reduction of chunk means into batch means
            loss = 0.0
            div = 0.0
            grads = np.zeros_like(model.params)
            for (lo, hi), (c_loss, c_div, c_grads) in zip(bounds, results):
                frac = (hi - lo) / cfg.batch_size
                loss += frac * c_loss
                div += frac * c_div
                grads += frac * c_grads

            if not np.isfinite(loss) or not np.all(np.isfinite(grads)):
                raise TrainingDiverged(step, "non-finite loss or gradient")

            adam_step(model.params, grads, state, cfg.learning_rate,
                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            model.ema_update()

            if step == 1 or step % cfg.log_interval == 0 or step == cfg.iterations:
                wall = (time.perf_counter() - started) * 1e3 if measure_time else 0.0
                metrics.append(MetricsRow(step=step, loss=loss,
                                          divergence_term=div,
                                          grad_norm=float(np.linalg.norm(grads)),
                                          wall_ms=wall))
    except NonFiniteError as exc:
        raise TrainingDiverged(step, str(exc)) from exc
    finally:
        if pool is not None:
            pool.shutdown()

    return TrainResult(model=model, steps=cfg.iterations, metrics=metrics,
                       t_min_valid=t_min)
