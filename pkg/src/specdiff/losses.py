"""Risk estimators and training objectives.

Everything here estimates (or directly measures) a denoiser's squared error
at a diffusion timestep:

- ``sure``: the classic unbiased risk identity for isotropic Gaussian noise,
  ``|f(y) - y|^2 + 2 sigma^2 div f - n sigma^2``.
- ``supervised_loss``: the standard denoising objective
  ``gamma_t |f(x_t) - x|^2``, available only when clean data exists.
- ``projected_loss``: the mask-weighted error ``|W P (f(x_t) - x)|^2``; with
  ``W = E[P]**(-1/2)`` and mask-independent errors its expectation equals the
  full MSE (test harness only, needs clean data).
- ``gsure_diffusion_loss``: the self-supervised estimator usable from
  corrupted measurements alone,

      gamma_t * ( |W P (f(x_t) - r)|^2 + 2 lambda_t * div_est ),

  where ``r`` is the measurement ``ybar`` (variance-reduced form, default) or
  ``x_t / sqrt(abar_t)`` (theoretical form), and ``div_est`` is a Hutchinson
  estimate of the divergence of ``P W^2 f`` with respect to the noisy input.
  The additive constant that completes the unbiasedness identity does not
  depend on the parameters and is never computed during training.

Models plug in through a small protocol: ``model.build_graph(rows, t,
schedule, ema=...)`` returning ``(graph, input_var, x0_var)`` where rows are
processed independently, plus ``model.flatten_grads`` for trainers. The
divergence estimate rides the same network evaluation as the squared-error
term (one tangent-carrying forward pass per probe), and the returned scalar
is differentiable end to end, including through the probe JVP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, forward
from .diffusion import DiffusionSchedule, perturb_batch
from .operators import Measurement

__all__ = [
    "LossConfig",
    "LossEval",
    "finite_diff_divergence",
    "gamma_at",
    "gsure_diffusion_loss",
    "gsure_loss_from_samples",
    "hutchinson_divergence",
    "hutchinson_probe_values",
    "lambda_at",
    "projected_loss",
    "projected_loss_rows",
    "supervised_loss",
    "supervised_loss_from_samples",
    "sure",
]

GAMMA_RULES = ("constant", "snr")
LAMBDA_RULES = ("theory", "exact", "constant", "scaled_inverse_snr")
PROBE_KINDS = ("gaussian", "rademacher")


@dataclass(frozen=True)
class LossConfig:
    """Per-timestep weighting and divergence-estimation choices.

    ``gamma`` is the timestep weight: ``constant`` (1) or ``snr``
    (``abar/(1-abar)``). ``lam`` sets the divergence coefficient:
    ``theory`` (``1-abar``), ``exact`` (``(1-abar)/sqrt(abar)``, the
    coefficient under which the estimator is exactly unbiased), ``constant``
    (``lam_coef``), or ``scaled_inverse_snr`` (``lam_coef*(1-abar)/abar``).
    """

    gamma: str = "constant"
    lam: str = "constant"
    lam_coef: float = 1e-4
    use_ybar_variant: bool = True
    probes: int = 1
    probe_kind: str = "gaussian"

    def __post_init__(self):
        if self.gamma not in GAMMA_RULES:
            raise ValueError(f"gamma rule must be one of {GAMMA_RULES}")
        if self.lam not in LAMBDA_RULES:
            raise ValueError(f"lambda rule must be one of {LAMBDA_RULES}")
        if self.probes < 1:
            raise ValueError("probes must be >= 1")
        if self.probe_kind not in PROBE_KINDS:
            raise ValueError(f"probe kind must be one of {PROBE_KINDS}")

    @classmethod
    def faces(cls, **kw) -> "LossConfig":
        """Recipe used for the patch-drop image experiments."""
        return cls(gamma="constant", lam="constant", lam_coef=1e-4, **kw)

    @classmethod
    def acquisition(cls, **kw) -> "LossConfig":
        """Recipe used for the undersampled-acquisition experiments."""
        return cls(gamma="snr", lam="scaled_inverse_snr", lam_coef=1e-4, **kw)

    @classmethod
    def theory(cls, **kw) -> "LossConfig":
        """Coefficients under which the estimator matches the projected MSE."""
        return cls(gamma="constant", lam="theory", use_ybar_variant=False, **kw)


def gamma_at(cfg: LossConfig, abar) -> np.ndarray:
    abar = np.asarray(abar, dtype=np.float64)
    if cfg.gamma == "constant":
        return np.ones_like(abar)
    return abar / (1.0 - abar)


def lambda_at(cfg: LossConfig, abar) -> np.ndarray:
    abar = np.asarray(abar, dtype=np.float64)
    if cfg.lam == "theory":
        return 1.0 - abar
    if cfg.lam == "exact":
        return (1.0 - abar) / np.sqrt(abar)
    if cfg.lam == "constant":
        return np.full_like(abar, cfg.lam_coef)
    return cfg.lam_coef * (1.0 - abar) / abar


def sure(f_output: np.ndarray, y: np.ndarray, sigma: float, divergence: float) -> float:
    """Unbiased risk estimate ``|f(y) - y|^2 + 2 sigma^2 div - n sigma^2``."""
    f_output = np.asarray(f_output, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if f_output.shape != y.shape:
        raise ValueError("f_output and y must have the same shape")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    n = y.size
    return float(np.sum((f_output - y) ** 2) + 2.0 * sigma ** 2 * divergence
                 - n * sigma ** 2)


@dataclass
class LossEval:
    """A differentiable scalar with its additive parts and the tape behind it."""

    graph: Graph
    value: float
    mse_term: float
    divergence_term: float

    def backward_flat(self, model) -> np.ndarray:
        """Flat parameter gradient of the scalar."""
        from .autodiff import backward

        pgrads, _ = backward(self.graph, np.asarray(1.0))
        return model.flatten_grads(pgrads)


def _as_rows(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def _t_rows(t, batch: int) -> np.ndarray:
    t_vec = np.full(batch, t, dtype=np.int64) if np.isscalar(t) \
        else np.asarray(t, dtype=np.int64)
    if t_vec.shape != (batch,):
        raise ValueError("t must be scalar or one timestep per row")
    return t_vec


def _draw_probes(cfg: LossConfig, shape, rng) -> np.ndarray:
    if cfg.probe_kind == "gaussian":
        return rng.standard_normal(shape)
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


def supervised_loss_from_samples(model, xbar_rows, xbar_t_rows, t,
                                 schedule: DiffusionSchedule,
                                 cfg: LossConfig | None = None) -> LossEval:
    """Batch-mean weighted denoising error for given noisy samples."""
    cfg = cfg or LossConfig()
    xbar_rows = _as_rows(xbar_rows)
    xbar_t_rows = _as_rows(xbar_t_rows)
    batch, n = xbar_rows.shape
    t_vec = _t_rows(t, batch)
    gam = gamma_at(cfg, schedule.abar(t_vec))

    g, _, x0 = model.build_graph(xbar_t_rows, t_vec, schedule)
    err = g.sub(x0, g.const(xbar_rows))
    weights = np.repeat(np.sqrt(gam / batch)[:, None], n, axis=1)
    mse = g.sum(g.nonlin("square", g.cmul(err, weights)))
    g.set_output(mse)
    value = float(forward(g, [xbar_t_rows]))
    return LossEval(graph=g, value=value, mse_term=value, divergence_term=0.0)


def supervised_loss(model, xbar_rows, t, schedule: DiffusionSchedule,
                    rng, cfg: LossConfig | None = None) -> LossEval:
    """Draw ideal noisy samples from clean data and score the denoiser.

    Oracle mode only: requires the clean spectral signals.
    """
    xbar_rows = _as_rows(xbar_rows)
    batch = xbar_rows.shape[0]
    t_vec = _t_rows(t, batch)
    abar = np.asarray(schedule.abar(t_vec))[:, None]
    eps = rng.standard_normal(xbar_rows.shape)
    xbar_t = np.sqrt(abar) * xbar_rows + np.sqrt(1.0 - abar) * eps
    return supervised_loss_from_samples(model, xbar_rows, xbar_t, t_vec,
                                        schedule, cfg)


def projected_loss_rows(model, xbar_rows, xbar_t_rows, mask_rows, w, t,
                        schedule: DiffusionSchedule) -> np.ndarray:
    """Per-row values of ``|W P (f(x_t) - x)|^2`` (no timestep weighting)."""
    xbar_rows = _as_rows(xbar_rows)
    xbar_t_rows = _as_rows(xbar_t_rows)
    mask_rows = _as_rows(mask_rows).astype(np.float64)
    w = np.asarray(w, dtype=np.float64)
    batch = xbar_rows.shape[0]
    t_vec = _t_rows(t, batch)
    g, _, x0 = model.build_graph(xbar_t_rows, t_vec, schedule)
    g.set_output(x0)
    est = forward(g, [xbar_t_rows])
    resid = (est - xbar_rows) * mask_rows * w
    return np.sum(resid ** 2, axis=1)


def projected_loss(model, xbar, xbar_t, mask, w, t,
                   schedule: DiffusionSchedule) -> float:
    """Mask-weighted squared error of one sample against its clean signal."""
    return float(projected_loss_rows(model, xbar, xbar_t, mask, w, t, schedule)[0])


def _divergence_weights(mask_rows: np.ndarray, w: np.ndarray,
                        coeff_col: np.ndarray) -> np.ndarray:
    # rows of coeff_i * P_ij * W_j^2
    return coeff_col * mask_rows * (w ** 2)[None, :]


def gsure_loss_from_samples(model, ybar_rows, mask_rows, xbar_t_rows, t,
                            probe_rows, schedule: DiffusionSchedule,
                            w, cfg: LossConfig) -> LossEval:
    """Deterministic core of the self-supervised loss.

    ``probe_rows`` has shape ``(probes * batch, n)``: probe ``k`` of row ``i``
    sits at ``k * batch + i``. The squared-error term is evaluated on the
    first probe block only (all blocks share the same primal rows); the
    divergence estimate averages over blocks.
    """
    ybar_rows = _as_rows(ybar_rows)
    mask_rows = _as_rows(mask_rows).astype(np.float64)
    xbar_t_rows = _as_rows(xbar_t_rows)
    probe_rows = _as_rows(probe_rows)
    w = np.asarray(w, dtype=np.float64)
    batch, n = ybar_rows.shape
    t_vec = _t_rows(t, batch)
    k = cfg.probes
    if probe_rows.shape != (k * batch, n):
        raise ValueError(f"expected {(k * batch, n)} probe rows, got {probe_rows.shape}")

    abar = np.asarray(schedule.abar(t_vec), dtype=np.float64)
    gam = gamma_at(cfg, abar)
    lam = lambda_at(cfg, abar)

    if cfg.use_ybar_variant:
        r_rows = ybar_rows
    else:
        r_rows = xbar_t_rows / np.sqrt(abar)[:, None]

    rows = np.tile(xbar_t_rows, (k, 1))
    t_rep = np.tile(t_vec, k)

    # per-row constant weights; probe blocks beyond the first carry no MSE
    mse_w = np.zeros((k * batch, n))
    mse_w[:batch] = np.sqrt(gam / batch)[:, None] * mask_rows * w[None, :]
    div_w = np.tile(
        _divergence_weights(mask_rows, w, (2.0 * gam * lam / (batch * k))[:, None]),
        (k, 1),
    )

    g, x, x0 = model.build_graph(rows, t_rep, schedule)
    err = g.sub(x0, g.const(np.tile(r_rows, (k, 1))))
    mse = g.sum(g.nonlin("square", g.cmul(err, mse_w)))
    div = g.sum(g.cmul(g.mul(g.const(probe_rows), g.tangent_of(x0)), div_w))
    total = g.add(mse, div)
    g.set_output(total)
    value = float(forward(g, [rows], tangents=[probe_rows]))
    return LossEval(graph=g, value=value,
                    mse_term=float(g.value_of(mse)),
                    divergence_term=float(g.value_of(div)))


def gsure_diffusion_loss(model, m: Measurement, t: int,
                         schedule: DiffusionSchedule, w,
                         cfg: LossConfig, rng) -> LossEval:
    """Self-supervised loss for one measurement at one timestep.

    Draws the perturbed sample first and the Hutchinson probes second from
    ``rng``, then defers to :func:`gsure_loss_from_samples`.
    """
    xbar_t = perturb_batch(m.ybar, m.noise_var, np.array([t]), schedule, rng)
    probes = _draw_probes(cfg, (cfg.probes, m.n), rng)
    return gsure_loss_from_samples(model, m.ybar, m.mask, xbar_t, t, probes,
                                   schedule, w, cfg)


def hutchinson_divergence(model, xbar_t, t: int, schedule: DiffusionSchedule,
                          mask, w, probes: int, rng) -> LossEval:
    """Monte Carlo estimate of the divergence of ``P W^2 f`` at ``xbar_t``.

    Each probe ``v ~ N(0, I)`` contributes ``v . (P W^2 (J f) v)`` computed by
    one tangent-carrying forward pass; the average over probes is returned as
    a differentiable scalar.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    xbar_t = np.asarray(xbar_t, dtype=np.float64)
    if xbar_t.ndim != 1:
        raise ValueError("hutchinson_divergence takes a single spectral vector")
    mask_rows = _as_rows(mask).astype(np.float64)
    w = np.asarray(w, dtype=np.float64)
    n = xbar_t.shape[0]
    probe_rows = rng.standard_normal((probes, n))

    rows = np.tile(xbar_t, (probes, 1))
    g, x, x0 = model.build_graph(rows, np.full(probes, t, dtype=np.int64), schedule)
    div_w = np.tile(mask_rows * (w ** 2)[None, :], (probes, 1)) / probes
    div = g.sum(g.cmul(g.mul(g.const(probe_rows), g.tangent_of(x0)), div_w))
    g.set_output(div)
    value = float(forward(g, [rows], tangents=[probe_rows]))
    return LossEval(graph=g, value=value, mse_term=0.0, divergence_term=value)


def hutchinson_probe_values(model, xbar_t, t: int, schedule: DiffusionSchedule,
                            mask, w, probes: int, rng,
                            chunk: int = 4096) -> np.ndarray:
    """Per-probe Hutchinson samples ``v . (P W^2 (J f) v)`` for estimator studies."""
    xbar_t = np.asarray(xbar_t, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n = xbar_t.shape[0]
    out = np.empty(probes)
    done = 0
    while done < probes:
        size = min(chunk, probes - done)
        v = rng.standard_normal((size, n))
        rows = np.tile(xbar_t, (size, 1))
        g, x, x0 = model.build_graph(rows, np.full(size, t, dtype=np.int64), schedule)
        jv = g.tangent_of(x0)
        g.set_output(jv)
        forward(g, [rows], tangents=[v])
        jv_rows = g.value_of(jv)
        out[done:done + size] = np.sum(v * (mask * w ** 2)[None, :] * jv_rows, axis=1)
        done += size
    return out


def finite_diff_divergence(model, xbar_t, t: int, schedule: DiffusionSchedule,
                           mask, w, probes: int, rng,
                           step: float = 1e-4) -> float:
    """Numerical cross-check of the divergence estimate (never trains).

    Replaces the exact JVP with a central difference of the network along
    each probe direction.
    """
    xbar_t = np.asarray(xbar_t, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    total = 0.0
    for _ in range(probes):
        v = rng.standard_normal(xbar_t.shape)
        fp = model.denoise(xbar_t + step * v, t, schedule)
        fm = model.denoise(xbar_t - step * v, t, schedule)
        jv = (fp - fm) / (2.0 * step)
        total += float(np.sum(v * mask * w ** 2 * jv))
    return total / probes
