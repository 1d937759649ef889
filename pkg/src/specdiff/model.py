"""Time-conditioned denoiser network with EMA parameter shadowing.

The denoiser is a fully connected net over the flattened spectral vector
concatenated with a sinusoidal embedding of the timestep (the first layer is
split into a signal block and an embedding block, which is the same map).
Nonlinearities are smooth everywhere because training differentiates the
network's input-Jacobian; a kinked activation would make that Jacobian
discontinuous.

The network predicts either the clean signal directly (``predict_x``) or the
added noise (``predict_epsilon``); in the latter case the estimate of the
clean signal is ``(x_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)``. Every
consumer differentiates this composed clean-signal view, so the conversion is
built into the computation graph.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Graph, Var, forward
from .diffusion import DiffusionSchedule

__all__ = ["Denoiser", "time_embedding"]

MEAN_TYPES = ("predict_x", "predict_epsilon")


def time_embedding(t, dim: int, max_period: float = 10_000.0) -> np.ndarray:
    """Sinusoidal embedding of (1-based) timesteps; rows for vector input."""
    if dim % 2:
        raise ValueError("embedding dimension must be even")
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    angles = t[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


class Denoiser:
    """MLP denoiser with flat parameter storage and an EMA shadow copy."""

    def __init__(self, n: int, hidden: tuple[int, ...], emb_dim: int,
                 mean_type: str, ema_decay: float, params: np.ndarray,
                 nonlin: str = "tanh"):
        if mean_type not in MEAN_TYPES:
            raise ValueError(f"mean_type must be one of {MEAN_TYPES}")
        if not 0.0 <= ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        self.n = int(n)
        self.hidden = tuple(int(h) for h in hidden)
        self.emb_dim = int(emb_dim)
        self.mean_type = mean_type
        self.ema_decay = float(ema_decay)
        self.nonlin = nonlin
        self._layout = self._make_layout(self.n, self.hidden, self.emb_dim)
        size = sum(int(np.prod(shape)) for _, shape in self._layout)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (size,):
            raise ValueError(f"expected {size} parameters, got {params.shape}")
        self.params = params.copy()
        self.ema_params = params.copy()

    # -- construction -----------------------------------------------------

    @staticmethod
    def _make_layout(n, hidden, emb_dim):
        if not hidden:
            raise ValueError("at least one hidden layer is required")
        layout = [("w0x", (hidden[0], n)), ("w0e", (hidden[0], emb_dim)),
                  ("b0", (hidden[0],))]
        for i in range(1, len(hidden)):
            layout.append((f"w{i}", (hidden[i], hidden[i - 1])))
            layout.append((f"b{i}", (hidden[i],)))
        layout.append(("w_out", (n, hidden[-1])))
        layout.append(("b_out", (n,)))
        return layout

    @classmethod
    def create(cls, n: int, hidden=(256, 256, 256), emb_dim: int = 32,
               mean_type: str = "predict_x", ema_decay: float = 0.999,
               rng=None, nonlin: str = "tanh") -> "Denoiser":
        """Fresh network with scaled Gaussian weights and zero biases."""
        rng = np.random.default_rng(0) if rng is None else rng
        layout = cls._make_layout(n, tuple(hidden), emb_dim)
        chunks = []
        for name, shape in layout:
            if name.startswith("w"):
                fan_in = shape[1]
                scale = (0.1 if name == "w_out" else 1.0) / np.sqrt(fan_in)
                chunks.append(scale * rng.standard_normal(shape).ravel())
            else:
                chunks.append(np.zeros(int(np.prod(shape))))
        return cls(n, tuple(hidden), emb_dim, mean_type, ema_decay,
                   np.concatenate(chunks), nonlin=nonlin)

    @property
    def param_count(self) -> int:
        return self.params.shape[0]

    def _views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        out, off = {}, 0
        for name, shape in self._layout:
            size = int(np.prod(shape))
            out[name] = flat[off:off + size].reshape(shape)
            off += size
        return out

    def flatten_grads(self, param_grads: list[np.ndarray]) -> np.ndarray:
        """Assemble per-leaf gradients (layout order) into a flat vector."""
        return np.concatenate([g.ravel() for g in param_grads])

    # -- graph construction ------------------------------------------------

    def param_nodes(self, g: Graph, ema: bool = False) -> dict[str, Var]:
        """Declare one parameter leaf per layout entry, in layout order."""
        flat = self.ema_params if ema else self.params
        return {name: g.param(view) for name, view in self._views(flat).items()}

    def apply_net(self, g: Graph, x: Var, temb: Var, pvars: dict[str, Var]) -> Var:
        """Raw network output (x-estimate or noise estimate) for row inputs."""
        h = g.add(g.affine(x, pvars["w0x"], pvars["b0"]),
                  g.affine(temb, pvars["w0e"]))
        h = g.nonlin(self.nonlin, h)
        for i in range(1, len(self.hidden)):
            h = g.nonlin(self.nonlin, g.affine(h, pvars[f"w{i}"], pvars[f"b{i}"]))
        return g.affine(h, pvars["w_out"], pvars["b_out"])

    def to_x0(self, g: Graph, x: Var, raw: Var, abar_rows: np.ndarray) -> Var:
        """Clean-signal view of the raw output, per the network's mean type."""
        if self.mean_type == "predict_x":
            return raw
        scaled_eps = g.cmul(raw, np.sqrt(1.0 - abar_rows))
        return g.cmul(g.sub(x, scaled_eps), 1.0 / np.sqrt(abar_rows))

    def build_graph(self, xbar_t: np.ndarray, t, schedule: DiffusionSchedule,
                    ema: bool = False) -> tuple[Graph, Var, Var]:
        """Graph computing the clean-signal estimate for a batch of rows.

        ``t`` is an int shared by all rows or a per-row integer vector.
        Returns ``(graph, input_var, x0_var)``; the graph has no output set so
        callers can keep composing (losses do).
        """
        xbar_t = np.atleast_2d(np.asarray(xbar_t, dtype=np.float64))
        batch, n = xbar_t.shape
        if n != self.n:
            raise ValueError(f"model dimension {self.n}, input has {n}")
        t_vec = np.full(batch, t, dtype=np.int64) if np.isscalar(t) \
            else np.asarray(t, dtype=np.int64)
        if t_vec.shape != (batch,):
            raise ValueError("t must be a scalar or one timestep per row")
        abar = np.asarray(schedule.abar(t_vec), dtype=np.float64)
        abar_rows = np.repeat(abar[:, None], n, axis=1)

        g = Graph()
        x = g.input((batch, n))
        temb = g.const(time_embedding(t_vec, self.emb_dim))
        pvars = self.param_nodes(g, ema=ema)
        raw = self.apply_net(g, x, temb, pvars)
        x0 = self.to_x0(g, x, raw, abar_rows)
        return g, x, x0

    # -- evaluation ---------------------------------------------------------

    def denoise(self, xbar_t: np.ndarray, t, schedule: DiffusionSchedule,
                ema: bool = False) -> np.ndarray:
        """Clean-signal estimate; accepts one vector or a batch of rows."""
        xbar_t = np.asarray(xbar_t, dtype=np.float64)
        single = xbar_t.ndim == 1
        g, _, x0 = self.build_graph(xbar_t, t, schedule, ema=ema)
        g.set_output(x0)
        out = forward(g, [np.atleast_2d(xbar_t)])
        return out[0] if single else out

    # -- EMA ---------------------------------------------------------------

    def ema_update(self) -> None:
        """Shift the shadow parameters: ``ema <- d * ema + (1 - d) * params``."""
        d = self.ema_decay
        self.ema_params *= d
        self.ema_params += (1.0 - d) * self.params

    # -- serialization -----------------------------------------------------

    def arch(self) -> dict:
        return {
            "n": self.n,
            "hidden": list(self.hidden),
            "emb_dim": self.emb_dim,
            "mean_type": self.mean_type,
            "ema_decay": self.ema_decay,
            "nonlin": self.nonlin,
        }

    @classmethod
    def from_arch(cls, arch: dict, params: np.ndarray,
                  ema_params: np.ndarray | None = None) -> "Denoiser":
        model = cls(arch["n"], tuple(arch["hidden"]), arch["emb_dim"],
                    arch["mean_type"], arch["ema_decay"], params,
                    nonlin=arch.get("nonlin", "tanh"))
        if ema_params is not None:
            ema_params = np.asarray(ema_params, dtype=np.float64)
            if ema_params.shape != model.params.shape:
                raise ValueError("ema parameter vector has the wrong length")
            model.ema_params = ema_params.copy()
        return model
