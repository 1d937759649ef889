"""Fixture denoisers implementing the model protocol used by the losses."""

import numpy as np

from specdiff.autodiff import Graph, forward


class LinearModel:
    """Affine, timestep-independent denoiser ``f(x) = x @ A.T + b``."""

    def __init__(self, a, b):
        self.a = np.asarray(a, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.n = self.a.shape[0]

    def build_graph(self, rows, t, schedule, ema=False):
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        g = Graph()
        x = g.input(rows.shape)
        out = g.affine(x, g.param(self.a), g.param(self.b))
        return g, x, out

    def denoise(self, xbar_t, t, schedule, ema=False):
        xbar_t = np.asarray(xbar_t, dtype=np.float64)
        single = xbar_t.ndim == 1
        rows = np.atleast_2d(xbar_t)
        g, _, out = self.build_graph(rows, t, schedule)
        g.set_output(out)
        vals = forward(g, [rows])
        return vals[0] if single else vals

    def flatten_grads(self, pgrads):
        return np.concatenate([p.ravel() for p in pgrads])

    def exact_divergence(self, mask, w):
        """trace(P W^2 A) for this fixed linear map."""
        return float(np.sum(np.asarray(mask, float) * np.asarray(w) ** 2
                            * np.diag(self.a)))


class ConstantModel(LinearModel):
    """Denoiser that ignores its input: ``f(x) = c``."""

    def __init__(self, c):
        c = np.asarray(c, dtype=np.float64)
        super().__init__(np.zeros((c.shape[0], c.shape[0])), c)
