"""Fully-connected networks over the autodiff tape.

Hidden layers are Dense -> (optional LayerNorm) -> GELU; the output layer is
affine. Weights use LeCun-style uniform fan-in initialization, biases start
at zero. ``forward`` records on the tape; ``forward_np`` and ``forward_jvp``
are tape-free numpy paths for evaluation and for directional derivatives
(the latter feeds divergence computations downstream).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, gelu, gelu_np, gelu_value_and_tangent, layer_norm, matmul, parameter

_LN_EPS = 1e-5


class Mlp:
    def __init__(
        self,
        in_dim: int,
        widths: list[int] | tuple[int, ...],
        out_dim: int,
        *,
        use_layer_norm: bool = False,
        rng: np.random.Generator,
    ):
        self.in_dim = int(in_dim)
        self.widths = [int(w) for w in widths]
        self.out_dim = int(out_dim)
        self.use_layer_norm = bool(use_layer_norm)

        dims = [self.in_dim] + self.widths + [self.out_dim]
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(3.0 / fan_in)
            self.weights.append(parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out))))
            self.biases.append(parameter(np.zeros(fan_out)))
        self.norm_gains: list[Tensor] = []
        self.norm_biases: list[Tensor] = []
        if self.use_layer_norm:
            for w in self.widths:
                self.norm_gains.append(parameter(np.ones(w)))
                self.norm_biases.append(parameter(np.zeros(w)))

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"layers.{i}.weight"] = w
            out[f"layers.{i}.bias"] = b
        for i, (g, b) in enumerate(zip(self.norm_gains, self.norm_biases)):
            out[f"norms.{i}.gain"] = g
            out[f"norms.{i}.bias"] = b
        return out

    def forward(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        n_hidden = len(self.widths)
        for i in range(n_hidden):
            h = matmul(h, self.weights[i]) + self.biases[i]
            if self.use_layer_norm:
                h = layer_norm(h, self.norm_gains[i], self.norm_biases[i], eps=_LN_EPS)
            h = gelu(h)
        return matmul(h, self.weights[-1]) + self.biases[-1]

    __call__ = forward

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        """Tape-free forward pass."""
        h = np.asarray(x, dtype=np.float64)
        for i in range(len(self.widths)):
            h = h @ self.weights[i].data + self.biases[i].data
            if self.use_layer_norm:
                h = self._ln_np(h, i)
            h = gelu_np(h)
        return h @ self.weights[-1].data + self.biases[-1].data

    def forward_jvp(self, x: np.ndarray, dx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Forward pass together with the directional derivative along dx.

        Returns (y, J @ dx) where J is the Jacobian of the network output
        with respect to its input, evaluated at x. Tape-free.
        """
        h = np.asarray(x, dtype=np.float64)
        dh = np.asarray(dx, dtype=np.float64)
        for i in range(len(self.widths)):
            h = h @ self.weights[i].data + self.biases[i].data
            dh = dh @ self.weights[i].data
            if self.use_layer_norm:
                h, dh = self._ln_jvp_np(h, dh, i)
            h, dh = gelu_value_and_tangent(h, dh)
        return (
            h @ self.weights[-1].data + self.biases[-1].data,
            dh @ self.weights[-1].data,
        )

    def _ln_np(self, h: np.ndarray, i: int) -> np.ndarray:
        mu = h.mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(h.var(axis=-1, keepdims=True) + _LN_EPS)
        return self.norm_gains[i].data * (h - mu) * inv + self.norm_biases[i].data

    def _ln_jvp_np(self, h: np.ndarray, dh: np.ndarray, i: int) -> tuple[np.ndarray, np.ndarray]:
        mu = h.mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(h.var(axis=-1, keepdims=True) + _LN_EPS)
        xhat = (h - mu) * inv
        dmu = dh.mean(axis=-1, keepdims=True)
        dxc = dh - dmu
        dxhat = inv * (dxc - xhat * (dxc * xhat).mean(axis=-1, keepdims=True))
        g = self.norm_gains[i].data
        return g * xhat + self.norm_biases[i].data, g * dxhat

    # -- state transfer ----------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = self.params()
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise ValueError(f"parameter names do not match: {missing}")
        for name, t in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
            t.data = arr.copy()

    def clone(self) -> "Mlp":
        twin = Mlp.__new__(Mlp)
        twin.in_dim = self.in_dim
        twin.widths = list(self.widths)
        twin.out_dim = self.out_dim
        twin.use_layer_norm = self.use_layer_norm
        twin.weights = [parameter(w.data.copy()) for w in self.weights]
        twin.biases = [parameter(b.data.copy()) for b in self.biases]
        twin.norm_gains = [parameter(g.data.copy()) for g in self.norm_gains]
        twin.norm_biases = [parameter(b.data.copy()) for b in self.norm_biases]
        return twin
