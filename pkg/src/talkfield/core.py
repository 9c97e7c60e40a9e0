"""Small dense networks with hand-written reverse-mode gradients, an optimizer,
and a central-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "softplus", "exp", "identity")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, path: str):
        super().__init__(f"non-finite gradient in parameter {path!r}; step rejected")
        self.path = path


def sigmoid(x):
    # tanh form is overflow-free and gives exactly 0.5 at 0
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def softplus(x):
    return np.logaddexp(0.0, x)


def _act(name: str, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return sigmoid(z)
    if name == "softplus":
        return softplus(z)
    if name == "exp":
        return np.exp(z)
    return z


def _act_inplace(name: str, z):
    """``_act`` writing into ``z``; same bits, fewer temporaries."""
    if name == "relu":
        return np.maximum(z, 0.0, out=z)
    if name == "sigmoid":
        z *= 0.5
        np.tanh(z, out=z)
        z *= 0.5
        z += 0.5
        return z
    if name == "softplus":
        return np.logaddexp(0.0, z, out=z)
    if name == "exp":
        return np.exp(z, out=z)
    return z


def _act_grad(name: str, z, a):
    """Derivative of the activation given pre-activation ``z`` and output ``a``."""
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "softplus":
        return sigmoid(z)
    if name == "exp":
        return a
    return None  # identity


@dataclass
class Mlp:
    """Fully connected network. ``weights[k]`` has shape ``(out_k, in_k)``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(
                    f"layer {k} expects {w.shape[1]} inputs but layer {k - 1} "
                    f"produces {self.weights[k - 1].shape[0]}"
                )
        for name in (self.hidden_activation, self.output_activation):
            if name not in ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")

    @classmethod
    def init(
        cls,
        layer_sizes: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: str = "relu",
        output_activation: str = "identity",
    ) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        if len(layer_sizes) < 2 or min(layer_sizes) < 1:
            raise ValueError(f"bad layer sizes {list(layer_sizes)}")
        weights, biases = [], []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            lim = np.sqrt(6.0 / (n_in + n_out))
            weights.append(rng.uniform(-lim, lim, size=(n_out, n_in)))
            biases.append(np.zeros(n_out))
        return cls(weights, biases, hidden_activation, output_activation)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    def parameters(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{prefix}W{k}", w))
            out.append((f"{prefix}b{k}", b))
        return out

    def astype(self, dtype) -> "Mlp":
        return Mlp(
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            self.hidden_activation,
            self.output_activation,
        )

    def copy(self) -> "Mlp":
        return self.astype(self.weights[0].dtype)

    def _check_input(self, x):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"input has size {x.shape[-1]}, network expects {self.n_in}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        self._check_input(x)
        a = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T
            z += b
            a = _act_inplace(self.output_activation if k == last else self.hidden_activation, z)
        return a

    __call__ = forward

    def forward_from(self, z: np.ndarray, layer: int) -> np.ndarray:
        """Finish a forward pass given the pre-activation ``z`` of ``layer``."""
        last = len(self.weights) - 1
        a = _act(self.output_activation if layer == last else self.hidden_activation, z)
        for k in range(layer + 1, last + 1):
            z = a @ self.weights[k].T
            z += self.biases[k]
            a = _act_inplace(self.output_activation if k == last else self.hidden_activation, z)
        return a

    def forward_cache(self, x: np.ndarray):
        """Forward pass that keeps what ``backward`` needs."""
        x = np.asarray(x)
        self._check_input(x)
        acts, pres = [x], []
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w.T + b
            pres.append(z)
            acts.append(_act(self.output_activation if k == last else self.hidden_activation, z))
        return acts[-1], (acts, pres)

    def backward(self, cache, upstream: np.ndarray, need_input_grad: bool = True) -> "GradBundle":
        """Gradients of ``sum(upstream * output)``; batch rows are summed."""
        acts, pres = cache
        upstream = np.asarray(upstream)
        if upstream.shape != acts[-1].shape:
            raise ValueError(
                f"upstream has shape {upstream.shape}, network output is {acts[-1].shape}"
            )
        last = len(self.weights) - 1
        dws: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        dbs: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        g = upstream
        dx = None
        for k in range(last, -1, -1):
            name = self.output_activation if k == last else self.hidden_activation
            d = _act_grad(name, pres[k], acts[k + 1])
            dz = g if d is None else g * d
            a_prev = acts[k]
            if dz.ndim == 1:
                dws[k] = np.outer(dz, a_prev)
                dbs[k] = dz.copy()
            else:
                dws[k] = dz.T @ a_prev
                dbs[k] = dz.sum(axis=0)
            if k or need_input_grad:
                g = dz @ self.weights[k]
        if need_input_grad:
            dx = g
        return GradBundle(dws, dbs, dx)


@dataclass
class GradBundle:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray | None = None

    def parameters(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{prefix}W{k}", w))
            out.append((f"{prefix}b{k}", b))
        return out


def mlp_eval(net: Mlp, x) -> np.ndarray:
    return net.forward(x)


def mlp_backprop(net: Mlp, x, upstream) -> GradBundle:
    _, cache = net.forward_cache(x)
    return net.backward(cache, upstream)


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[str, tuple[int, ...]] | None
    n_checked: int

    def __str__(self):
        return f"max rel error {self.max_rel_error:.3e} at {self.worst} ({self.n_checked} entries)"


def rel_error(analytic, numeric, floor: float = 1e-6):
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from dominating."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(
        np.maximum(np.abs(analytic), np.abs(numeric)), floor
    )


def finite_difference_check(
    params: Sequence[tuple[str, np.ndarray]],
    analytic: Sequence[np.ndarray],
    objective: Callable[[], float],
    step: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare ``analytic`` gradients against central differences of ``objective``.

    Parameters are perturbed in place and restored. With ``max_entries`` a random
    subset of each array is probed.
    """
    if not 0 < step < 1e-2:
        raise ValueError("step must lie in (0, 1e-2)")
    worst_err, worst, count = 0.0, None, 0
    for (name, p), g in zip(params, analytic):
        flat_idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat_idx = (rng or np.random.default_rng(0)).choice(p.size, max_entries, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.shape)
            orig = p[idx]
            p[idx] = orig + step
            fp = objective()
            p[idx] = orig - step
            fm = objective()
            p[idx] = orig
            num = (fp - fm) / (2 * step)
            err = float(rel_error(g[idx], num))
            count += 1
            if err > worst_err or worst is None:
                worst_err, worst = err, (name, tuple(int(i) for i in idx))
    return GradCheckReport(worst_err, worst, count)


def check_gradients(
    net: Mlp, x, step: float = 1e-5, upstream=None, seed: int = 0
) -> GradCheckReport:
    """Check ``mlp_backprop`` parameter and input gradients by central differences."""
    x = np.array(x, dtype=float)
    if upstream is None:
        shape = net.forward(x).shape
        upstream = np.random.default_rng(seed).normal(size=shape)
    upstream = np.asarray(upstream, dtype=float)
    grads = mlp_backprop(net, x, upstream)

    def objective():
        return float(np.sum(upstream * net.forward(x)))

    params = net.parameters() + [("input", x)]
    analytic = [g for _, g in grads.parameters()] + [grads.input]
    return finite_difference_check(params, analytic, objective, step)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    method: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.method!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")


def optimizer_step(
    state: OptimizerState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """Update ``params`` in place and return them with the advanced state.

    All gradients are validated before any parameter changes.
    """
    for path, p in params.items():
        g = grads[path]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {path!r} has shape {g.shape}, parameter {p.shape}")
        if not p.flags.c_contiguous:
            raise ValueError(f"parameter {path!r} must be C-contiguous to update in place")
        if not _all_finite(g.reshape(-1)):
            raise NonFiniteGradientError(path)
    state.step += 1
    lr = state.learning_rate
    if state.method == "sgd":
        for path, p in params.items():
            p -= lr * grads[path]
        return params, state
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for path, p in params.items():
        g = grads[path]
        m = state.m.get(path)
        if m is None:
            m = state.m[path] = np.zeros_like(p)
            state.v[path] = np.zeros_like(p)
        _adam_kernel(p.reshape(-1), np.ascontiguousarray(g).reshape(-1), m.reshape(-1),
                     state.v[path].reshape(-1), b1, b2, c1, c2, lr, state.epsilon)
    return params, state


@numba.njit(cache=True, nogil=True)
def _all_finite(x):
    for k in range(x.size):
        if not np.isfinite(x[k]):
            return False
    return True


@numba.njit(cache=True, nogil=True)
def _adam_kernel(p, g, m, v, b1, b2, c1, c2, lr, eps):
    # one fused pass; same arithmetic order as the textbook update
    for k in range(p.size):
        gk = g[k]
        m[k] = b1 * m[k] + (1.0 - b1) * gk
        v[k] = b2 * v[k] + (1.0 - b2) * (gk * gk)
        p[k] -= lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps)
