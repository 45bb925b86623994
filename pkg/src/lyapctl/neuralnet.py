"""Controller and candidate-Lyapunov MLPs with hand-rolled backprop.

Only the two fixed architectures are needed (prediction -> feature controller
and prediction -> scalar), so there is no general autograd graph: forward
returns an activation cache and backward consumes it. Gradients are exact;
tests pin them against central finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .numerics import matrix_from_fragment, matrix_to_fragment, softmax
from .sgc import NodeAffineSystem


@dataclass
class Mlp:
    """ReLU hidden layers, linear output. layers = [(weight, bias), ...]."""

    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ValidationError("Mlp needs at least one layer")
        self.layers = [
            (np.ascontiguousarray(w, dtype=np.float64), np.ascontiguousarray(b, dtype=np.float64))
            for w, b in self.layers
        ]
        prev = None
        for w, b in self.layers:
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValidationError("layer weight/bias shapes inconsistent")
            if prev is not None and w.shape[0] != prev:
                raise ValidationError("consecutive layer dims do not chain")
            prev = w.shape[1]

    @property
    def dims(self) -> list:
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]


def mlp_init(dims: list, seed) -> Mlp:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init for weights and biases."""
    if len(dims) < 2:
        raise ValidationError("need at least input and output dims")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append((rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                       rng.uniform(-bound, bound, size=fan_out)))
    return Mlp(layers)


def mlp_params(m: Mlp) -> list:
    """Flat parameter list [w0, b0, w1, b1, ...] (array views, mutable)."""
    return [arr for layer in m.layers for arr in layer]


def mlp_forward(m: Mlp, x: np.ndarray):
    """Return (output, cache). Accepts a single vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = np.atleast_2d(x)
    if a.shape[1] != m.layers[0][0].shape[0]:
        raise ValidationError(
            f"input width {a.shape[1]} does not match first layer {m.layers[0][0].shape[0]}"
        )
    acts = [a]
    last = len(m.layers) - 1
    for i, (w, b) in enumerate(m.layers):
        a = a @ w + b
        if i < last:
            a = np.maximum(a, 0.0)
        acts.append(a)
    out = acts[-1][0] if single else acts[-1]
    return out, acts


def mlp_backward(m: Mlp, cache: list, upstream: np.ndarray):
    """Exact gradients of the forward map.

    Returns ([(dW, db), ...], input_grad); parameter gradients are summed
    over the batch, the input gradient is per-row.
    """
    if len(cache) != len(m.layers) + 1:
        raise ValidationError("cache does not match network depth")
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    single = np.asarray(upstream).ndim == 1
    if g.shape != cache[-1].shape:
        raise ValidationError("upstream gradient shape does not match cached output")
    grads = [None] * len(m.layers)
    for i in range(len(m.layers) - 1, -1, -1):
        w, _ = m.layers[i]
        a_prev = cache[i]
        grads[i] = (a_prev.T @ g, g.sum(axis=0))
        g = g @ w.T
        if i > 0:
            g = g * (cache[i] > 0.0)  # rectifier derivative
    return grads, (g[0] if single else g)


@dataclass
class AdamState:
    """Moment buffers for one flat parameter list, updated in place."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    step_count: int = 0
    m: list = field(default=None, repr=False)
    v: list = field(default=None, repr=False)


def adam_step(state: AdamState, params: list, grads: list) -> list:
    """One Adam update with bias correction; params are mutated in place."""
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ValidationError("params/grads do not match Adam state")
    state.step_count += 1
    t = state.step_count
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValidationError("gradient shape does not match parameter")
        m += (1 - state.beta1) * (g - m)
        v += (1 - state.beta2) * (g * g - v)
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps_adam)
    return params


@dataclass
class ClosedLoop:
    """Controller, frozen plant, Lyapunov candidate, and the target state."""

    controller: Mlp
    plant: NodeAffineSystem
    lyapunov: Mlp
    equilibrium: np.ndarray

    def __post_init__(self):
        self.equilibrium = np.asarray(self.equilibrium, dtype=np.float64)
        c = self.equilibrium.shape[0]
        ones = np.flatnonzero(self.equilibrium == 1.0)
        if len(ones) != 1 or abs(self.equilibrium.sum() - 1.0) > 1e-12 \
                or np.any(self.equilibrium < 0):
            raise ValidationError("equilibrium must be a one-hot vector")
        if self.controller.dims[0] != c or self.lyapunov.dims[0] != c:
            raise ValidationError("network input dims do not match state dim")
        if self.lyapunov.dims[-1] != 1:
            raise ValidationError("Lyapunov net must have scalar output")
        if self.controller.dims[-1] != self.plant.weight.shape[0]:
            raise ValidationError("controller output does not match plant feature dim")
        if self.plant.weight.shape[1] != c:
            raise ValidationError("plant class count does not match state dim")

    @property
    def num_classes(self) -> int:
        return self.equilibrium.shape[0]


def closed_loop_step(cl: ClosedLoop, y_t: np.ndarray) -> np.ndarray:
    """One step of the controlled system: plant(f(y_t)). Stays in the simplex."""
    u, _ = mlp_forward(cl.controller, y_t)
    return cl.plant.predict_proba(u)


def v_value(cl: ClosedLoop, y: np.ndarray) -> np.ndarray:
    """Scalar V at one state, or a vector of values for a batch."""
    out, _ = mlp_forward(cl.lyapunov, y)
    return float(out[0]) if np.asarray(y).ndim == 1 else out[:, 0]


def delta_v(cl: ClosedLoop, y_t: np.ndarray) -> np.ndarray:
    """V(step(y_t)) - V(y_t)."""
    return v_value(cl, closed_loop_step(cl, y_t)) - v_value(cl, y_t)


def softmax_vjp(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Backprop through softmax given its output p: p * (g - <p, g>)."""
    return p * (g - np.sum(p * g, axis=-1, keepdims=True))


def condition_values_and_grads(cl: ClosedLoop, xs: np.ndarray):
    """Batched V, delta-V, and their input gradients (for the falsifier)."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    n = len(xs)
    u, cache_c = mlp_forward(cl.controller, xs)
    p = cl.plant.predict_proba(u)
    v_all, cache_v = mlp_forward(cl.lyapunov, np.vstack([xs, p]))
    _, gx = mlp_backward(cl.lyapunov, cache_v, np.ones((2 * n, 1)))
    grad_v = gx[:n]
    gp = gx[n:]
    gl = softmax_vjp(p, gp)
    gu = cl.plant.gain * (gl @ cl.plant.weight.T)
    _, grad_next = mlp_backward(cl.controller, cache_c, gu)
    v = v_all[:n, 0]
    dv = v_all[n:, 0] - v
    return v, dv, grad_v, grad_next - grad_v


def lyapunov_loss(cl: ClosedLoop, batch: np.ndarray, lambda_eq: float):
    """Hinge training loss and its gradients for controller and V nets.

    loss = mean_i[ relu(-V(y_i)) + relu(dV(y_i)) ] + V(Y)^2
           + lambda_eq * ||step(Y) - Y||^2

    The plant is frozen: gradients flow to the controller through the plant
    logits and softmax, and to the V net directly. Hinge subgradient at the
    kink is taken as 0 (strict-side indicators).
    """
    ys = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if ys.size == 0:
        raise ValidationError("empty batch")
    n = len(ys)
    y_eq = cl.equilibrium

    xs_c = np.vstack([ys, y_eq])
    u, cache_c = mlp_forward(cl.controller, xs_c)
    p = cl.plant.predict_proba(u)
    p_batch, p_eq = p[:n], p[n]

    xs_v = np.vstack([ys, p_batch, y_eq])
    v_all, cache_v = mlp_forward(cl.lyapunov, xs_v)
    v_cur = v_all[:n, 0]
    v_next = v_all[n:2 * n, 0]
    v_eq = v_all[2 * n, 0]
    dv = v_next - v_cur
    eq_res = p_eq - y_eq

    loss = float(np.mean(np.maximum(-v_cur, 0.0) + np.maximum(dv, 0.0))
                 + v_eq ** 2 + lambda_eq * np.sum(eq_res ** 2))

    g_vcur = (-(v_cur < 0).astype(float) - (dv > 0).astype(float)) / n
    g_vnext = (dv > 0).astype(float) / n
    upstream_v = np.concatenate([g_vcur, g_vnext, [2.0 * v_eq]])[:, None]
    phi_grads, gx_v = mlp_backward(cl.lyapunov, cache_v, upstream_v)

    gp = np.vstack([gx_v[n:2 * n], 2.0 * lambda_eq * eq_res])
    gl = softmax_vjp(p, gp)
    gu = cl.plant.gain * (gl @ cl.plant.weight.T)
    theta_grads, _ = mlp_backward(cl.controller, cache_c, gu)

    return loss, theta_grads, phi_grads


def mlp_to_json(m: Mlp) -> dict:
    return {
        "dims": m.dims,
        "layers": [{"weight": matrix_to_fragment(w), "bias": b.tolist()}
                   for w, b in m.layers],
    }


def mlp_from_json(payload: dict) -> Mlp:
    try:
        layers = [(matrix_from_fragment(layer["weight"]),
                   np.asarray(layer["bias"], dtype=np.float64))
                  for layer in payload["layers"]]
        m = Mlp(layers)
        if m.dims != list(payload["dims"]):
            raise ValidationError("dims metadata does not match layer shapes")
    except (KeyError, ValueError, TypeError) as exc:
        raise ValidationError(f"corrupt network checkpoint: {exc}") from exc
    return m


def save_mlp(m: Mlp, path) -> None:
    Path(path).write_text(json.dumps(mlp_to_json(m), sort_keys=True) + "\n")


def load_mlp(path) -> Mlp:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"corrupt network checkpoint {path}: {exc}") from exc
    return mlp_from_json(payload)
