"""Sound counterexample search and certification of the two stability conditions.

The closed loop contains a softmax, so exact piecewise-linear solving is out;
instead: interval bound propagation through controller -> plant -> V gives
sound enclosures of V and delta-V over a box, and branch-and-bound bisects
until every box is either provably safe, provably inside the excluded ball
around the target, or narrower than the resolution delta (then its center is
checked exactly). Absence of counterexamples is therefore a certificate at
resolution delta, not an exact proof.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InconclusiveError, ValidationError
from .neuralnet import ClosedLoop, condition_values_and_grads, mlp_forward

NON_POSITIVE_V = "NonPositiveV"
NON_DECREASING_V = "NonDecreasingV"

# memory guard: boxes are processed in slabs of at most this many
_CHUNK = 65536


@dataclass
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValidationError("box bounds must be matching vectors")
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise ValidationError("box bounds must be finite")
        if np.any(self.lower > self.upper):
            raise ValidationError("box lower bound exceeds upper bound")


def unit_box(dim: int) -> Box:
    return Box(np.zeros(dim), np.ones(dim))


@dataclass
class Counterexample:
    state: np.ndarray
    violation: str
    v_value: float
    delta_v_value: float

    def to_json(self) -> dict:
        return {
            "state": [float(s) for s in self.state],
            "violation": self.violation,
            "v": self.v_value,
            "dv": self.delta_v_value,
        }


@dataclass
class VerifierOutcome:
    verdict: str  # "certified" | "violations"
    boxes_processed: int
    resolved_at_delta: int
    counterexamples: list
    delta: float
    eps: float

    @property
    def certified(self) -> bool:
        return self.verdict == "certified"

    def to_report(self) -> dict:
        return {
            "verdict": self.verdict,
            "delta": self.delta,
            "eps": self.eps,
            "boxes_processed": self.boxes_processed,
            "resolved_at_delta": self.resolved_at_delta,
            "counterexamples": [ce.to_json() for ce in self.counterexamples],
        }


def interval_affine(lo: np.ndarray, hi: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Tight enclosure of x @ w + b over [lo, hi], center/radius form."""
    c = (lo + hi) * 0.5
    r = (hi - lo) * 0.5
    out_c = c @ w + b
    out_r = r @ np.abs(w)
    return out_c - out_r, out_c + out_r


def interval_relu(lo: np.ndarray, hi: np.ndarray):
    return np.maximum(lo, 0.0), np.maximum(hi, 0.0)


def interval_softmax(lo: np.ndarray, hi: np.ndarray):
    """Coordinatewise-exact softmax enclosure.

    softmax_i is increasing in logit i and decreasing in the others, so the
    extremes sit at box corners: upper_i = exp(hi_i)/(exp(hi_i)+sum_{j!=i}
    exp(lo_j)) and symmetrically for lower_i. Max-subtraction guards overflow.
    """
    m = np.max(hi, axis=-1, keepdims=True)
    e_hi = np.exp(hi - m)
    e_lo = np.exp(lo - m)
    s_hi = e_hi.sum(axis=-1, keepdims=True)
    s_lo = e_lo.sum(axis=-1, keepdims=True)
    upper = e_hi / (e_hi + np.maximum(s_lo - e_lo, 0.0))
    lower = e_lo / (e_lo + (s_hi - e_hi))
    return lower, upper


def _interval_mlp(m, lo: np.ndarray, hi: np.ndarray):
    last = len(m.layers) - 1
    for i, (w, b) in enumerate(m.layers):
        lo, hi = interval_affine(lo, hi, w, b)
        if i < last:
            lo, hi = interval_relu(lo, hi)
    return lo, hi


def _bound_conditions_batch(cl: ClosedLoop, lo: np.ndarray, hi: np.ndarray):
    """Per-box enclosures of V and delta-V; rows are independent boxes."""
    v_lo, v_hi = _interval_mlp(cl.lyapunov, lo, hi)
    u_lo, u_hi = _interval_mlp(cl.controller, lo, hi)
    w_eff = cl.plant.gain * cl.plant.weight
    l_lo, l_hi = interval_affine(u_lo, u_hi, w_eff, cl.plant.offset)
    p_lo, p_hi = interval_softmax(l_lo, l_hi)
    vn_lo, vn_hi = _interval_mlp(cl.lyapunov, p_lo, p_hi)
    # difference of independent enclosures: sound, not tight
    dv_lo = vn_lo - v_hi
    dv_hi = vn_hi - v_lo
    return v_lo[..., 0], v_hi[..., 0], dv_lo[..., 0], dv_hi[..., 0]


def bound_conditions(cl: ClosedLoop, box: Box):
    """Sound [lo, hi] enclosures of V(x) and delta-V(x) for all x in box."""
    v_lo, v_hi, dv_lo, dv_hi = _bound_conditions_batch(
        cl, box.lower[None, :], box.upper[None, :])
    return (float(v_lo[0]), float(v_hi[0])), (float(dv_lo[0]), float(dv_hi[0]))


def _values_batch(cl: ClosedLoop, xs: np.ndarray):
    """Exact V and delta-V for a batch of states (forward passes only)."""
    n = len(xs)
    u, _ = mlp_forward(cl.controller, xs)
    p = cl.plant.predict_proba(u)
    v_all, _ = mlp_forward(cl.lyapunov, np.vstack([xs, p]))
    v = v_all[:n, 0]
    return v, v_all[n:, 0] - v


def check_state(cl: ClosedLoop, x: np.ndarray, eps: float):
    """Violation tag for one state, or None.

    States within eps of the equilibrium are excluded. A non-positive V takes
    precedence over a non-decreasing delta-V when both hold.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.linalg.norm(x - cl.equilibrium) < eps:
        return None
    v, dv = _values_batch(cl, x[None, :])
    if v[0] <= 0.0:
        return NON_POSITIVE_V
    if dv[0] >= 0.0:
        return NON_DECREASING_V
    return None


def _counterexamples_from(cl, xs, v, dv, eps, limit):
    """Build tagged counterexamples for already-confirmed violating rows."""
    out = []
    for x, vi, dvi in zip(xs, v, dv):
        tag = NON_POSITIVE_V if vi <= 0.0 else NON_DECREASING_V
        out.append(Counterexample(state=np.array(x), violation=tag,
                                  v_value=float(vi), delta_v_value=float(dvi)))
        if len(out) >= limit:
            break
    return out


def falsify_gradient(cl: ClosedLoop, d: Box, eps: float, restarts: int = 16,
                     steps: int = 60, step_size: float = 0.05, seed=0):
    """Projected gradient ascent on max(-V, delta-V) outside the eps-ball.

    Cheap first-line search before branch-and-bound. Every candidate is
    re-verified by exact evaluation; returning None proves nothing.
    """
    if eps <= 0:
        raise ValidationError("eps must be positive")
    rng = np.random.default_rng(seed)
    xs = rng.uniform(d.lower, d.upper, size=(restarts, len(d.lower)))
    y_eq = cl.equilibrium

    for step in range(steps + 1):
        v, dv = _values_batch(cl, xs)
        dist = np.linalg.norm(xs - y_eq, axis=1)
        viol = (dist >= eps) & ((v <= 0.0) | (dv >= 0.0))
        if viol.any():
            i = int(np.flatnonzero(viol)[0])
            return _counterexamples_from(cl, xs[i:i + 1], v[i:i + 1], dv[i:i + 1],
                                         eps, 1)[0]
        if step == steps:
            break
        v, dv, g_v, g_dv = condition_values_and_grads(cl, xs)
        g = np.where((-v > dv)[:, None], -g_v, g_dv)
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        xs = xs + step_size * g / np.maximum(norms, 1e-12)
        xs = np.clip(xs, d.lower, d.upper)
        # radial push out of the excluded ball, then back into the domain
        delta_x = xs - y_eq
        dist = np.linalg.norm(delta_x, axis=1)
        inside = dist < eps
        if inside.any():
            degenerate = inside & (dist < 1e-12)
            if degenerate.any():
                k = int(np.argmin(y_eq))
                delta_x[degenerate] = 0.0
                delta_x[degenerate, k] = 1.0
                dist[degenerate] = 1.0
            scale = eps / dist[inside]
            xs[inside] = y_eq + delta_x[inside] * scale[:, None]
            xs = np.clip(xs, d.lower, d.upper)
    return None


def _process_layer(cl, lo, hi, y_eq, eps):
    """Classify one slab of boxes; pure function of its inputs."""
    far = np.sqrt(np.sum(np.maximum(np.abs(lo - y_eq), np.abs(hi - y_eq)) ** 2, axis=1))
    candidate = far >= eps  # otherwise the whole box sits inside the ball

    v_lo = np.full(len(lo), np.inf)
    dv_hi = np.full(len(lo), -np.inf)
    if candidate.any():
        vl, _, _, dh = _bound_conditions_batch(cl, lo[candidate], hi[candidate])
        v_lo[candidate] = vl
        dv_hi[candidate] = dh
    unsafe = candidate & ~((v_lo > 0.0) & (dv_hi < 0.0))

    centers = (lo + hi) * 0.5
    viol = np.zeros(len(lo), dtype=bool)
    v_c = np.zeros(len(lo))
    dv_c = np.zeros(len(lo))
    if unsafe.any():
        vc, dvc = _values_batch(cl, centers[unsafe])
        v_c[unsafe] = vc
        dv_c[unsafe] = dvc
        dist_c = np.linalg.norm(centers[unsafe] - y_eq, axis=1)
        viol[unsafe] = (dist_c >= eps) & ((vc <= 0.0) | (dvc >= 0.0))
    return unsafe, viol, centers, v_c, dv_c


def branch_and_bound(cl: ClosedLoop, d: Box, eps: float, delta: float,
                     max_ce: int = 32, max_boxes: int = 2_000_000,
                     threads: int = None) -> VerifierOutcome:
    """Breadth-first bisection with interval pruning.

    A box is dropped when it lies inside the excluded ball (farthest-corner
    test) or when its bounds prove V > 0 and delta-V < 0. Otherwise its center
    is evaluated exactly; violating centers become counterexamples (the box is
    not bisected further), and boxes wider than delta are split along their
    widest dimension. Deterministic: fixed ordering, ties to the lowest index.
    """
    if delta <= 0 or eps <= 0:
        raise ValidationError("delta and eps must be positive")
    if threads is None:
        threads = int(os.environ.get("LYAPCTL_THREADS", "1"))
    y_eq = cl.equilibrium

    lo = d.lower[None, :].copy()
    hi = d.upper[None, :].copy()
    boxes_processed = 0
    resolved_at_delta = 0
    ces = []

    while len(lo):
        if boxes_processed + len(lo) > max_boxes:
            raise InconclusiveError(
                f"box budget {max_boxes} exceeded",
                boxes_processed=boxes_processed,
                remaining_boxes=len(lo),
                counterexamples=ces,
            )
        boxes_processed += len(lo)

        chunks = [(lo[i:i + _CHUNK], hi[i:i + _CHUNK])
                  for i in range(0, len(lo), _CHUNK)]
        if threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(
                    lambda ch: _process_layer(cl, ch[0], ch[1], y_eq, eps), chunks))
        else:
            results = [_process_layer(cl, c_lo, c_hi, y_eq, eps)
                       for c_lo, c_hi in chunks]

        next_lo, next_hi = [], []
        for (c_lo, c_hi), (unsafe, viol, centers, v_c, dv_c) in zip(chunks, results):
            if viol.any() and len(ces) < max_ce:
                ces.extend(_counterexamples_from(
                    cl, centers[viol], v_c[viol], dv_c[viol], eps, max_ce - len(ces)))
            split = unsafe & ~viol
            if not split.any():
                continue
            width = c_hi[split] - c_lo[split]
            wide = width.max(axis=1) > delta
            resolved_at_delta += int((~wide).sum())
            if not wide.any():
                continue
            s_lo, s_hi = c_lo[split][wide], c_hi[split][wide]
            dim = np.argmax(s_hi - s_lo, axis=1)
            mid = (s_lo + s_hi) * 0.5
            rows = np.arange(len(s_lo))
            left_hi = s_hi.copy()
            left_hi[rows, dim] = mid[rows, dim]
            right_lo = s_lo.copy()
            right_lo[rows, dim] = mid[rows, dim]
            next_lo.extend([s_lo, right_lo])
            next_hi.extend([left_hi, s_hi])
        if len(ces) >= max_ce:
            break
        if next_lo:
            lo = np.concatenate(next_lo)
            hi = np.concatenate(next_hi)
        else:
            lo = np.empty((0, lo.shape[1]))
            hi = np.empty((0, hi.shape[1]))

    verdict = "violations" if ces else "certified"
    return VerifierOutcome(verdict=verdict, boxes_processed=boxes_processed,
                           resolved_at_delta=resolved_at_delta,
                           counterexamples=ces, delta=delta, eps=eps)


def audit_samples(cl: ClosedLoop, d: Box, eps: float, n_samples: int,
                  seed=0, tol: float = 1e-6) -> int:
    """Count condition violations beyond tol over uniform samples outside the ball."""
    rng = np.random.default_rng(seed)
    y_eq = cl.equilibrium
    accepted = 0
    violations = 0
    while accepted < n_samples:
        xs = rng.uniform(d.lower, d.upper, size=(min(32768, 4 * n_samples), len(d.lower)))
        xs = xs[np.linalg.norm(xs - y_eq, axis=1) >= eps]
        xs = xs[:n_samples - accepted]
        if len(xs) == 0:
            continue
        accepted += len(xs)
        v, dv = _values_batch(cl, xs)
        violations += int(np.sum((v < -tol) | (dv > tol)))
    return violations
