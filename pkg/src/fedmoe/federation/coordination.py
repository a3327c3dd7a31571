"""Conflict-coordinated update composition.

Given per-source parameter increments, pick the update inside a ball of
radius c * ||mean increment|| around the mean that maximizes the worst-case
inner product with the individual increments. The dual is a minimization
over simplex weights w of

    F(w) = <U_w, mean> + sqrt(phi) * ||U_w||,
    U_w = sum_m w_m * delta_m,   phi = c^2 * ||mean||^2,

solved by projected gradient descent on the simplex. The coordinated update
is then U* = mean + sqrt(phi) * U_w / ||U_w||, which sits exactly on the
ball boundary whenever U_w is nonzero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "CoordinationResult",
    "project_simplex",
    "solve_conflict_weights",
    "compose_coordinated_update",
    "coordinate",
    "objective",
]

MAX_ITERS = 200
POLISH_ITERS = 2000
STEP_SCALE = 0.1
CONVERGENCE_TOL = 1e-8
NORM_FLOOR = 1e-12


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {w : w >= 0, sum w = 1} (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    cond = u - css / ind > 0
    rho = int(np.nonzero(cond)[0][-1])
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


@dataclass
class CoordinationResult:
    weights: np.ndarray  # simplex weights, one per increment
    u_w: np.ndarray  # weighted combination of increments
    phi: float  # squared ball radius, c^2 ||mean||^2
    mean_delta: np.ndarray
    c: float
    iterations: int
    objective: float
    u_star: Optional[np.ndarray] = None  # set by compose_coordinated_update


def objective(weights: np.ndarray, deltas: np.ndarray, mean_delta: np.ndarray, c: float) -> float:
    """F(w) for a stacked (M, L) delta matrix."""
    u_w = deltas.T @ weights
    phi = (c * c) * float(mean_delta @ mean_delta)
    return float(u_w @ mean_delta + np.sqrt(phi) * np.linalg.norm(u_w))


def solve_conflict_weights(
    deltas: Sequence[np.ndarray], mean_delta: np.ndarray, c: float
) -> CoordinationResult:
    """Minimize F(w) over the simplex by projected gradient descent.

    Fixed budget of 200 iterations, step 0.1 / max_m ||delta_m||, stopping
    once the weight update falls below 1e-8 in the max norm, followed by a
    backtracking line-search phase that runs until the iterate stops moving.
    All-zero deltas short-circuit to the degenerate zero-update result.
    """
    if not 0.0 <= c < 1.0:
        raise ValueError(f"c must be in [0, 1), got {c}")
    if len(deltas) == 0:
        raise ValueError("need at least one increment")
    d = np.stack([np.asarray(x, dtype=np.float64).ravel() for x in deltas])  # (M, L)
    mean_delta = np.asarray(mean_delta, dtype=np.float64).ravel()
    if mean_delta.shape[0] != d.shape[1]:
        raise ValueError("mean increment length does not match the deltas")
    m = d.shape[0]

    gram = d @ d.T
    b = d @ mean_delta
    phi = (c * c) * float(mean_delta @ mean_delta)
    sqrt_phi = np.sqrt(phi)
    norms = np.sqrt(np.maximum(np.diag(gram), 0.0))
    max_norm = float(norms.max())

    w = np.full(m, 1.0 / m)
    if max_norm <= NORM_FLOOR:
        return CoordinationResult(
            weights=w, u_w=np.zeros_like(mean_delta), phi=phi, mean_delta=mean_delta,
            c=c, iterations=0, objective=0.0,
        )

    def grad(weights: np.ndarray) -> np.ndarray:
        gw = gram @ weights
        u_w_norm = np.sqrt(max(float(weights @ gw), 0.0))
        if u_w_norm <= NORM_FLOOR:
            return b  # drop the norm term's gradient at the kink
        return b + (sqrt_phi / u_w_norm) * gw

    step = STEP_SCALE / max_norm
    iterations = 0
    for _ in range(MAX_ITERS):
        iterations += 1
        w_new = project_simplex(w - step * grad(w))
        if float(np.abs(w_new - w).max()) < CONVERGENCE_TOL:
            w = w_new
            break
        w = w_new

    if m > 1:
        # Backtracking polish: the fixed-step pass can stall short of the
        # optimum on ill-conditioned instances, so continue with Armijo
        # line search until the iterate stops moving.
        best_w = w.copy()
        best_f = _value(w, gram, b, sqrt_phi)
        t = step
        for _ in range(POLISH_ITERS):
            iterations += 1
            g = grad(w)
            f0 = _value(w, gram, b, sqrt_phi)
            w_new = w
            f_new = f0
            for _bt in range(40):
                w_new = project_simplex(w - t * g)
                f_new = _value(w_new, gram, b, sqrt_phi)
                if f_new <= f0 - 1e-14 * max(1.0, abs(f0)) or np.array_equal(w_new, w):
                    break
                t *= 0.5
            moved = float(np.abs(w_new - w).max())
            w = w_new
            if f_new < best_f:
                best_f, best_w = f_new, w.copy()
            if moved < 1e-13:
                break
            t = min(t * 2.0, 1e6 * step)
        w = best_w

    u_w = d.T @ w
    return CoordinationResult(
        weights=w, u_w=u_w, phi=phi, mean_delta=mean_delta, c=c,
        iterations=iterations, objective=_value(w, gram, b, sqrt_phi),
    )


def _value(w: np.ndarray, gram: np.ndarray, b: np.ndarray, sqrt_phi: float) -> float:
    quad = max(float(w @ (gram @ w)), 0.0)
    return float(w @ b + sqrt_phi * np.sqrt(quad))


def compose_coordinated_update(result: CoordinationResult) -> np.ndarray:
    """U* = mean + sqrt(phi) / ||U_w|| * U_w; degenerate cases fall back to the mean."""
    u_w_norm = float(np.linalg.norm(result.u_w))
    if u_w_norm < NORM_FLOOR or result.phi == 0.0:
        u_star = result.mean_delta.copy()
    else:
        u_star = result.mean_delta + (np.sqrt(result.phi) / u_w_norm) * result.u_w
    result.u_star = u_star
    return u_star


def coordinate(deltas: Sequence[np.ndarray], c: float) -> CoordinationResult:
    """Solve and compose in one call; the mean increment is taken over ``deltas``."""
    d = [np.asarray(x, dtype=np.float64).ravel() for x in deltas]
    mean_delta = np.mean(np.stack(d), axis=0)
    result = solve_conflict_weights(d, mean_delta, c)
    compose_coordinated_update(result)
    return result
