"""Gradient-domain contrast normalisation of stack slices.

Each slice is reconstructed from its own forward-difference gradients while a
weak screening term pulls it toward a copy of itself whose mean matches the
stack-wide mean.  The normal equations

    (alpha * I + D^T D) u = alpha * v + D^T g

are solved with the conjugate-residual variant of conjugate gradient, warm
started from ``v``.  ``D`` is the forward-difference operator, so ``D^T D`` is
the negative Neumann Laplacian.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .volume import Stack

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorrectionParams:
    alpha: float = 0.05
    tol: float = 1e-8
    max_iter: int | None = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValidationError("alpha must be > 0")
        if not 0 < self.tol < 1:
            raise ValidationError("tol must lie in (0, 1)")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValidationError("max_iter must be >= 1")

    def iteration_cap(self, shape: tuple[int, int]) -> int:
        if self.max_iter is not None:
            return self.max_iter
        return max(1000, math.ceil(10 * math.sqrt(shape[0] * shape[1])))


@dataclass(frozen=True, eq=False)
class CorrectionSystem:
    gx: np.ndarray  # (h, w-1)
    gy: np.ndarray  # (h-1, w)
    v: np.ndarray   # (h, w)

    def __post_init__(self):
        h, w = self.v.shape
        if self.gx.shape != (h, w - 1) or self.gy.shape != (h - 1, w):
            raise ValidationError(f"gradient shapes {self.gx.shape}/{self.gy.shape} do not match field {self.v.shape}")

    @property
    def shape(self):
        return self.v.shape


@dataclass
class SolveResult:
    u: np.ndarray
    iterations: int
    final_residual: float
    converged: bool
    residuals: list = field(default_factory=list)


def forward_gradient(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return u[:, 1:] - u[:, :-1], u[1:, :] - u[:-1, :]


def gradient_adjoint(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Apply ``D^T`` to a gradient field (the negative divergence)."""
    h, w = gy.shape[0] + 1, gx.shape[1] + 1
    out = np.zeros((h, w))
    out[:, 1:] += gx
    out[:, :-1] -= gx
    out[1:, :] += gy
    out[:-1, :] -= gy
    return out


def apply_operator(u: np.ndarray, alpha: float) -> np.ndarray:
    return alpha * u + gradient_adjoint(*forward_gradient(u))


def build_correction_system(stack: Stack, z: int, global_mean: float | None = None) -> CorrectionSystem:
    if not 0 <= z < stack.depth:
        raise ValidationError(f"slice index {z} outside 0..{stack.depth - 1}")
    image = stack[z]
    if global_mean is None:
        global_mean = float(stack.data.mean())
    gx, gy = forward_gradient(image)
    return CorrectionSystem(gx, gy, image - image.mean() + global_mean)


def screened_poisson_solve(sys: CorrectionSystem, params: CorrectionParams = CorrectionParams()) -> SolveResult:
    alpha = params.alpha
    b = alpha * sys.v + gradient_adjoint(sys.gx, sys.gy)
    bnorm = float(np.linalg.norm(b))
    u = np.array(sys.v, dtype=np.float64)
    if bnorm == 0.0:
        return SolveResult(np.zeros_like(b), 0, 0.0, True, [0.0])
    # Conjugate-residual form of CG: one operator application per step and a
    # residual norm that never increases (plain CG only guarantees this for the
    # energy norm of the error).
    r = b - apply_operator(u, alpha)
    p = r.copy()
    Ar = apply_operator(r, alpha)
    Ap = Ar.copy()
    rAr = float(np.vdot(r, Ar))
    residuals = [float(np.linalg.norm(r)) / bnorm]
    cap = params.iteration_cap(sys.shape)
    it = 0
    while residuals[-1] > params.tol and it < cap:
        if rAr <= 0.0:
            break
        step = rAr / float(np.vdot(Ap, Ap))
        u += step * p
        r -= step * Ap
        Ar = apply_operator(r, alpha)
        rAr_new = float(np.vdot(r, Ar))
        beta = rAr_new / rAr
        p = r + beta * p
        Ap = Ar + beta * Ap
        rAr = rAr_new
        it += 1
        residuals.append(float(np.linalg.norm(r)) / bnorm)
    converged = residuals[-1] <= params.tol
    if not converged:
        log.warning("CG stopped at max_iter=%d with relative residual %.3e", cap, residuals[-1])
    return SolveResult(u, it, residuals[-1], converged, residuals)


def objective(u: np.ndarray, sys: CorrectionSystem, alpha: float) -> float:
    gx, gy = forward_gradient(u)
    return float(alpha * ((u - sys.v) ** 2).sum() + ((gx - sys.gx) ** 2).sum() + ((gy - sys.gy) ** 2).sum())


def _solve_slice(args):
    stack, z, global_mean, params = args
    sys = build_correction_system(stack, z, global_mean)
    res = screened_poisson_solve(sys, params)
    return res.u, res.iterations, res.final_residual, res.converged


def correct_stack(stack: Stack, params: CorrectionParams = CorrectionParams(), workers: int = 1):
    """Return ``(corrected_stack, report)``; the report lists one entry per slice."""
    from .parallel import ordered_map

    global_mean = float(stack.data.mean())
    jobs = [(Stack(stack.data[z:z + 1], stack.dims), 0, global_mean, params) for z in range(stack.depth)]
    results = ordered_map(_solve_slice, jobs, workers)
    slices, report = [], []
    for z, (u, iterations, residual, converged) in enumerate(results):
        out = np.clip(u, 0.0, 1.0)
        slices.append(out)
        report.append({
            "z": z,
            "iterations": iterations,
            "final_residual": residual,
            "converged": converged,
            "mean_before": float(stack[z].mean()),
            "mean_after": float(out.mean()),
        })
    return Stack(np.stack(slices), stack.dims), {"global_mean": global_mean, "slices": report}
