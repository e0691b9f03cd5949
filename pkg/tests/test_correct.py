import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arannot.correct import (CorrectionParams, CorrectionSystem, apply_operator, build_correction_system,
                             correct_stack, forward_gradient, gradient_adjoint, objective, screened_poisson_solve)
from arannot.volume import Stack
from oracles import dense_screened_poisson


def random_system(rng, h=32, w=32):
    return CorrectionSystem(rng.normal(0, 0.1, (h, w - 1)), rng.normal(0, 0.1, (h - 1, w)), rng.random((h, w)))


def test_constant_slice_system():
    s = Stack(np.stack([np.full((6, 5), 0.3), np.full((6, 5), 0.7)]))
    sys = build_correction_system(s, 0)
    assert not sys.gx.any() and not sys.gy.any()
    assert np.allclose(sys.v, 0.5)
    assert np.allclose(build_correction_system(s, 1).v, 0.5)


def test_gradients_are_forward_differences(rng):
    img = rng.random((16, 16))
    sys = build_correction_system(Stack(img[None]), 0)
    for y in range(16):
        for x in range(15):
            assert sys.gx[y, x] == img[y, x + 1] - img[y, x]
    for y in range(15):
        for x in range(16):
            assert sys.gy[y, x] == img[y + 1, x] - img[y, x]


def test_adjoint_identity(rng):
    u = rng.random((7, 9))
    gx, gy = rng.random((7, 8)), rng.random((6, 9))
    dx, dy = forward_gradient(u)
    assert np.vdot(dx, gx) + np.vdot(dy, gy) == pytest.approx(np.vdot(u, gradient_adjoint(gx, gy)))


def test_matches_dense_solve(rng):
    sys = random_system(rng)
    res = screened_poisson_solve(sys, CorrectionParams(alpha=0.05))
    assert res.converged
    assert np.abs(res.u - dense_screened_poisson(sys.gx, sys.gy, sys.v, 0.05)).max() <= 1e-6


def test_consistent_system_recovers_field(rng):
    u_star = rng.random((32, 32))
    res = screened_poisson_solve(CorrectionSystem(*forward_gradient(u_star), u_star))
    assert np.sqrt(np.mean((res.u - u_star) ** 2)) <= 1e-6


def test_constant_solution():
    v = np.full((8, 8), 0.42)
    res = screened_poisson_solve(CorrectionSystem(np.zeros((8, 7)), np.zeros((7, 8)), v))
    assert np.allclose(res.u, 0.42)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.01, 0.05, 0.5]))
def test_residual_monotone(seed, alpha):
    sys = random_system(np.random.default_rng(seed), 16, 20)
    res = screened_poisson_solve(sys, CorrectionParams(alpha=alpha))
    r = np.array(res.residuals)
    assert np.all(np.diff(r) <= 1e-15 * r[:-1] + 0.0)


def test_iteration_cap_reports_not_converged(rng, caplog):
    res = screened_poisson_solve(random_system(rng), CorrectionParams(max_iter=2))
    assert not res.converged and res.iterations == 2 and res.final_residual > 1e-8


def test_transpose_invariance(rng):
    sys = random_system(rng, 20, 24)
    a = screened_poisson_solve(sys).u
    b = screened_poisson_solve(CorrectionSystem(sys.gy.T.copy(), sys.gx.T.copy(), sys.v.T.copy())).u
    assert np.abs(a - b.T).max() <= 1e-9


def test_flip_invariance(rng):
    sys = random_system(rng, 20, 24)
    a = screened_poisson_solve(sys).u
    flipped = CorrectionSystem(-sys.gx[:, ::-1].copy(), sys.gy[:, ::-1].copy(), sys.v[:, ::-1].copy())
    assert np.abs(a - screened_poisson_solve(flipped).u[:, ::-1]).max() <= 1e-9


def test_energy_optimality(rng):
    sys = random_system(rng)
    u = screened_poisson_solve(sys).u
    base = objective(u, sys, 0.05)
    for _ in range(100):
        y, x = rng.integers(0, 32, 2)
        for eps in (1e-3, -1e-3):
            w = u.copy()
            w[y, x] += eps
            assert objective(w, sys, 0.05) >= base - 1e-12


def test_operator_spd(rng):
    u = rng.random((5, 6))
    assert np.vdot(u, apply_operator(u, 0.05)) > 0


def test_constant_stack_flattens():
    s = Stack(np.stack([np.full((8, 8), c) for c in (0.2, 0.5, 0.8)]))
    out, report = correct_stack(s)
    assert np.abs(out.data - 0.5).max() <= 1e-8
    assert [e["z"] for e in report["slices"]] == [0, 1, 2]


def test_single_slice_identity(rng):
    s = Stack(rng.random((1, 16, 16)))
    out, _ = correct_stack(s)
    assert np.abs(out.data - s.data).max() <= 1e-7


def test_idempotent(default_phantom):
    stack = Stack(default_phantom[0].data[:4, :96, :96])
    once, _ = correct_stack(stack)
    twice, _ = correct_stack(once)
    assert np.abs(twice.data - once.data).max() <= 10 * CorrectionParams().tol


def test_slice_means_align(default_phantom):
    data = default_phantom[0].data[:6].copy()
    data[3] = np.clip(data[3] + 0.15, 0, 1)
    out, report = correct_stack(Stack(data))
    m = report["global_mean"]
    assert all(abs(e["mean_after"] - m) <= 1e-3 for e in report["slices"])


def test_parallel_identical(rng):
    s = Stack(rng.random((4, 16, 16)))
    assert np.array_equal(correct_stack(s, workers=1)[0].data, correct_stack(s, workers=4)[0].data)
