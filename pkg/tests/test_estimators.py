import numpy as np
import pytest

from stmdeim.estimators import (
    EstimatorError,
    bound_terms,
    coercivity_constant,
    coercivity_estimate,
    fit_functional_constant,
    hyper_reduced_residual,
    relative_errors,
    residual_estimator,
    speedup,
    splitting_terms,
)
from stmdeim.fem import build_box_mesh, heat_data
from stmdeim.fem.problems import ParametricData
from stmdeim.hypermatrix import NormMatrix, spacetime_norm
from stmdeim.strb import build_rom, online_solve
from stmdeim.timeloop import HeatFOM, generate_snapshots

MESH = dict(lengths=(1.0, 1.0, 0.5), divisions=(3, 2, 1), tag_rules={"x0": "dirichlet", "y0": "neumann"})


@pytest.fixture(scope="module")
def toy():
    fom = HeatFOM(build_box_mesh(**MESH), heat_data(T=0.3, n_steps=6))
    rng = np.random.default_rng(0)
    train, test = rng.uniform(1, 10, size=(12, 3)), rng.uniform(1, 10, size=(3, 3))
    return fom, train, test, generate_snapshots(fom, train)


def dense_xst(fom):
    return fom.delta * np.kron(np.eye(fom.n_time), fom.norm.dense())


def test_residual_vanishes_without_truncation(toy):
    fom, train, _, snaps = toy
    rom = build_rom(fom, snaps, "STD", 1e-12)
    r = online_solve(rom, fom, train[0])
    ref = spacetime_norm(fom.rhs_snapshots(train[0]), fom.norm, fom.delta, "X_inverse")
    assert residual_estimator(fom, rom, train[0], r) <= 1e-8 * ref


def test_residual_of_zero_state_is_rhs_norm(toy):
    fom, _, test, snaps = toy
    rom = build_rom(fom, snaps, "ST", 1e-3)
    r = online_solve(rom, fom, test[0])
    R = hyper_reduced_residual(fom, rom, r, U=np.zeros_like(r.U))
    np.testing.assert_allclose(R, rom.rhs.reconstruct(r.rhs_coefficients), atol=1e-14)


@pytest.mark.parametrize("method", ["STD", "STFUN"])
def test_residual_matches_dense_oracle(toy, method):
    fom, _, test, snaps = toy
    rom = build_rom(fom, snaps, method, 1e-3)
    r = online_solve(rom, fom, test[1])
    r.U = np.random.default_rng(1).standard_normal(r.U.shape)
    A = rom.op.reconstruct(r.op_coefficients)
    L = rom.rhs.reconstruct(r.rhs_coefficients).ravel(order="F")
    Ns, Nt, d = fom.n_space, fom.n_time, fom.delta
    M = fom.mass.toarray()
    K = np.zeros((Ns * Nt, Ns * Nt))
    for n in range(Nt):
        b = slice(n * Ns, (n + 1) * Ns)
        K[b, b] = M / d + fom.asm.operator_matrix(A[:, n]).toarray()
        if n:
            K[b, slice((n - 1) * Ns, n * Ns)] = -M / d
    res = L - K @ r.U.ravel(order="F")
    dense = np.sqrt(res @ np.linalg.solve(dense_xst(fom), res))
    assert residual_estimator(fom, rom, test[1], r) == pytest.approx(dense, rel=1e-9)


def test_coercivity_identity_and_homogeneity():
    rng = np.random.default_rng(2)
    B = rng.standard_normal((6, 6))
    X = B @ B.T + 6 * np.eye(6)
    assert coercivity_constant(X, X) == pytest.approx(1.0, rel=1e-12)
    K = X + rng.standard_normal((6, 6))
    assert coercivity_constant(3.5 * K, X) == pytest.approx(3.5 * coercivity_constant(K, X), rel=1e-12)


def test_coercivity_matches_cholesky_oracle(toy):
    fom, _, test, _ = toy
    K = fom.spacetime_matrix(test[0]).toarray()
    H = np.sqrt(fom.delta) * np.kron(np.eye(fom.n_time), fom.norm.factor)
    Hi = np.linalg.inv(H)
    oracle = np.linalg.svd(Hi.T @ K @ Hi, compute_uv=False).min()
    beta = coercivity_estimate(fom, test[0])
    assert beta > 0
    assert beta == pytest.approx(oracle, rel=1e-9)


def test_coercivity_size_cap():
    fom = HeatFOM(build_box_mesh((1, 1, 1), (6, 6, 2), {"x0": "dirichlet"}), heat_data(n_steps=10))
    with pytest.raises(EstimatorError):
        coercivity_estimate(fom, [2.0, 2.0, 2.0])


def test_relative_errors_limits():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((5, 4)) @ np.diag([1, 2, 3, 4])
    X = NormMatrix(np.diag([1.0, 2.0, 3.0, 4.0, 5.0]))
    assert relative_errors([A], [A], X, 0.1)[0] == 0.0
    assert relative_errors([A], [np.zeros_like(A)], X, 0.1)[0] == pytest.approx(1.0)
    P = A.copy()
    P[0, 0] += 0.25
    ratio = 0.25 * np.sqrt(0.1 * 1.0) / np.sqrt(0.1 * np.sum(np.diag([1, 2, 3, 4, 5]) @ A ** 2))
    assert relative_errors([A], [P], X, 0.1)[0] == pytest.approx(ratio, rel=1e-12)
    Eu, Ep = relative_errors([A], [A], X, 0.1, hf_p=[A], rom_p=[0 * A], X_p=None)
    assert Ep == pytest.approx(1.0)
    with pytest.raises(EstimatorError):
        relative_errors([A], [A[:, :2]], X, 0.1)
    with pytest.raises(EstimatorError):
        relative_errors([0 * A], [A], X, 0.1)


def test_speedup():
    assert speedup([3.0, 3.0], [3.0]) == 1.0
    assert speedup([100.0], [10.0]) == 10.0
    with pytest.raises(EstimatorError):
        speedup([], [1.0])


def test_affine_exact_mdeim_terms_vanish():
    base = heat_data(T=0.3, n_steps=4)
    data = ParametricData(alpha=lambda x, t, mu: np.full(len(x), mu[0]), f=lambda x, t, mu: np.full(len(x), mu[1]),
                          g=lambda x, t, mu: np.zeros(len(x)), h=lambda x, t, mu: np.zeros(len(x)),
                          u0=lambda x, t, mu: np.zeros(len(x)), bounds=base.bounds, T=base.T, n_steps=4)
    fom = HeatFOM(build_box_mesh(**MESH), data)
    snaps = generate_snapshots(fom, np.random.default_rng(4).uniform(1, 10, size=(5, 3)))
    rom = build_rom(fom, snaps, "STD", 1e-6)
    mu = np.array([3.0, 6.0, 1.0])
    rep = bound_terms(fom, rom, mu, online_solve(rom, fom, mu), measured=True)
    assert rep.mdeim_terms["operator"] <= 1e-12 * max(1.0, rep.residual_term)
    assert rep.mdeim_terms["e_L"] <= 1e-12 * np.linalg.norm(fom.rhs_snapshots(mu))


@pytest.mark.parametrize("method", ["STD", "ST", "FUN", "STFUN"])
def test_bound_covers_actual_error(toy, method):
    fom, train, test, snaps = toy
    rom = build_rom(fom, snaps, method, 1e-3)
    const = fit_functional_constant(rom.op, fom, train) if method in ("FUN", "STFUN") else None
    for mu in test:
        U = fom.solve(mu)
        r = online_solve(rom, fom, mu)
        rep = bound_terms(fom, rom, mu, r, beta=coercivity_estimate(fom, mu), functional_constant=const)
        actual = spacetime_norm(U - r.U, fom.norm, fom.delta)
        assert rep.beta_certified and rep.bound_total >= actual
        assert all(v >= 0 for v in rep.mdeim_terms.values())


def test_bound_scales_with_eps(toy):
    fom, _, test, snaps = toy
    mu = test[0]
    beta = coercivity_estimate(fom, mu)
    totals = []
    for eps in (1e-2, 1e-3, 1e-4):
        rom = build_rom(fom, snaps, "STD", eps)
        totals.append(bound_terms(fom, rom, mu, online_solve(rom, fom, mu), beta=beta).bound_total)
    for a, b in zip(totals, totals[1:]):
        assert 10 / 3 <= a / b <= 30


def test_functional_needs_constant(toy):
    fom, _, test, snaps = toy
    rom = build_rom(fom, snaps, "FUN", 1e-2)
    with pytest.raises(EstimatorError):
        bound_terms(fom, rom, test[0], online_solve(rom, fom, test[0]))


@pytest.mark.parametrize("method", ["ST", "FUN"])
def test_splitting_identity(toy, method):
    fom, _, test, snaps = toy
    rom = build_rom(fom, snaps, method, 1e-3)
    mu = test[2]
    r = online_solve(rom, fom, mu)
    E_M, E_RB = splitting_terms(fom, rom, mu, r)
    U = fom.solve(mu)
    K = fom.spacetime_matrix(mu)
    target = (K @ (U - r.U).ravel(order="F")).reshape(U.shape, order="F")
    np.testing.assert_allclose(E_M + E_RB, target, atol=1e-9 * np.abs(target).max())
