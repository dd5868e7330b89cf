import numpy as np
import pytest

from stmdeim.fem import build_box_mesh, heat_data, heat_mesh, stokes_data, stokes_mesh
from stmdeim.fem.problems import ParametricData
from stmdeim.hypermatrix import Hypermatrix, spacetime_norm
from stmdeim.strb import (
    RomModel,
    StateBasis,
    StrbError,
    _operator_coefficients,
    build_hyper_reduction,
    build_rom,
    build_state_basis,
    enrich_supremizers,
    galerkin_compress,
    online_solve,
    online_solve_stokes,
    reduced_lhs,
)
from stmdeim.timeloop import HeatFOM, StokesFOM, generate_snapshots

METHODS = ["STD", "ST", "FUN", "STFUN"]


@pytest.fixture(scope="module")
def toy():
    mesh = build_box_mesh((1.0, 1.0, 0.5), (3, 2, 1), {"x0": "dirichlet", "y0": "neumann"})
    fom = HeatFOM(mesh, heat_data(T=0.3, n_steps=6))
    assert fom.n_space <= 30 and fom.n_time <= 8
    params = np.random.default_rng(0).uniform(1, 10, size=(12, 3))
    return fom, params, generate_snapshots(fom, params, n_operator=12)


def explicit_hyper_reduced(fom, rom, mu):
    """Dense K_st and L_st with the interpolated operator and RHS in place of the exact ones."""
    r = online_solve(rom, fom, mu)
    A = rom.op.reconstruct(r.op_coefficients)
    L = rom.rhs.reconstruct(r.rhs_coefficients)
    M, d, Nt = fom.mass.toarray(), fom.delta, fom.n_time
    Ns = fom.n_space
    K = np.zeros((Ns * Nt, Ns * Nt))
    for n in range(Nt):
        blk = slice(n * Ns, (n + 1) * Ns)
        K[blk, blk] = M / d + fom.asm.operator_matrix(A[:, n]).toarray()
        if n:
            K[blk, slice((n - 1) * Ns, n * Ns)] = -M / d
    return K, L.ravel(order="F"), r


def test_basis_orthonormality(toy):
    fom, _, snaps = toy
    b = build_state_basis(snaps.states, 1e-3, fom.norm)
    np.testing.assert_allclose(b.space.T @ (fom.norm.apply(b.space)), np.eye(b.n_s), atol=1e-9)
    np.testing.assert_allclose(b.time.T @ b.time, np.eye(b.n_t), atol=1e-10)
    assert b.n_st == b.n_s * b.n_t


def test_steady_single_parameter_is_rank_one():
    v = np.linspace(1.0, 2.0, 7)
    H = Hypermatrix(np.repeat(v[:, None, None], 5, axis=1), ("s", "t", "m"))
    b = build_state_basis(H, 1e-6, None)
    assert (b.n_s, b.n_t) == (1, 1)


def test_training_reconstruction_within_corollary(toy):
    fom, _, snaps = toy
    b = build_state_basis(snaps.states, 1e-3, fom.norm)
    assert b.meta["certified"]
    assert b.meta["error2"] <= b.meta["corollary2"]


def test_rank_monotone_in_eps(toy):
    fom, _, snaps = toy
    ranks = [build_state_basis(snaps.states, e, fom.norm).n_s for e in (1e-1, 1e-2, 1e-3, 1e-4)]
    assert ranks == sorted(ranks)


@pytest.mark.parametrize("method", METHODS)
def test_reduced_lhs_matches_dense_projection(toy, method):
    fom, params, snaps = toy
    rom = build_rom(fom, snaps, method, 1e-3)
    Phi_st = np.kron(rom.u.time, rom.u.space)
    for mu in params[:2]:
        K, L, r = explicit_hyper_reduced(fom, rom, mu)
        dense = Phi_st.T @ K @ Phi_st
        assert np.linalg.norm(r.lhs - dense) <= 1e-10 * np.linalg.norm(dense)
        np.testing.assert_allclose(r.rhs, Phi_st.T @ L, rtol=1e-10, atol=1e-12 * np.linalg.norm(L))
        # Galerkin orthogonality against the interpolated full system
        gal = Phi_st.T @ (L - K @ (Phi_st @ r.reduced.ravel(order="F")))
        assert np.linalg.norm(gal) <= 1e-9 * np.linalg.norm(Phi_st.T @ L)


def test_no_truncation_matches_fom(toy):
    fom, params, snaps = toy
    for method in ("STD", "ST"):
        rom = build_rom(fom, snaps, method, 1e-12)
        mu = params[3]
        U = fom.solve(mu)
        r = online_solve(rom, fom, mu)
        err = spacetime_norm(U - r.U, fom.norm, fom.delta) / spacetime_norm(U, fom.norm, fom.delta)
        assert err <= 1e-8


def test_affine_operator_std_and_st_agree():
    base = heat_data(T=0.3, n_steps=5)
    data = ParametricData(alpha=lambda x, t, mu: np.full(len(x), mu[0]), f=base.f, g=base.g, h=base.h, u0=base.u0,
                          bounds=base.bounds, T=base.T, n_steps=5)
    fom = HeatFOM(build_box_mesh((1.0, 1.0, 0.5), (3, 2, 1), {"x0": "dirichlet", "y0": "neumann"}), data)
    params = np.random.default_rng(1).uniform(1, 10, size=(6, 3))
    snaps = generate_snapshots(fom, params)
    ub = build_state_basis(snaps.states, 1e-4, fom.norm)
    roms = [build_rom(fom, snaps, m, 1e-4, u_basis=ub) for m in ("STD", "ST")]
    assert roms[0].op.n_space == 1 and roms[1].op.n_coefficients == 1
    mu = np.array([4.0, 2.0, 8.0])
    K = [reduced_lhs(r, *_operator_coefficients(r, fom, mu)) for r in roms]
    np.testing.assert_allclose(K[0], K[1], rtol=1e-11, atol=1e-11 * np.abs(K[0]).max())


def test_expansion_matches_kronecker_oracle(toy):
    fom, _, snaps = toy
    b = build_state_basis(snaps.states, 1e-3, fom.norm)
    C = np.random.default_rng(2).standard_normal((b.n_s, b.n_t))
    np.testing.assert_allclose(b.expand(C).ravel(order="F"), np.kron(b.time, b.space) @ C.ravel(order="F"),
                               atol=1e-12)
    n = 3
    np.testing.assert_allclose(b.expand(C)[:, n], b.space @ (C @ b.time[n]), atol=1e-12)


def test_counters_and_cost_ordering(toy):
    fom, params, snaps = toy
    ub = build_state_basis(snaps.states, 1e-3, fom.norm)
    counts = {}
    for m in ("STD", "ST"):
        rom = build_rom(fom, snaps, m, 1e-3, u_basis=ub)
        r = online_solve(rom, fom, params[0])
        counts[m] = r.counters
        assert r.counters["reduced_dim"] == ub.n_st
    # space-only variants sample every time step
    assert counts["STD"]["entries_sampled"] == counts["STD"]["coefficient_dim"]
    assert counts["ST"]["entries_sampled"] <= counts["STD"]["entries_sampled"]


def test_model_persistence(tmp_path, toy):
    fom, params, snaps = toy
    rom = build_rom(fom, snaps, "STFUN", 1e-3)
    rom.save(tmp_path / "m")
    back = RomModel.load(tmp_path / "m", expected_hash=fom.config_hash())
    a, b = online_solve(rom, fom, params[1]), online_solve(back, fom, params[1])
    np.testing.assert_array_equal(a.U, b.U)
    with pytest.raises(StrbError):
        RomModel.load(tmp_path / "m", expected_hash="f" * 16)


def test_configuration_mismatch_rejected(toy):
    fom, params, snaps = toy
    rom = build_rom(fom, snaps, "STD", 1e-2)
    other = HeatFOM(build_box_mesh((1.0, 1.0, 0.5), (3, 2, 1), {"x0": "dirichlet"}), heat_data(T=0.3, n_steps=6))
    with pytest.raises(StrbError):
        online_solve(rom, other, params[0])


def test_accuracy_weakly_monotone_in_eps():
    fom = HeatFOM(heat_mesh((8, 3, 2)), heat_data(n_steps=10))
    rng = np.random.default_rng(4)
    snaps = generate_snapshots(fom, rng.uniform(1, 10, size=(15, 3)))
    test = rng.uniform(1, 10, size=(2, 3))
    ref = [fom.solve(mu) for mu in test]

    def error(eps):
        rom = build_rom(fom, snaps, "ST", eps)
        return np.mean([spacetime_norm(U - online_solve(rom, fom, mu).U, fom.norm, fom.delta)
                        / spacetime_norm(U, fom.norm, fom.delta) for mu, U in zip(test, ref)])

    assert error(1e-2) >= 0.9 * error(1e-4)


# -- Stokes ------------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_stokes():
    fom = StokesFOM(stokes_mesh((4, 2, 1)), stokes_data(n_steps=4))
    params = np.random.default_rng(0).uniform(1, 10, size=(8, 3))
    return fom, params, generate_snapshots(fom, params)


def test_supremizers_empty_pressure_basis(toy_stokes):
    fom, _, snaps = toy_stokes
    ub = build_state_basis(snaps.states, 1e-3, fom.norm)
    assert enrich_supremizers(ub, None, fom.divergence, fom.norm) is ub
    empty = StateBasis(np.zeros((fom.n_pressure, 0)), np.zeros((fom.n_time, 0)))
    assert enrich_supremizers(ub, empty, fom.divergence, fom.norm) is ub


def test_one_pressure_mode_adds_one_supremizer(toy_stokes):
    fom, _, snaps = toy_stokes
    ub = build_state_basis(snaps.states, 1e-2, fom.norm)
    pb = build_state_basis(snaps.pressure, 1e-2, fom.pressure_norm)
    one = StateBasis(pb.space[:, :1], pb.time[:, :1])
    eb = enrich_supremizers(ub, one, fom.divergence, fom.norm)
    sup = fom.norm.solve(fom.divergence.T @ one.space[:, 0])
    in_span = np.linalg.matrix_rank(np.column_stack([ub.space, sup]), tol=1e-10) == ub.n_s
    assert eb.n_s == ub.n_s + (0 if in_span else 1)
    np.testing.assert_allclose(eb.space.T @ fom.norm.apply(eb.space), np.eye(eb.n_s), atol=1e-9)
    np.testing.assert_allclose(eb.time.T @ eb.time, np.eye(eb.n_t), atol=1e-10)


def test_supremizers_restore_conditioning(toy_stokes):
    fom, params, snaps = toy_stokes
    worst_plain, worst_enriched = 0.0, 0.0
    for eps in (1e-2, 1e-3, 1e-4):
        ub = build_state_basis(snaps.states, eps, fom.norm)
        pb = build_state_basis(snaps.pressure, eps, fom.pressure_norm)
        op, rhs, rp = build_hyper_reduction(fom, snaps, "FUN", eps)
        for basis in (ub, enrich_supremizers(ub, pb, fom.divergence, fom.norm)):
            rom = galerkin_compress(fom, basis, op, rhs, "FUN", eps, pb, rp)
            c = np.linalg.cond(reduced_lhs(rom, *_operator_coefficients(rom, fom, params[0])))
            if basis is ub:
                worst_plain = max(worst_plain, c)
            else:
                worst_enriched = max(worst_enriched, c)
    assert worst_plain > 1e12
    assert worst_enriched < 1e8


def test_stokes_no_truncation_matches_fom(toy_stokes):
    fom, params, snaps = toy_stokes
    for method in ("FUN", "STFUN"):
        rom = build_rom(fom, snaps, method, 1e-12)
        mu = params[2]
        U, P = fom.solve(mu)
        r = online_solve_stokes(rom, fom, mu)
        assert np.linalg.norm(r.U - U) <= 1e-7 * np.linalg.norm(U)
        assert np.linalg.norm(r.P - P) <= 1e-7 * np.linalg.norm(P)


def test_stokes_reduced_divergence_consistency(toy_stokes):
    fom, params, snaps = toy_stokes
    rom = build_rom(fom, snaps, "STFUN", 1e-3)
    r = online_solve_stokes(rom, fom, params[5])
    u = r.reduced.ravel(order="F")
    nu = rom.u.n_st
    div = r.lhs[nu:, :nu] @ u - r.rhs[nu:]
    assert np.linalg.norm(div) <= 1e-8 * max(np.linalg.norm(u), 1.0)


def test_stokes_zero_data_gives_zero(toy_stokes):
    fom, params, snaps = toy_stokes
    rom = build_rom(fom, snaps, "FUN", 1e-3)
    d = fom.data
    zero = ParametricData(alpha=d.alpha, f=d.f, h=d.h, u0=d.u0, g=lambda x, t, mu: np.zeros((len(x), 3)),
                          bounds=d.bounds, T=d.T, n_steps=d.n_steps, vector=True, name=d.name)
    zfom = StokesFOM(fom.mesh, zero)
    r = online_solve_stokes(rom, zfom, params[0])
    assert not np.any(r.reduced) and not np.any(r.reduced_p)


def test_heat_model_rejects_stokes_entry(toy):
    fom, params, snaps = toy
    with pytest.raises(StrbError):
        online_solve_stokes(build_rom(fom, snaps, "STD", 1e-2), fom, params[0])
