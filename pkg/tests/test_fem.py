import itertools

import numpy as np
import pytest

from darcytopo.fem import (Assembler, ElementGeometry, GeometryError, compute_velocity,
                           element_jacobian, element_residual, stabilization_tau)
from darcytopo.materials import PhysicalParams
from darcytopo.mesh import build_grid, tag_regions
from darcytopo.problem import preset

PARAMS = PhysicalParams(alpha=1e4, Q=1e4, kappa_f=2e-3)


def unit_cube(scale=1.0):
    return scale * np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                             [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=float)


def distorted():
    c = unit_cube(0.1)
    c[6] += [0.012, -0.008, 0.01]
    c[1] += [0.004, 0.003, -0.002]
    return c


def naive_residual(coords, s, kappa, k, params, Q):
    """Straight loop-by-loop evaluation of the stabilized weak form."""
    p, t = s[:8], s[8:]
    xi_nodes = np.array(list(itertools.product([-1, 1], repeat=3)))[:, ::-1]
    order = [0, 1, 3, 2, 4, 5, 7, 6]      # tensor order -> counter-clockwise order
    xi_nodes = xi_nodes[order]

    def shape(xi):
        N = np.prod(1 + xi_nodes * xi, axis=1) / 8
        dN = np.empty((8, 3))
        for d in range(3):
            o = [e for e in range(3) if e != d]
            dN[:, d] = xi_nodes[:, d] * np.prod(1 + xi_nodes[:, o] * xi[o], axis=1) / 8
        J = coords.T @ dN
        return N, np.linalg.solve(J.T, dN.T), np.linalg.det(J)

    c = kappa / params.mu
    a = params.rho0 * params.alpha * np.array(params.gravity)
    N0, B0, _ = shape(np.zeros(3))
    u0 = -c * (B0 @ p + (N0 @ t) * a)
    h = np.linalg.norm(coords[6] - coords[0])
    tau = 1.0 / np.sqrt(4 * u0 @ u0 / h**2 + 16 / h**4)
    R = np.zeros(16)
    g = 1 / np.sqrt(3)
    for xi in itertools.product([-g, g], repeat=3):
        N, B, det = shape(np.array(xi))
        T = N @ t
        gradT = B @ t
        u = -c * (B @ p + T * a)
        for i in range(8):
            R[i] += det * c * B[:, i] @ (B @ p + T * a)
            w_star = N[i] + tau * u0 @ B[:, i]
            R[8 + i] += det * (w_star * (params.rho0 * params.cp * u @ gradT - Q)
                               + k * B[:, i] @ gradT)
    return R


def test_geometry_unit_cube():
    g = ElementGeometry.from_coords(unit_cube(0.5))
    assert g.volume == pytest.approx(0.125)
    assert np.allclose(g.N.sum(axis=1), 1.0)
    assert np.allclose(g.B.sum(axis=2), 0.0)
    assert g.h == pytest.approx(0.5 * np.sqrt(3))


def test_geometry_rejects_inverted():
    c = unit_cube()
    c[[0, 1]] = c[[1, 0]]
    with pytest.raises(GeometryError):
        ElementGeometry.from_coords(c)


def test_tau_formula():
    u0, h = np.array([0.3, -0.1, 2.0]), 0.05
    ref = (4 * (0.09 + 0.01 + 4.0) / h**2 + 16 / h**4) ** -0.5
    assert stabilization_tau(u0, h) == pytest.approx(ref, rel=1e-14)
    # diffusion limit
    assert stabilization_tau(np.zeros(3), h) == pytest.approx(h**2 / 4)
    assert stabilization_tau(np.zeros(3), 2.0) == pytest.approx(1.0)
    assert stabilization_tau(np.array([2.0, 0, 0]), 2.0) == pytest.approx(5**-0.5)
    # advection limit: tau -> h / (2 |u0|)
    assert stabilization_tau(np.array([0, 0, 1e3]), 1.0) / (1 / 2e3) == pytest.approx(1, rel=1e-2)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_element_residual_matches_naive_loop(seed):
    rng = np.random.default_rng(seed)
    s = np.concatenate([rng.normal(0, 50, 8), rng.normal(0, 0.5, 8)])
    R = element_residual(distorted(), s, 1.3e-3, 7.0, PARAMS, 1e4)
    ref = naive_residual(distorted(), s, 1.3e-3, 7.0, PARAMS, 1e4)
    assert np.allclose(R, ref, rtol=1e-11, atol=1e-11 * np.abs(ref).max())


@pytest.mark.parametrize("frozen", [False, True])
def test_element_jacobian_fd(frozen):
    rng = np.random.default_rng(3)
    s = np.concatenate([rng.normal(0, 50, 8), rng.normal(0, 0.5, 8)])
    J = element_jacobian(distorted(), s, 1.3e-3, 7.0, PARAMS, 1e4, frozen_tau=frozen)
    fd = np.empty((16, 16))
    for j in range(16):
        h = 1e-6 * max(1.0, abs(s[j]))
        sp, sm = s.copy(), s.copy()
        sp[j] += h
        sm[j] -= h
        fd[:, j] = (element_residual(distorted(), sp, 1.3e-3, 7.0, PARAMS, 1e4)
                    - element_residual(distorted(), sm, 1.3e-3, 7.0, PARAMS, 1e4)) / (2 * h)
    err = np.linalg.norm(J - fd) / np.linalg.norm(fd)
    if frozen:
        # freezing tau drops its state derivative: the exact check must fail,
        # the looser debugging tolerance must still hold
        assert 1e-8 < err < 1e-2
    else:
        assert err < 1e-6


def test_zero_state_gives_source_only():
    R = element_residual(unit_cube(0.1), np.zeros(16), 1e-3, 1.0, PARAMS, 2.0)
    assert np.allclose(R[:8], 0.0)
    # N* = N at u0 = 0, so each node gets -Q * vol / 8
    assert np.allclose(R[8:], -2.0 * 1e-3 / 8)


def test_hydrostatic_state_has_no_flow():
    mesh = build_grid(2, 2, 3, 1, 1, 1.5)
    T0 = 0.7
    z = mesh.node_coords()[:, 2]
    a = PARAMS.rho0 * PARAMS.alpha
    state = np.concatenate([a * T0 * z, np.full(mesh.n_nodes, T0)])
    u = compute_velocity(state, np.full(mesh.n_elements, 1e-3), mesh, PARAMS)
    assert np.abs(u).max() < 1e-9 * a * T0 * 1e-3


def test_hot_fluid_rises():
    mesh = build_grid(1, 1, 1, 1, 1, 1)
    state = np.concatenate([np.zeros(8), np.ones(8)])
    u = compute_velocity(state, np.array([1e-3]), mesh, PARAMS)[0]
    assert u[2] > 0 and abs(u[0]) < 1e-15 and abs(u[1]) < 1e-15


def test_linear_patch_test():
    # linear T and P with no coupling: interior residuals vanish
    params = PhysicalParams(alpha=0.0)
    spec = preset("cavity-diffusion", (3, 3, 3))
    mesh, tags = spec.build()
    asm = Assembler(mesh, tags, params.replace(Q=0.0))
    x = mesh.node_coords()
    state = np.concatenate([0 * x[:, 0], 0.3 * x[:, 0] - 0.2 * x[:, 2]])
    mat = asm.material(np.full(mesh.n_elements, 1e-3), np.full(mesh.n_elements, 2.0))
    R = asm.residual(state, mat).full_residual
    g = mesh.to_grid(R[mesh.n_nodes:])
    assert np.abs(g[1:-1, 1:-1, 1:-1]).max() < 1e-13


@pytest.fixture(scope="module")
def cavity_system():
    spec = preset("cavity-a1e3", (4, 4, 8))
    mesh, tags = spec.build()
    params = spec.physical_params()
    rng = np.random.default_rng(7)
    gamma = rng.uniform(0, 1, mesh.n_elements)
    kappa = 1e-5 + (1 - gamma) * (params.kappa_f - 1e-5)
    k = 1 + 99 * gamma
    return mesh, tags, params, kappa, k, rng


def test_global_jvp_matches_fd(cavity_system):
    mesh, tags, params, kappa, k, rng = cavity_system
    asm = Assembler(mesh, tags, params)
    mat = asm.material(kappa, k)
    for _ in range(3):
        s = np.concatenate([rng.normal(0, 20, mesh.n_nodes), rng.normal(0, 1, mesh.n_nodes)])
        v = rng.normal(size=s.size)
        J = asm.raw_jacobian(s, mat)
        h = 1e-6
        fd = (asm.residual(s + h * v, mat).full_residual
              - asm.residual(s - h * v, mat).full_residual) / (2 * h)
        assert np.linalg.norm(J @ v - fd) / np.linalg.norm(fd) < 1e-6


def test_objective_gradients_fd(cavity_system):
    mesh, tags, params, kappa, k, rng = cavity_system
    asm = Assembler(mesh, tags, params)
    mat = asm.material(kappa, k)
    s = np.concatenate([rng.normal(0, 20, mesh.n_nodes), rng.normal(0, 1, mesh.n_nodes)])
    f, dfds, dfdc = asm.objective_and_state_gradient(s, mat)
    v = rng.normal(size=s.size)
    h = 1e-6
    fd = (asm.compliance(s + h * v, mat) - asm.compliance(s - h * v, mat)) / (2 * h)
    assert dfds @ v == pytest.approx(fd, rel=1e-6)
    heat = np.flatnonzero(tags.heat)
    e = heat[0]
    kp, km = kappa.copy(), kappa.copy()
    kp[e] *= 1 + 1e-6
    km[e] *= 1 - 1e-6
    fd = (asm.compliance(s, asm.material(kp, k)) - asm.compliance(s, asm.material(km, k))) \
        / (2e-6 * kappa[e])
    assert dfdc[e] / params.mu == pytest.approx(fd, rel=1e-6)


def test_assembly_deterministic_across_workers(cavity_system):
    mesh, tags, params, kappa, k, rng = cavity_system
    s = np.concatenate([rng.normal(0, 20, mesh.n_nodes), rng.normal(0, 1, mesh.n_nodes)])
    a1 = Assembler(mesh, tags, params, workers=1, chunk=16)
    a3 = Assembler(mesh, tags, params, workers=3, chunk=16)
    m = a1.material(kappa, k)
    s1, s3 = a1.assemble(s, m), a3.assemble(s, m)
    assert np.array_equal(s1.residual, s3.residual)
    assert np.array_equal(s1.matrix.data, s3.matrix.data)


def test_dirichlet_elimination(cavity_system):
    mesh, tags, params, kappa, k, rng = cavity_system
    asm = Assembler(mesh, tags, params)
    s = rng.normal(size=asm.n_dofs)
    sys_ = asm.assemble(s, asm.material(kappa, k))
    A = sys_.matrix.tocsr()
    fixed = np.flatnonzero(asm.fixed)
    assert fixed.size == tags.dirichlet_t_nodes().size + tags.pressure_pins.size
    for i in fixed[:20]:
        # eliminated entries stay in the pattern as explicit zeros
        row = A.getrow(i).toarray().ravel()
        assert np.count_nonzero(row) == 1 and row[i] == 1.0
        assert np.count_nonzero(A.getcol(i).toarray()) == 1
    assert np.allclose(sys_.residual[fixed], s[fixed])


def test_assemble_rejects_bad_material(cavity_system):
    mesh, tags, params, kappa, k, _ = cavity_system
    asm = Assembler(mesh, tags, params)
    with pytest.raises(ValueError):
        asm.residual(np.zeros(asm.n_dofs), asm.material(-kappa, k))
    with pytest.raises(ValueError):
        asm.residual(np.zeros(3), asm.material(kappa, k))
