import itertools

import numpy as np
import pytest

from contactnewton.collision import (
    AttachKind,
    Attachment,
    ContactFrame,
    MeshGeometry,
    PlaneGeometry,
    ProximityPair,
    build_frames,
    detect,
    refresh_proximity,
)
from contactnewton.constraints import (
    assemble_direction,
    assemble_H,
    assemble_W_standard,
    assemble_Wg,
    build_signed_mapping,
    compute_violation,
)
from contactnewton.dynamics import SoftBody, compute_free_motion
from contactnewton.errors import SingularBlockError, ValidationError
from contactnewton.linalg import factorize
from contactnewton.mesh import TetMesh, box_mesh, surface_triangles, surface_vertices
from contactnewton.solver import (
    NewtonConfig,
    PgsConfig,
    StepContext,
    local_solve,
    newton_fast,
    newton_standard,
    pgs,
)


def axes_frame():
    return ContactFrame(
        n=np.array([0.0, 1.0, 0.0]),
        t1=np.array([1.0, 0.0, 0.0]),
        t2=np.array([0.0, 0.0, 1.0]),
    )


def lcp_enumeration_oracle(W, delta_free, h):
    """Brute force over the 2^c active sets of the frictionless normal LCP.

    Solves delta = delta_free + h^2 W lam with lam >= 0 complementary to
    delta >= 0; returns the feasible complementary solution.
    """
    c = len(delta_free)
    h2 = h * h
    for active in itertools.product([False, True], repeat=c):
        idx = [i for i, a in enumerate(active) if a]
        lam = np.zeros(c)
        if idx:
            sub = W[np.ix_(idx, idx)]
            rhs = -np.asarray(delta_free)[idx] / h2
            try:
                lam_sub = np.linalg.solve(sub, rhs)
            except np.linalg.LinAlgError:
                continue
            lam[idx] = lam_sub
        delta_end = delta_free + h2 * (W @ lam)
        if lam.min(initial=0.0) >= -1e-12 and delta_end.min() >= -1e-9:
            return lam
    raise AssertionError("oracle found no feasible complementary solution")


def normal_only_to_groups(W_n, delta_n):
    """Embed a frictionless normal-only problem into grouped (n, t1, t2) form."""
    c = len(delta_n)
    W = np.zeros((3 * c, 3 * c))
    delta = np.zeros(3 * c)
    for i in range(c):
        for j in range(c):
            W[3 * i, 3 * j] = W_n[i, j]
        # identity tangential compliance keeps blocks invertible
        W[3 * i + 1, 3 * i + 1] = 1.0
        W[3 * i + 2, 3 * i + 2] = 1.0
        delta[3 * i] = delta_n[i]
    return W, delta


class TestLocalSolve:
    def test_separated_contact_inactive(self):
        W = np.eye(3)
        lam = np.zeros(3)
        out = local_solve(0, W, np.array([0.01, 0.0, 0.0]), lam, mu=0.5, h2=1e-4)
        assert np.array_equal(out, np.zeros(3))

    def test_scalar_closed_form(self):
        # lambda_n = -delta_free / (h^2 W_nn) for a single frictionless contact
        W = 0.5 * np.eye(3)
        h2 = 1e-4
        delta = np.array([-0.004, 0.0, 0.0])
        out = local_solve(0, W, delta, np.zeros(3), mu=0.0, h2=h2)
        assert out[0] == pytest.approx(0.004 / (h2 * 0.5), rel=1e-12)
        assert out[1] == out[2] == 0.0

    def test_stick_zeroes_tangential_gap(self):
        # tangential demand below the cone: the 2x2 solve closes the gap
        rng = np.random.default_rng(4)
        B = rng.standard_normal((3, 3))
        W = B @ B.T + 3 * np.eye(3)
        h2 = 1e-4
        delta = np.array([-0.01, 0.0005, -0.0003])
        lam = local_solve(0, W, delta, np.zeros(3), mu=10.0, h2=h2)
        delta_end = delta + h2 * (W @ lam)
        # 3x3 oracle: with a huge cone the block solve must zero the
        # tangential gap while the normal redoes only the diagonal row
        assert abs(delta_end[1]) <= 1e-12
        assert abs(delta_end[2]) <= 1e-12
        assert np.hypot(lam[1], lam[2]) < 10.0 * lam[0]

    def test_zero_normal_kills_friction(self):
        W = np.eye(3)
        out = local_solve(0, W, np.array([0.01, -1.0, 0.5]), np.zeros(3), mu=0.5, h2=1e-4)
        assert np.array_equal(out, np.zeros(3))

    def test_singular_block_raises(self):
        W = np.zeros((3, 3))
        with pytest.raises(SingularBlockError):
            local_solve(0, W, np.array([-0.1, 0.0, 0.0]), np.zeros(3), mu=0.5, h2=1e-4)


class TestPgs:
    def test_no_contacts(self):
        res = pgs(np.zeros((0, 0)), np.zeros(0), h=0.01, config=PgsConfig())
        assert res.converged
        assert res.iterations == 0
        assert res.lam.size == 0

    def test_single_contact_matches_closed_form(self):
        W = np.diag([0.5, 1.0, 1.0])
        delta = np.array([-0.002, 0.0, 0.0])
        res = pgs(W, delta, h=0.01, config=PgsConfig(friction=0.0))
        assert res.lam[0] == pytest.approx(0.002 / (1e-4 * 0.5), rel=1e-12)
        assert res.delta_end[0] == pytest.approx(0.0, abs=1e-15)

    def test_symmetric_two_contacts(self):
        W_n = np.array([[1.0, 0.3], [0.3, 1.0]])
        delta_n = np.array([-0.01, -0.01])
        W, delta = normal_only_to_groups(W_n, delta_n)
        cfg = PgsConfig(max_iterations=500, tolerance=1e-13, friction=0.0)
        res = pgs(W, delta, h=0.01, config=cfg)
        lam_n = res.lam[::3]
        assert abs(lam_n[0] - lam_n[1]) <= 1e-9 * max(lam_n)
        oracle = lcp_enumeration_oracle(W_n, delta_n, h=0.01)
        assert np.abs(lam_n - oracle).max() <= 1e-7 * max(np.abs(oracle).max(), 1e-12)

    def test_matches_lcp_oracle_random(self):
        rng = np.random.default_rng(21)
        for trial in range(8):
            c = int(rng.integers(1, 5))
            B = rng.standard_normal((c, c))
            W_n = B @ B.T + c * np.eye(c)
            delta_n = rng.uniform(-0.01, 0.005, c)
            W, delta = normal_only_to_groups(W_n, delta_n)
            cfg = PgsConfig(max_iterations=2000, tolerance=1e-14, friction=0.0)
            res = pgs(W, delta, h=0.01, config=cfg)
            oracle = lcp_enumeration_oracle(W_n, delta_n, h=0.01)
            scale = max(np.abs(oracle).max(), 1e-9)
            assert np.abs(res.lam[::3] - oracle).max() <= 1e-7 * scale

    def test_complementarity_postconditions(self):
        rng = np.random.default_rng(3)
        B = rng.standard_normal((9, 9))
        W = B @ B.T + 9 * np.eye(9)
        delta = rng.uniform(-0.02, 0.01, 9)
        cfg = PgsConfig(max_iterations=200, tolerance=1e-6, friction=0.4)
        res = pgs(W, delta, h=0.01, config=cfg)
        tol_c = 1e-6 * max(1.0, np.abs(delta).max())
        for g in range(3):
            ln = res.lam[3 * g]
            lt = np.hypot(res.lam[3 * g + 1], res.lam[3 * g + 2])
            dn = res.delta_end[3 * g]
            assert ln >= 0.0
            assert dn >= -tol_c
            assert ln * dn <= tol_c
            assert lt <= 0.4 * ln + 1e-9

    def test_coulomb_stick_and_slip(self):
        # stick: tangential demand inside the cone leaves no tangential gap;
        # slip: lambda_t sits on the cone, antiparallel to the end gap
        W = np.eye(3)
        h = 0.01
        stick = pgs(W, np.array([-0.01, 0.002, 0.0]), h,
                    PgsConfig(max_iterations=200, tolerance=1e-12, friction=0.9))
        g = stick.delta_end
        assert abs(g[1]) <= 1e-6 and abs(g[2]) <= 1e-6
        slip = pgs(W, np.array([-0.01, 0.02, 0.0]), h,
                   PgsConfig(max_iterations=200, tolerance=1e-12, friction=0.1))
        ln = slip.lam[0]
        lt = slip.lam[1:3]
        assert np.hypot(*lt) == pytest.approx(0.1 * ln, rel=1e-9)
        gt = slip.delta_end[1:3]
        cosang = (lt @ gt) / (np.linalg.norm(lt) * np.linalg.norm(gt))
        assert cosang == pytest.approx(-1.0, abs=1e-3)

    def test_determinism(self):
        rng = np.random.default_rng(8)
        B = rng.standard_normal((6, 6))
        W = B @ B.T + 6 * np.eye(6)
        delta = rng.uniform(-0.01, 0.01, 6)
        cfg = PgsConfig(max_iterations=50, tolerance=1e-10, friction=0.3)
        r1 = pgs(W.copy(), delta.copy(), 0.01, cfg)
        r2 = pgs(W.copy(), delta.copy(), 0.01, cfg)
        assert np.array_equal(r1.lam, r2.lam)
        assert np.array_equal(r1.delta_end, r2.delta_end)

    def test_duplicate_contacts_regularized(self):
        # two identical rows make the diagonal blocks fine but the system
        # singular; a duplicated group block triggers the diagonal shift path
        W1 = np.diag([1.0, 1.0, 1.0])
        W = np.zeros((6, 6))
        W[:3, :3] = W1
        W[3:, 3:] = W1
        W[:3, 3:] = W1
        W[3:, :3] = W1  # rank 3: duplicated contact
        delta = np.array([-0.01, 0, 0, -0.01, 0, 0.0])
        res = pgs(W, delta, 0.01, PgsConfig(max_iterations=300, tolerance=1e-10))
        assert res.delta_end[::3].min() >= -1e-6


def build_context(bodies_pairs, h=0.01, gravity=(0, -9.81, 0), with_wg=True):
    """StepContext over soft bodies given (id -> body) and detected pairs."""
    bodies, pairs = bodies_pairs
    states = {oid: b.initial_state() for oid, b in bodies.items()}
    F = {}
    free = {}
    for oid, body in bodies.items():
        A, b = body.assemble(states[oid], h=h, gravity=gravity)
        free[oid] = compute_free_motion(A, b, states[oid], h=h)
        F[oid] = free[oid].factorization
    S = {
        oid: build_signed_mapping(pairs, oid, body.n_dofs, body.fixed_mask)
        for oid, body in bodies.items()
    }

    def views_at(dv_total):
        views = {}
        for oid in bodies:
            q = free[oid].q_free + h * dv_total.get(oid, 0.0)
            views[oid] = q.reshape(-1, 3)
        views[PLANE_ID] = None
        return views

    def refresh(dv_total):
        return refresh_proximity(pairs, views_at(dv_total))

    p_a0, p_b0 = refresh({})
    ctx = StepContext(
        pairs=pairs,
        detection_frames=build_frames(pairs),
        S_by_object=S,
        F_by_object=F,
        p_a0=p_a0,
        p_b0=p_b0,
        h=h,
        refresh=refresh,
        wg=assemble_Wg(S, F) if with_wg else None,
    )
    return ctx, bodies, states, free


PLANE_ID = 99


def falling_block_setup(center_y=0.0495, vy=-0.05):
    m = box_mesh((0.1, 0.1, 0.1), (2, 2, 2), center=(0.0, center_y, 0.0))
    body = SoftBody(m, young=5e4, poisson=0.3)
    tris = surface_triangles(m)
    geom = MeshGeometry(
        object_id=0,
        points=m.nodes,
        triangles=tris,
        vertex_ids=surface_vertices(tris),
        deformable=True,
        dynamic=True,
    )
    plane = PlaneGeometry(object_id=PLANE_ID, normal=(0, 1, 0), offset=0.0)
    pairs = detect([geom, plane], threshold=0.01)
    assert pairs
    return {0: body}, pairs


class TestNewtonSchemes:
    def test_no_penetration_keeps_state(self):
        bodies, pairs = falling_block_setup(center_y=0.058)  # detected but separated
        ctx, *_ = build_context((bodies, pairs), gravity=(0, 0, 0))
        res = newton_standard(ctx, NewtonConfig(scheme="standard"), PgsConfig())
        assert all(np.array_equal(lam, np.zeros_like(lam)) for lam in res.lam_history)
        assert np.array_equal(res.dv_by_object[0], np.zeros_like(res.dv_by_object[0]))

    def test_one_iteration_is_single_scheme(self):
        bodies, pairs = falling_block_setup()
        ctx, *_ = build_context((bodies, pairs))
        one = newton_standard(ctx, NewtonConfig(scheme="standard", max_iterations=1),
                              PgsConfig(max_iterations=100))
        assert len(one.lam_history) == 1

    def test_fast_noop_without_contact_forces(self):
        bodies, pairs = falling_block_setup(center_y=0.058)
        ctx, *_ = build_context((bodies, pairs), gravity=(0, 0, 0))
        res = newton_fast(ctx, NewtonConfig(scheme="fast"), PgsConfig())
        assert np.array_equal(res.dv_by_object[0], np.zeros_like(res.dv_by_object[0]))

    def test_schemes_agree_with_frozen_frames(self):
        bodies, pairs = falling_block_setup()
        cfgn = dict(max_iterations=4, relinearize=False, penetration_tol=1e-12)
        pcfg = PgsConfig(max_iterations=150, tolerance=1e-10, friction=0.5)
        ctx1, *_ = build_context((bodies, pairs))
        std = newton_standard(ctx1, NewtonConfig(scheme="standard", **cfgn), pcfg)
        ctx2, *_ = build_context((bodies, pairs))
        fast = newton_fast(ctx2, NewtonConfig(scheme="fast", **cfgn), pcfg)
        assert len(std.lam_history) == len(fast.lam_history)
        scale = max(max(np.abs(l).max() for l in std.lam_history), 1e-12)
        for ls, lf in zip(std.lam_history, fast.lam_history):
            assert np.abs(ls - lf).max() <= 1e-8 * scale
        dv_s = std.dv_by_object[0]
        dv_f = fast.dv_by_object[0]
        assert np.abs(dv_s - dv_f).max() <= 1e-8 * max(np.abs(dv_s).max(), 1e-12)

    def test_fast_loop_performs_no_system_solves(self):
        bodies, pairs = falling_block_setup()
        for iterations in (1, 5):
            ctx, *_ = build_context((bodies, pairs))
            F = ctx.F_by_object[0]
            before = F.solve_count
            newton_fast(
                ctx,
                NewtonConfig(scheme="fast", max_iterations=iterations,
                             penetration_tol=0.0, rotation_tol=0.0),
                PgsConfig(max_iterations=50),
            )
            # exactly one mechanical correction at the end, never per iteration
            assert F.solve_count - before == 1

    def test_newton_determinism(self):
        bodies, pairs = falling_block_setup()
        lam_runs = []
        for _ in range(2):
            ctx, *_ = build_context((bodies, pairs))
            res = newton_fast(ctx, NewtonConfig(scheme="fast", max_iterations=3,
                                                penetration_tol=0.0),
                              PgsConfig(max_iterations=60, friction=0.5))
            lam_runs.append(np.concatenate(res.lam_history))
        assert np.array_equal(lam_runs[0], lam_runs[1])

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            NewtonConfig(scheme="warp")
        with pytest.raises(ValidationError):
            PgsConfig(max_iterations=0)
        with pytest.raises(ValidationError):
            PgsConfig(tolerance=0.0)
