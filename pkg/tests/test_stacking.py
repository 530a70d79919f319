import numpy as np
import pytest
from scipy.linalg import block_diag

from robustmpc import (
    ConfigError,
    DimensionError,
    RepeatedScalar,
    UncertaintyStructure,
    load_system,
    make_system,
    recast_disturbance,
)
from robustmpc.model import stage_value
from robustmpc.presets import example1_config
from robustmpc.stacking import (
    FeedbackPolicy,
    build_stacked,
    causal_mask,
    check_causal,
    closed_loop_maps,
    evaluate_response,
    hat_to_policy,
    policy_to_hat,
    zero_policy,
)


def example1_stacked():
    return build_stacked(recast_disturbance(load_system(example1_config())))


def random_recast_system(rng, n=2, n_u=1, n_w=1, N=3, scale=0.6):
    structure = UncertaintyStructure(
        blocks=(RepeatedScalar(n),), terminal_blocks=(RepeatedScalar(n),)
    )
    sys = make_system(
        A=scale * rng.normal(size=(n, n)),
        B_u=rng.normal(size=(n, n_u)),
        B_p=0.3 * rng.normal(size=(n, n)),
        B_w=0.3 * rng.normal(size=(n, n_w)),
        C_q=rng.normal(size=(n, n)),
        D_qu=rng.normal(size=(n, n_u)),
        C_f=rng.normal(size=(2, n)),
        D_fu=rng.normal(size=(2, n_u)),
        D_fp=0.2 * rng.normal(size=(2, n)),
        D_fw=0.2 * rng.normal(size=(2, n_w)),
        C_z=rng.normal(size=(2, n)),
        D_zu=rng.normal(size=(2, n_u)),
        D_zp=0.1 * rng.normal(size=(2, n)),
        D_zw=0.1 * rng.normal(size=(2, n_w)),
        C_qN=rng.normal(size=(n, n)),
        C_fN=rng.normal(size=(1, n)),
        D_fpN=0.2 * rng.normal(size=(1, n)),
        C_zN=rng.normal(size=(2, n)),
        D_zpN=0.1 * rng.normal(size=(2, n)),
        structure=structure,
        N=N,
        d_bound=0.5 + rng.random(n_w),
        f_bound=1.0 + rng.random(2),
        f_boundN=np.ones(1),
        z_ref=rng.normal(size=2),
        z_refN=rng.normal(size=2),
    )
    return sys, recast_disturbance(sys)


def stage_signals(sys, x, u_k, p_k, k):
    """One step of the raw recursion; p_k includes the recast channels."""
    q = sys.C_q @ x + sys.D_qu @ u_k + stage_value(sys.q_offset, k)
    f = sys.C_f @ x + sys.D_fu @ u_k + sys.D_fp @ p_k
    z = sys.C_z @ x + sys.D_zu @ u_k + sys.D_zp @ p_k
    x_next = sys.A @ x + sys.B_u @ u_k + sys.B_p @ p_k
    return q, f, z, x_next


class TestBuildStacked:
    def test_recursion_oracle(self):
        # the stacked matrices must reproduce a step-by-step recursion
        rng = np.random.default_rng(10)
        for _ in range(5):
            _, rc = random_recast_system(rng)
            st = build_stacked(rc)
            d = rc.dims
            x0 = rng.normal(size=d.n)
            u = rng.normal(size=st.n_u)
            p = rng.normal(size=st.n_p)
            x, qs, fs, zs, xs = x0, [], [], [], []
            for k in range(d.N):
                u_k = u[k * d.n_u : (k + 1) * d.n_u]
                p_k = p[k * d.n_p : (k + 1) * d.n_p]
                q, f, z, x = stage_signals(rc, x, u_k, p_k, k)
                qs.append(q)
                fs.append(f)
                zs.append(z)
                xs.append(x)
            p_N = p[d.N * d.n_p :]
            qs.append(rc.C_qN @ x)
            fs.append(rc.C_fN @ x + rc.D_fpN @ p_N)
            zs.append(rc.C_zN @ x + rc.D_zpN @ p_N)
            np.testing.assert_allclose(
                st.A @ x0 + st.B_u @ u + st.B_p @ p, np.concatenate(xs), atol=1e-10
            )
            np.testing.assert_allclose(
                st.C_q @ x0 + st.D_qu @ u + st.D_qp @ p + st.q_offset,
                np.concatenate(qs),
                atol=1e-10,
            )
            np.testing.assert_allclose(
                st.C_f @ x0 + st.D_fu @ u + st.D_fp @ p, np.concatenate(fs), atol=1e-10
            )
            np.testing.assert_allclose(
                st.C_z @ x0 + st.D_zu @ u + st.D_zp @ p, np.concatenate(zs), atol=1e-10
            )

    def test_example1_blocks(self):
        st = example1_stacked()
        assert st.A.shape == (10, 2)
        A = np.array([[1.0, 0.8], [0.5, 1.0]])
        # x_2 block of the input map, column u_0: A @ B_u
        np.testing.assert_allclose(st.B_u[2:4, 0], [1.8, 1.5])
        np.testing.assert_allclose(st.A[2:4], A @ A)
        assert st.B_p.shape == (10, 17)
        assert st.D_qp.shape == (17, 17)
        np.testing.assert_allclose(
            st.q_offset, np.concatenate([np.tile([0.0, 0.0, 1.0], 5), np.zeros(2)])
        )
        assert st.f_bound.shape == (30,)
        np.testing.assert_allclose(st.f_bound[:6], [8, 8, 7, 7, 7, 7])

    def test_scalar_horizon_one(self):
        a, b_u, b_p, c_q = 0.7, 2.0, 0.4, 1.5
        sys = make_system(
            A=[[a]],
            B_u=[[b_u]],
            B_p=[[b_p]],
            C_q=[[c_q]],
            C_qN=[[1.0]],
            structure=UncertaintyStructure(
                blocks=(RepeatedScalar(1),), terminal_blocks=(RepeatedScalar(1),)
            ),
            N=1,
        )
        st = build_stacked(sys)
        np.testing.assert_allclose(st.A, [[a]])
        np.testing.assert_allclose(st.B_u, [[b_u]])
        # terminal p-column of the state rows is zero padding
        np.testing.assert_allclose(st.B_p, [[b_p, 0.0]])
        np.testing.assert_allclose(st.D_qp, [[0.0, 0.0], [b_p, 0.0]])
        np.testing.assert_allclose(st.C_q, [[c_q], [a]])

    def test_strictly_lower_triangular_uncertainty_map(self):
        st = example1_stacked()
        d = st.dims
        heights = [d.n_q] * d.N + [d.n_q_N]
        widths = [d.n_p] * d.N + [d.n_p_N]
        r0 = 0
        for bi, h in enumerate(heights):
            c0 = 0
            for bj, w in enumerate(widths):
                if bj >= bi:
                    assert np.all(st.D_qp[r0 : r0 + h, c0 : c0 + w] == 0.0)
                c0 += w
            r0 += h

    def test_requires_recast(self):
        sys = load_system(example1_config())
        with pytest.raises(ConfigError, match="recast"):
            build_stacked(sys)

    def test_size_guard(self):
        sys = make_system(
            A=[[1.0]],
            B_u=[[1.0]],
            B_p=[[1.0]],
            C_q=[[1.0]],
            structure=UncertaintyStructure(blocks=(RepeatedScalar(1),)),
            N=3000,
        )
        with pytest.raises(ConfigError, match="too large"):
            build_stacked(sys)


class TestPolicyTransforms:
    def test_hand_worked_two_step(self):
        # scalar system, N=2: the unit-triangular inverse has a closed form
        a, b, k = 2.0, 0.5, 3.0
        sys = make_system(
            A=[[a]],
            B_u=[[b]],
            B_p=[[0.1]],
            C_q=[[1.0]],
            structure=UncertaintyStructure(blocks=(RepeatedScalar(1),)),
            N=2,
        )
        st = build_stacked(sys)
        pol = FeedbackPolicy(
            K0=np.array([[0.4], [-0.2]]),
            K=np.array([[0.0, 0.0], [k, 0.0]]),
            v=np.array([1.0, -1.0]),
            hat=False,
        )
        hat = policy_to_hat(st, pol)
        np.testing.assert_allclose(hat.K, [[0.0, 0.0], [k, 0.0]], atol=1e-12)
        np.testing.assert_allclose(hat.K0.ravel(), [0.4, k * b * 0.4 - 0.2 + k * a], atol=1e-12)
        np.testing.assert_allclose(hat.v, [1.0, k * b * 1.0 - 1.0], atol=1e-12)

    def test_round_trip(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            _, rc = random_recast_system(rng, N=4)
            st = build_stacked(rc)
            d = rc.dims
            mask = causal_mask(d)
            K = rng.normal(size=mask.shape) * mask
            pol = FeedbackPolicy(
                K0=rng.normal(size=(st.n_u, d.n)), K=K, v=rng.normal(size=st.n_u), hat=False
            )
            back = hat_to_policy(st, policy_to_hat(st, pol))
            np.testing.assert_allclose(back.K0, pol.K0, atol=1e-9)
            np.testing.assert_allclose(back.K, pol.K, atol=1e-9)
            np.testing.assert_allclose(back.v, pol.v, atol=1e-9)
            # hat form preserves the causal pattern
            check_causal(policy_to_hat(st, pol).K, d)

    def test_same_input_sequence(self):
        # state feedback and its hat form produce the same inputs on any
        # realized uncertainty trajectory
        rng = np.random.default_rng(12)
        sys, rc = random_recast_system(rng, N=3)
        st = build_stacked(rc)
        d = rc.dims
        mask = causal_mask(d)
        pol = FeedbackPolicy(
            K0=0.5 * rng.normal(size=(st.n_u, d.n)),
            K=0.5 * rng.normal(size=mask.shape) * mask,
            v=rng.normal(size=st.n_u),
            hat=False,
        )
        hat = policy_to_hat(st, pol)
        x0 = rng.normal(size=d.n)
        deltas = rng.uniform(-1, 1, size=d.N)
        etas = rng.uniform(-1, 1, size=(d.N, 1))
        # forward simulation under the state-feedback form
        x_hist = []
        p_stack = np.zeros(st.n_p)
        u_sim = np.zeros(st.n_u)
        x = x0.copy()
        for k in range(d.N):
            u_k = pol.K0[k] @ x0 + pol.K[k] @ np.concatenate(x_hist + [np.zeros((d.N - k) * d.n)]) + pol.v[k]
            q_k = rc.C_q @ x + rc.D_qu @ [u_k] + stage_value(rc.q_offset, k)
            p_k = block_diag(deltas[k] * np.eye(2), np.diag(etas[k])) @ q_k
            p_stack[k * d.n_p : (k + 1) * d.n_p] = p_k
            u_sim[k] = u_k
            x = rc.A @ x + rc.B_u @ [u_k] + rc.B_p @ p_k
            x_hist.append(x.copy())
        u_hat = hat.K0 @ x0 + (hat.K @ st.B_p) @ p_stack + hat.v
        np.testing.assert_allclose(u_hat, u_sim, atol=1e-9)

    def test_causality_violation_rejected(self):
        st = example1_stacked()
        K = np.zeros((st.n_u, st.n_x))
        K[0, 0] = 1.0  # u_0 must not see any stacked state
        with pytest.raises(DimensionError, match="causal"):
            policy_to_hat(st, FeedbackPolicy(K0=np.zeros((5, 2)), K=K, v=np.zeros(5), hat=False))


class TestClosedLoop:
    def test_zero_policy_identities(self):
        st = example1_stacked()
        maps = closed_loop_maps(st, zero_policy(st.dims), np.zeros(2))
        np.testing.assert_allclose(maps.D_qp, st.D_qp)
        np.testing.assert_allclose(maps.d_q, st.q_offset)
        np.testing.assert_allclose(maps.d_z, -st.z_ref)
        x0 = np.array([7.0, 7.0])
        maps7 = closed_loop_maps(st, zero_policy(st.dims), x0)
        np.testing.assert_allclose(maps7.d_f, st.C_f @ x0)

    def test_affine_in_x0(self):
        st = example1_stacked()
        rng = np.random.default_rng(13)
        pol = zero_policy(st.dims)
        pol.v[:] = rng.normal(size=st.n_u)
        a, b = rng.normal(size=2), rng.normal(size=2)
        m_a = closed_loop_maps(st, pol, a)
        m_b = closed_loop_maps(st, pol, b)
        m_mid = closed_loop_maps(st, pol, 0.5 * (a + b))
        np.testing.assert_allclose(m_mid.d_q, 0.5 * (m_a.d_q + m_b.d_q), atol=1e-12)
        np.testing.assert_allclose(m_mid.d_f, 0.5 * (m_a.d_f + m_b.d_f), atol=1e-12)

    def test_response_matches_simulation(self):
        # evaluate_response must agree with simulating the original system
        # under realized uncertainty and disturbance
        rng = np.random.default_rng(14)
        for trial in range(8):
            sys, rc = random_recast_system(rng, N=3)
            st = build_stacked(rc)
            d = rc.dims
            mask = causal_mask(d)
            hat = FeedbackPolicy(
                K0=0.3 * rng.normal(size=(st.n_u, d.n)),
                K=0.3 * rng.normal(size=mask.shape) * mask,
                v=0.5 * rng.normal(size=st.n_u),
                hat=True,
            )
            x0 = rng.normal(size=d.n)
            deltas = rng.uniform(-1, 1, size=d.N + 1)
            etas = rng.uniform(-1, 1, size=(d.N, 1))
            step_blocks = [
                block_diag(deltas[k] * np.eye(2), np.diag(etas[k])) for k in range(d.N)
            ]
            big_delta = block_diag(*step_blocks, deltas[d.N] * np.eye(2))
            maps = closed_loop_maps(st, hat, x0)
            f_resp, z_resp, cost = evaluate_response(maps, big_delta)

            # simulation on the pre-recast system
            d0 = sys.dims
            KB = hat.K @ st.B_p
            p_stack = np.zeros(st.n_p)
            x = x0.copy()
            fs, zs = [], []
            for k in range(d.N):
                u_k = hat.K0[k * d0.n_u : (k + 1) * d0.n_u] @ x0 + KB[
                    k * d0.n_u : (k + 1) * d0.n_u
                ] @ p_stack + hat.v[k * d0.n_u : (k + 1) * d0.n_u]
                q_k = sys.C_q @ x + sys.D_qu @ u_k
                p_k = deltas[k] * q_k
                w_k = etas[k] * stage_value(sys.d_bound, k)
                fs.append(sys.C_f @ x + sys.D_fu @ u_k + sys.D_fp @ p_k + sys.D_fw @ w_k)
                zs.append(
                    sys.C_z @ x + sys.D_zu @ u_k + sys.D_zp @ p_k + sys.D_zw @ w_k
                    - stage_value(sys.z_ref, k)
                )
                x = sys.A @ x + sys.B_u @ u_k + sys.B_p @ p_k + sys.B_w @ w_k
                p_stack[k * d.n_p : (k + 1) * d.n_p] = np.concatenate([p_k, w_k])
            q_N = sys.C_qN @ x
            p_N = deltas[d.N] * q_N
            fs.append(sys.C_fN @ x + sys.D_fpN @ p_N)
            zs.append(sys.C_zN @ x + sys.D_zpN @ p_N - sys.z_refN)
            f_sim = np.concatenate(fs)
            z_sim = np.concatenate(zs)
            scale = 1.0 + np.max(np.abs(f_sim)) + np.max(np.abs(z_sim))
            np.testing.assert_allclose(f_resp, f_sim, atol=1e-8 * scale)
            np.testing.assert_allclose(z_resp, z_sim, atol=1e-8 * scale)
            assert cost == pytest.approx(float(z_sim @ z_sim), rel=1e-8)

    def test_singular_loop_rejected(self):
        sys = make_system(
            A=[[1.0]],
            B_u=[[1.0]],
            B_p=[[1.0]],
            C_q=[[1.0]],
            D_qu=[[1.0]],
            C_qN=[[1.0]],
            structure=UncertaintyStructure(
                blocks=(RepeatedScalar(1),), terminal_blocks=(RepeatedScalar(1),)
            ),
            N=1,
        )
        st = build_stacked(sys)
        maps = closed_loop_maps(st, zero_policy(st.dims), np.ones(1))
        # force a feedthrough that makes I - D_qp delta singular
        maps.D_qp = np.array([[0.0, 1.0], [1.0, 0.0]])
        delta = np.eye(2)
        from robustmpc import SolverError

        with pytest.raises(SolverError, match="ill conditioned"):
            evaluate_response(maps, delta)
