import numpy as np
import pytest

from submapper.sim3 import (
    DegenerateLogError,
    Sim3,
    alignment_residual_and_jacobians,
    se3_exp,
    sim3_apply,
    sim3_compose,
    sim3_exp,
    sim3_identity,
    sim3_inverse,
    sim3_log,
    sim3_manifold_update,
    skew,
    so3_exp,
    so3_log,
)


def random_tangent(rng, omega_max=3.0):
    v = rng.uniform(-1.0, 1.0, 7)
    v[:3] *= omega_max / np.sqrt(3.0)
    return v


def test_skew_basics():
    assert np.all(skew(np.zeros(3)) == 0.0)
    np.testing.assert_allclose(skew([0, 0, 1]) @ [1, 0, 0], [0, 1, 0])
    rng = np.random.default_rng(0)
    for _ in range(20):
        v, w = rng.normal(size=3), rng.normal(size=3)
        np.testing.assert_allclose(skew(v) @ w, np.cross(v, w), atol=1e-14)
        np.testing.assert_allclose(skew(v).T, -skew(v))


def test_exp_trivial_cases():
    G = sim3_exp(np.zeros(7))
    np.testing.assert_allclose(G.R, np.eye(3))
    assert G.s == 1.0
    np.testing.assert_allclose(G.t, np.zeros(3))

    G = sim3_exp([0, 0, 0, 1, 2, 3, 0])
    np.testing.assert_allclose(G.R, np.eye(3))
    np.testing.assert_allclose(G.t, [1, 2, 3])

    G = sim3_exp([0, 0, 0, 0, 0, 0, np.log(2.0)])
    np.testing.assert_allclose(G.s, 2.0)
    np.testing.assert_allclose(G.t, np.zeros(3), atol=1e-15)


def test_log_trivial_cases():
    np.testing.assert_allclose(sim3_log(sim3_identity()), np.zeros(7))
    v = sim3_log(Sim3(np.eye(3), np.e, np.zeros(3)))
    np.testing.assert_allclose(v, [0, 0, 0, 0, 0, 0, 1.0], atol=1e-15)


def test_exp_log_round_trip():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        v = random_tangent(rng)
        err = np.abs(sim3_log(sim3_exp(v)) - v).max()
        assert err < 1e-9


def test_round_trip_small_angle_branches():
    rng = np.random.default_rng(3)
    for scale in [1e-10, 1e-7, 1e-5, 1e-3, 1e-1]:
        for _ in range(50):
            v = random_tangent(rng) * scale
            assert np.abs(sim3_log(sim3_exp(v)) - v).max() < 1e-12


def test_log_degenerate_at_pi():
    with pytest.raises(DegenerateLogError):
        so3_log(so3_exp([np.pi, 0, 0]))


def test_log_near_pi_still_works():
    v = np.array([0.0, 0.0, 3.10])
    np.testing.assert_allclose(so3_log(so3_exp(v)), v, atol=1e-9)


def test_compose_identity_and_inverse():
    rng = np.random.default_rng(1)
    I = sim3_identity()
    for _ in range(50):
        G = sim3_exp(random_tangent(rng))
        np.testing.assert_allclose(sim3_compose(I, G).matrix(), G.matrix())
        np.testing.assert_allclose(sim3_compose(G, I).matrix(), G.matrix())
        np.testing.assert_allclose(
            sim3_compose(G, sim3_inverse(G)).matrix(), np.eye(4), atol=1e-9)
        GG = sim3_inverse(sim3_inverse(G))
        np.testing.assert_allclose(GG.matrix(), G.matrix(), atol=1e-12)


def test_inverse_closed_form():
    G = Sim3(np.eye(3), 2.0, np.array([1.0, 0, 0]))
    Ginv = sim3_inverse(G)
    assert Ginv.s == 0.5
    np.testing.assert_allclose(Ginv.t, [-0.5, 0, 0])
    np.testing.assert_allclose(sim3_inverse(sim3_identity()).matrix(), np.eye(4))


def test_compose_convention_pointwise():
    # compose(A, B) applies A first.
    rng = np.random.default_rng(2)
    for _ in range(100):
        A = sim3_exp(random_tangent(rng))
        B = sim3_exp(random_tangent(rng))
        x = rng.normal(size=3)
        np.testing.assert_allclose(
            sim3_apply(sim3_compose(A, B), x),
            sim3_apply(B, sim3_apply(A, x)), atol=1e-10)


def test_compose_associativity():
    rng = np.random.default_rng(7)
    for _ in range(50):
        A, B, C = (sim3_exp(random_tangent(rng)) for _ in range(3))
        M1 = sim3_compose(sim3_compose(A, B), C).matrix()
        M2 = sim3_compose(A, sim3_compose(B, C)).matrix()
        np.testing.assert_allclose(M1, M2, atol=1e-10)


def test_apply_trivial_and_matrix_form():
    np.testing.assert_allclose(sim3_apply(sim3_identity(), [4, 5, 6]), [4, 5, 6])
    G = Sim3(np.eye(3), 2.0, np.array([1.0, 0, 0]))
    np.testing.assert_allclose(sim3_apply(G, [1, 1, 1]), [3, 2, 2])
    rng = np.random.default_rng(5)
    for _ in range(50):
        G = sim3_exp(random_tangent(rng))
        x = rng.normal(size=3)
        h = G.matrix() @ np.append(x, 1.0)
        np.testing.assert_allclose(sim3_apply(G, x), h[:3], atol=1e-12)


def test_apply_batched():
    rng = np.random.default_rng(6)
    G = sim3_exp(random_tangent(rng))
    pts = rng.normal(size=(10, 3))
    batch = sim3_apply(G, pts)
    for i in range(10):
        np.testing.assert_allclose(batch[i], sim3_apply(G, pts[i]))


def test_manifold_update_trivial():
    rng = np.random.default_rng(8)
    v = random_tangent(rng)
    state = (v.copy(), sim3_exp(v))
    new_v, new_G = sim3_manifold_update(state, np.zeros(7))
    np.testing.assert_allclose(new_v, v, atol=1e-9)
    np.testing.assert_allclose(new_G.matrix(), sim3_exp(v).matrix(), atol=1e-12)

    state = (np.zeros(7), sim3_identity())
    new_v, new_G = sim3_manifold_update(state, v)
    np.testing.assert_allclose(new_G.matrix(), sim3_exp(v).matrix(), atol=1e-12)
    np.testing.assert_allclose(new_v, v, atol=1e-9)


def test_manifold_update_accumulates_left_product():
    rng = np.random.default_rng(9)
    state = (np.zeros(7), sim3_identity())
    product = np.eye(4)
    for _ in range(20):
        v_up = random_tangent(rng) * 0.05
        state = sim3_manifold_update(state, v_up)
        product = sim3_exp(v_up).matrix() @ product
    np.testing.assert_allclose(state[1].matrix(), product, atol=1e-8)
    # The tangent state tracks the same element.
    np.testing.assert_allclose(sim3_exp(state[0]).matrix(), product, atol=1e-8)


def test_residual_trivial():
    x = np.array([1.0, 2.0, 3.0])
    r, J_pose, J_land = alignment_residual_and_jacobians(sim3_identity(), x, x)
    np.testing.assert_allclose(r, np.zeros(3))
    np.testing.assert_allclose(J_pose[:, 3:6], np.eye(3))
    np.testing.assert_allclose(J_land, -np.eye(3))


def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(10)
    h = 1e-6
    for _ in range(100):
        G = sim3_exp(random_tangent(rng, omega_max=2.0))
        x = rng.uniform(-2, 2, 3)
        X = rng.uniform(-2, 2, 3)
        r, J_pose, J_land = alignment_residual_and_jacobians(G, x, X)
        scale = max(1.0, np.abs(J_pose).max())
        for k in range(7):
            step = np.zeros(7)
            step[k] = h
            _, Gp = sim3_manifold_update((sim3_log(G), G), step)
            _, Gm = sim3_manifold_update((sim3_log(G), G), -step)
            fd = (sim3_apply(Gp, x) - X - (sim3_apply(Gm, x) - X)) / (2 * h)
            assert np.abs(J_pose[:, k] - fd).max() / scale < 1e-5
        for k in range(3):
            step = np.zeros(3)
            step[k] = h
            fd = ((sim3_apply(G, x) - (X + step))
                  - (sim3_apply(G, x) - (X - step))) / (2 * h)
            np.testing.assert_allclose(J_land[:, k], fd, atol=1e-5)


def test_se3_exp_matches_sim3_exp():
    rng = np.random.default_rng(11)
    for _ in range(20):
        v6 = rng.uniform(-1, 1, 6)
        T = se3_exp(v6)
        G = sim3_exp(np.append(v6, 0.0))
        np.testing.assert_allclose(T.matrix(), G.matrix(), atol=1e-12)
        np.testing.assert_allclose(
            T.compose_after(T.inverse()).matrix(), np.eye(4), atol=1e-12)


def test_check_rejects_bad_transform():
    with pytest.raises(ValueError):
        Sim3(np.eye(3) * 1.01, 1.0, np.zeros(3)).check()
    with pytest.raises(ValueError):
        Sim3(np.eye(3), -1.0, np.zeros(3)).check()
    sim3_identity().check()
