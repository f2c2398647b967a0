import io

import numpy as np
import pytest

from cmm import autodiff as ad
from cmm.autodiff import Tape, Tensor
from cmm.dynamics import (
    TRAJECTORY_HEADER,
    LatentState,
    NoiseSpec,
    analyze_trajectory,
    apply_noise,
    equilibrium_residual,
    euler_node_step,
    h_step,
    l_step,
    mean_jacobian_diag,
    rh_stable_penalty,
    rh_unstable_penalty,
    rollout,
    trajectory_csv,
)
from cmm.net import Model, ModelParams

from conftest import tiny_config


def identity(u):
    return u * 1.0


def rand_state(rng, shape=(2, 4, 8)):
    return LatentState(Tensor(rng.normal(size=shape)), Tensor(rng.normal(size=shape))), Tensor(rng.normal(size=shape))


def slot_rngs(n, seed=0):
    return [np.random.default_rng([seed, i]) for i in range(n)]


def test_l_and_h_step_identity(rng):
    st, x = rand_state(rng)
    np.testing.assert_array_equal(l_step(st, x, identity).data, st.z_H.data + st.z_L.data + x.data)
    np.testing.assert_array_equal(h_step(st, identity).data, st.z_H.data + st.z_L.data)


@pytest.mark.parametrize("kind", ["additive", "multiplicative"])
def test_sigma_zero_is_noiseless_bitwise(kind, rng):
    st, x = rand_state(rng)
    p = ModelParams.init(tiny_config(), seed=1)
    f = Model(p).f
    base = l_step(st, x, f).data
    noisy = l_step(st, x, f, NoiseSpec(kind, 0.0), slot_rngs(2)).data
    assert base.tobytes() == noisy.tobytes()
    assert h_step(st, f).data.tobytes() == h_step(st, f, NoiseSpec(kind, 0.0), slot_rngs(2)).data.tobytes()


def test_noise_none_ignores_sigma(rng):
    st, x = rand_state(rng)
    assert l_step(st, x, identity, NoiseSpec("none", 5.0)).data.tobytes() == l_step(st, x, identity).data.tobytes()


@pytest.mark.parametrize("step", ["l", "h"])
def test_additive_noise_moments(step):
    r = np.random.default_rng(3)
    shape = (4, 50, 500)  # 1e5 elements
    st = LatentState(Tensor(r.normal(size=shape)), Tensor(r.normal(size=shape)))
    x = Tensor(r.normal(size=shape))
    noise = NoiseSpec("additive", 0.01)
    if step == "l":
        d = l_step(st, x, identity, noise, slot_rngs(4)).data - l_step(st, x, identity).data
    else:
        d = h_step(st, identity, noise, slot_rngs(4)).data - h_step(st, identity).data
    assert abs(d.mean()) < 0.05 * 0.01
    assert abs(d.std() / 0.01 - 1) < 0.05


def test_multiplicative_noise_moments():
    r = np.random.default_rng(4)
    z = Tensor(r.uniform(1, 2, size=(4, 50, 500)))
    out = apply_noise(z, NoiseSpec("multiplicative", 0.01), slot_rngs(4))
    ratio = out.data / z.data - 1
    assert abs(ratio.mean()) < 0.05 * 0.01
    assert abs(ratio.std() / 0.01 - 1) < 0.05


def test_per_slot_streams_independent_of_neighbours(rng):
    z = Tensor(np.zeros((3, 2, 2)))
    a = apply_noise(z, NoiseSpec("additive", 1.0), slot_rngs(3)).data
    rr = slot_rngs(3)
    rr[1] = np.random.default_rng(999)  # a replaced neighbour
    b = apply_noise(z, NoiseSpec("additive", 1.0), rr).data
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[2], b[2])


def test_noise_requires_one_rng_per_row():
    with pytest.raises(ValueError):
        apply_noise(Tensor(np.zeros((3, 2))), NoiseSpec("additive", 0.1), slot_rngs(2))


def _model(**kw):
    return Model(ModelParams.init(tiny_config(**kw), seed=5))


def test_rollout_step_counts():
    m = _model()
    x = m.embed(np.zeros((1, 4), int))
    carry = LatentState(Tensor(x.data.copy()), Tensor(np.zeros_like(x.data)))
    trace = []
    with Tape():
        rollout(x, carry, m, 1, 1, "train", trace=trace)
    assert [k for k, _ in trace] == ["l", "h"]
    trace = []
    with Tape():
        rollout(x, carry, m, 3, 6, "train", trace=trace)
    assert sum(k == "l" for k, _ in trace) == 18 and sum(k == "h" for k, _ in trace) == 3
    recording = [rec for _, rec in trace]
    assert recording == [False] * 14 + [True] * 7


def test_rollout_train_eval_same_forward():
    m = _model()
    x = m.embed(np.array([[1, 2, 0, 4], [3, 3, 1, 0]]))
    carry = LatentState(Tensor(x.data.copy()), Tensor(np.zeros_like(x.data)))
    with Tape():
        a = rollout(x, carry, m, 2, 3, "train")
    b = rollout(x, carry, m, 2, 3, "eval")
    for u, v in zip((a[0].z_H, a[0].z_L, a[1], a[2]), (b[0].z_H, b[0].z_L, b[1], b[2])):
        assert u.data.tobytes() == v.data.tobytes()
    assert not a[0].z_H.requires_grad


def test_rollout_rejects_bad_mode():
    m = _model()
    x = m.embed(np.zeros((1, 4), int))
    with pytest.raises(ValueError):
        rollout(x, LatentState(x, x), m, 1, 1, "inference")


def test_euler_unit_step_is_discrete_update(rng):
    m = _model()
    z, x = Tensor(rng.normal(size=(2, 4, 8))), Tensor(rng.normal(size=(2, 4, 8)))
    f = lambda z, x: m.f(z + x)  # noqa: E731
    assert euler_node_step(z, x, f, 1.0).data.tobytes() == f(z, x).data.tobytes()


def test_euler_half_steps_differ(rng):
    m = _model()
    z, x = Tensor(rng.normal(size=(2, 4, 8))), Tensor(rng.normal(size=(2, 4, 8)))
    f = lambda z, x: m.f(z + x)  # noqa: E731
    two = euler_node_step(euler_node_step(z, x, f, 0.5), x, f, 0.5)
    assert not np.allclose(two.data, euler_node_step(z, x, f, 1.0).data)


def test_euler_zero_field_decays(rng):
    z = Tensor(rng.normal(size=(3,)))
    out = euler_node_step(z, z, lambda z, x: z * 0.0, 0.25)
    np.testing.assert_allclose(out.data, 0.75 * z.data)
    with pytest.raises(ValueError):
        euler_node_step(z, z, lambda z, x: z, 0.0)


def test_equilibrium_residual_identity_cases(rng):
    z_H = Tensor(rng.normal(size=(2, 3)))
    assert float(equilibrium_residual(LatentState(z_H, Tensor(np.zeros((2, 3)))), identity).data) == 0.0
    z_L = rng.normal(size=(2, 3))
    r = float(equilibrium_residual(LatentState(z_H, Tensor(z_L)), identity).data)
    assert r == pytest.approx(np.mean(z_L**2), rel=1e-12)
    x = Tensor(rng.normal(size=(2, 3)))
    r = float(equilibrium_residual(LatentState(z_H, Tensor(z_L)), identity, "x_hat", x).data)
    assert r == pytest.approx(np.mean(z_L**2), rel=1e-12)
    with pytest.raises(ValueError):
        equilibrium_residual(LatentState(z_H, z_H), identity, "x_hat")


@pytest.mark.parametrize("kind", ["z_H", "x_hat"])
def test_equilibrium_residual_param_fd(kind, rng):
    m = _model()
    for _, t in m.params:
        t.data[...] += rng.normal(0, 0.1, t.data.shape)
    st, x = rand_state(rng)
    for name in ("block1.ch_w2", "block0.tok_w1", "out_norm"):
        f = lambda: equilibrium_residual(st, m.f, kind, x)  # noqa: E731
        assert ad.finite_diff_check(f, m.params[name], h=1e-5) < 1e-4


def linear_map(A):
    K = A.shape[0]

    def f(u):
        B = u.shape[0]
        return ad.reshape(ad.matmul(ad.reshape(u, (B, K)), Tensor(A.T)), u.shape)

    return f


def test_mu_diagonal_exact():
    f = linear_map(np.diag([1.0, 2.0, 3.0]))
    for seed in range(5):
        mu = mean_jacobian_diag(f, Tensor(np.random.default_rng(seed).normal(size=(1, 3))), 1, 1e-5, np.random.default_rng(seed))
        assert float(mu.data) == pytest.approx(2.0, abs=1e-9)


def test_mu_identity_is_one(rng):
    assert float(mean_jacobian_diag(identity, Tensor(rng.normal(size=(2, 4, 8))), 3, 1e-5).data) == pytest.approx(1.0, abs=1e-9)


def dense_jacobian(f, K, point):
    """Exact Jacobian through K reverse passes (one unit cotangent each)."""
    z = Tensor(point.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(z)
    rows = []
    for i in range(K):
        seed = np.zeros_like(y.data)
        seed.reshape(-1)[i] = 1.0
        (g,) = tape.gradients(y, [z], seed=seed)
        rows.append(g.reshape(-1))
    return np.array(rows)


def hutchinson_within_3se(A, probes, rng):
    K = A.shape[0]
    f = linear_map(A)
    J = dense_jacobian(f, K, rng.normal(size=(1, K)))
    exact = np.trace(J) / K
    point = Tensor(rng.normal(size=(1, K)))
    est = [float(mean_jacobian_diag(f, point, 1, 1e-5, rng).data) for _ in range(probes)]
    se = np.std(est, ddof=1) / np.sqrt(probes)
    return abs(np.mean(est) - exact) <= 3 * se + 1e-12, J


def test_hutchinson_random_8x8():
    rng = np.random.default_rng(8)
    A = rng.normal(size=(8, 8))
    ok, J = hutchinson_within_3se(A, 1000, rng)
    np.testing.assert_allclose(J, A, atol=1e-12)
    assert ok


@pytest.mark.parametrize("mu,stable,unstable", [(0.5, 0.0, 0.25), (1.0, 0.0, 0.0), (1.5, 0.25, 0.0)])
def test_rh_penalty_values(mu, stable, unstable):
    assert float(rh_stable_penalty(mu).data) == stable
    assert float(rh_unstable_penalty(mu).data) == unstable


def test_rh_complementarity():
    for mu in np.linspace(-3, 3, 601):
        s, u = float(rh_stable_penalty(mu).data), float(rh_unstable_penalty(mu).data)
        assert s == 0 or u == 0
        assert (s == 0 and u == 0) == (mu == 1.0)


def test_contraction_certificate():
    rng = np.random.default_rng(11)
    K = 12
    Q, _ = np.linalg.qr(rng.normal(size=(K, K)))
    A = 0.5 * Q  # spectral norm exactly 0.5
    b = rng.normal(size=K)
    f = lambda u: linear_map(A)(u) + Tensor(b)  # noqa: E731
    z_star = np.linalg.solve(np.eye(K) - A, b)
    z = rng.normal(size=(1, K)) * 10
    ratios = []
    for _ in range(30):
        nz = f(Tensor(z)).data
        ratios.append(np.linalg.norm(nz - z_star) / np.linalg.norm(z - z_star))
        z = nz
    assert max(ratios) < 1
    mu = mean_jacobian_diag(f, Tensor(z), 4, 1e-5, rng)
    assert float(rh_stable_penalty(mu).data) == 0.0


def test_trajectory_contractive_distance_decreases(rng):
    x = Tensor(rng.normal(size=(1, 4, 8)))
    init = LatentState(Tensor(rng.normal(size=(1, 4, 8))), Tensor(np.zeros((1, 4, 8))))
    rows = analyze_trajectory(lambda u: u * 0.5, x, init, 40, n_l=1)
    d = [r[1] for r in rows]
    assert all(a > b for a, b in zip(d[:-1], d[1:-1]))
    assert np.isnan(rows[0][2])
    assert all(abs(r[4] - 0.5) < 1e-6 for r in rows)


def test_trajectory_identity_fixed_at_zero():
    z = Tensor(np.zeros((1, 2, 3)))
    rows = analyze_trajectory(identity, z, LatentState(z, z), 5)
    assert all(r[1] == 0 for r in rows)
    assert all(r[2] == 0 for r in rows[1:])


def test_trajectory_csv_shape_and_determinism(rng):
    m = _model()
    x = m.embed(np.array([[1, 0, 2, 3]]))
    init = LatentState(Tensor(x.data.copy()), Tensor(np.zeros_like(x.data)))
    a = trajectory_csv(analyze_trajectory(m.f, x, init, 3, n_l=2))
    b = trajectory_csv(analyze_trajectory(m.f, x, init, 3, n_l=2))
    lines = a.strip().split("\n")
    assert lines[0] == ",".join(TRAJECTORY_HEADER)
    assert len(lines) == 4 and a == b
    buf = io.StringIO()
    trajectory_csv(analyze_trajectory(m.f, x, init, 3, n_l=2), buf)
    assert buf.getvalue() == a
    with pytest.raises(ValueError):
        analyze_trajectory(m.f, x, init, 2)
