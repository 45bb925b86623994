import numpy as np
import pytest

from lyapctl.errors import ValidationError
from lyapctl.neuralnet import (
    AdamState,
    ClosedLoop,
    Mlp,
    adam_step,
    closed_loop_step,
    condition_values_and_grads,
    delta_v,
    load_mlp,
    lyapunov_loss,
    mlp_backward,
    mlp_forward,
    mlp_from_json,
    mlp_init,
    mlp_params,
    mlp_to_json,
    save_mlp,
    softmax_vjp,
    v_value,
)
from lyapctl.numerics import softmax


def test_mlp_init_bounds_and_determinism():
    m1 = mlp_init([4, 8, 2], seed=5)
    m2 = mlp_init([4, 8, 2], seed=5)
    assert m1.dims == [4, 8, 2]
    for (w1, b1), (w2, b2) in zip(m1.layers, m2.layers):
        np.testing.assert_array_equal(w1, w2)
        np.testing.assert_array_equal(b1, b2)
    w0, b0 = m1.layers[0]
    assert np.abs(w0).max() <= 0.5 and np.abs(b0).max() <= 0.5  # 1/sqrt(4)


def test_mlp_forward_matches_manual():
    m = mlp_init([3, 5, 2], seed=1)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 3))
    (w0, b0), (w1, b1) = m.layers
    expect = np.maximum(x @ w0 + b0, 0.0) @ w1 + b1
    out, cache = mlp_forward(m, x)
    np.testing.assert_allclose(out, expect, rtol=1e-14)
    assert len(cache) == 3

    out1, _ = mlp_forward(m, x[0])
    assert out1.shape == (2,)
    np.testing.assert_allclose(out1, expect[0], rtol=1e-14)


def test_mlp_forward_rejects_wrong_width():
    m = mlp_init([3, 4, 1], seed=0)
    with pytest.raises(ValidationError):
        mlp_forward(m, np.zeros(5))


def test_mlp_validation():
    with pytest.raises(ValidationError):
        Mlp([])
    with pytest.raises(ValidationError):
        Mlp([(np.zeros((3, 4)), np.zeros(4)), (np.zeros((5, 1)), np.zeros(1))])


def _num_grad(f, arrs, h=1e-6):
    grads = []
    for a in arrs:
        g = np.zeros_like(a)
        fa, fg = a.ravel(), g.ravel()
        for i in range(fa.size):
            orig = fa[i]
            fa[i] = orig + h
            up = f()
            fa[i] = orig - h
            dn = f()
            fa[i] = orig
            fg[i] = (up - dn) / (2 * h)
        grads.append(g)
    return grads


def test_mlp_backward_matches_finite_differences():
    m = mlp_init([3, 6, 2], seed=7)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(5, 3))
    proj = rng.normal(size=(5, 2))

    _, cache = mlp_forward(m, x)
    # stay off the rectifier kinks so central differences are valid
    w0, b0 = m.layers[0]
    assert np.abs(x @ w0 + b0).min() > 1e-3

    def objective():
        out, _ = mlp_forward(m, x)
        return float(np.sum(out * proj))

    grads, gx = mlp_backward(m, cache, proj)
    flat = [a for layer in grads for a in layer]
    num = _num_grad(objective, mlp_params(m))
    for a, b in zip(flat, num):
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-8)

    x_work = x.copy()

    def objective_x():
        out, _ = mlp_forward(m, x_work)
        return float(np.sum(out * proj))

    num_x = _num_grad(objective_x, [x_work])[0]
    np.testing.assert_allclose(gx, num_x, rtol=1e-5, atol=1e-8)


def test_adam_step_matches_reference():
    rng = np.random.default_rng(3)
    p = rng.normal(size=(4, 2))
    ref_p = p.copy()
    m_buf = np.zeros_like(p)
    v_buf = np.zeros_like(p)
    state = AdamState(lr=0.01)
    for t in range(1, 6):
        g = rng.normal(size=(4, 2))
        adam_step(state, [p], [g.copy()])
        m_buf = 0.9 * m_buf + 0.1 * g
        v_buf = 0.999 * v_buf + 0.001 * g * g
        m_hat = m_buf / (1 - 0.9 ** t)
        v_hat = v_buf / (1 - 0.999 ** t)
        ref_p = ref_p - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)
        np.testing.assert_allclose(p, ref_p, rtol=1e-12, atol=1e-15)


def test_adam_step_shape_mismatch():
    state = AdamState()
    p = np.zeros((2, 2))
    adam_step(state, [p], [np.ones((2, 2))])
    with pytest.raises(ValidationError):
        adam_step(state, [p], [np.ones(3)])


def test_softmax_vjp_matches_finite_differences():
    rng = np.random.default_rng(9)
    x = rng.normal(size=4)
    g = rng.normal(size=4)
    p = softmax(x)

    def f():
        return float(softmax(x) @ g)

    num = _num_grad(f, [x])[0]
    np.testing.assert_allclose(softmax_vjp(p, g), num, rtol=1e-6, atol=1e-9)


def test_closed_loop_step_composition(loop_factory):
    cl = loop_factory(11)
    rng = np.random.default_rng(12)
    y = rng.uniform(size=cl.num_classes)
    u, _ = mlp_forward(cl.controller, y)
    np.testing.assert_allclose(closed_loop_step(cl, y),
                               cl.plant.predict_proba(u), rtol=1e-14)
    np.testing.assert_allclose(closed_loop_step(cl, y).sum(), 1.0, rtol=1e-12)


def test_v_and_delta_v_batch_consistency(loop_factory):
    cl = loop_factory(13)
    rng = np.random.default_rng(14)
    ys = rng.uniform(size=(6, cl.num_classes))
    vs = v_value(cl, ys)
    dvs = delta_v(cl, ys)
    for i, y in enumerate(ys):
        np.testing.assert_allclose(vs[i], v_value(cl, y), rtol=1e-14)
        np.testing.assert_allclose(dvs[i], delta_v(cl, y), rtol=1e-12, atol=1e-14)


def test_closed_loop_validation(loop_factory):
    cl = loop_factory(15)
    with pytest.raises(ValidationError, match="one-hot"):
        ClosedLoop(cl.controller, cl.plant, cl.lyapunov,
                   np.full(cl.num_classes, 1.0 / cl.num_classes))
    with pytest.raises(ValidationError):
        ClosedLoop(cl.controller, cl.plant, mlp_init([cl.num_classes, 4, 2], 0),
                   cl.equilibrium)


def test_condition_grads_match_finite_differences(loop_factory):
    cl = loop_factory(16)
    rng = np.random.default_rng(17)
    xs = rng.uniform(0.1, 0.9, size=(4, cl.num_classes))
    v, dv, gv, gdv = condition_values_and_grads(cl, xs)
    x_work = xs.copy()

    def v_sum():
        return float(np.sum(v_value(cl, x_work)))

    def dv_sum():
        return float(np.sum(delta_v(cl, x_work)))

    np.testing.assert_allclose(gv, _num_grad(v_sum, [x_work])[0],
                               rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(gdv, _num_grad(dv_sum, [x_work])[0],
                               rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(v, v_value(cl, xs), rtol=1e-14)
    np.testing.assert_allclose(dv, delta_v(cl, xs), rtol=1e-12, atol=1e-14)


def test_lyapunov_loss_value_oracle(loop_factory):
    """Recompute the loss from public forward passes only."""
    cl = loop_factory(18)
    rng = np.random.default_rng(19)
    batch = rng.uniform(size=(7, cl.num_classes))
    lam = 0.7
    loss, _, _ = lyapunov_loss(cl, batch, lam)

    v = v_value(cl, batch)
    dv = delta_v(cl, batch)
    v_eq = v_value(cl, cl.equilibrium)
    eq_res = closed_loop_step(cl, cl.equilibrium) - cl.equilibrium
    expect = (np.mean(np.maximum(-v, 0) + np.maximum(dv, 0))
              + v_eq ** 2 + lam * np.sum(eq_res ** 2))
    np.testing.assert_allclose(loss, expect, rtol=1e-12)


def test_lyapunov_loss_gradients_match_finite_differences(loop_factory):
    cl = loop_factory(21, c=3, hidden=6, feat=4)
    rng = np.random.default_rng(22)
    batch = rng.uniform(size=(5, 3))
    v, dv, _, _ = condition_values_and_grads(cl, batch)
    assert min(np.abs(v).min(), np.abs(dv).min()) > 1e-3  # off the hinge kinks

    loss, theta, phi = lyapunov_loss(cl, batch, 1.0)

    def f():
        return lyapunov_loss(cl, batch, 1.0)[0]

    num_theta = _num_grad(f, mlp_params(cl.controller), h=1e-6)
    num_phi = _num_grad(f, mlp_params(cl.lyapunov), h=1e-6)
    for a, b in zip([g for lay in theta for g in lay], num_theta):
        np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-8)
    for a, b in zip([g for lay in phi for g in lay], num_phi):
        np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-8)


def test_lyapunov_loss_rejects_empty_batch(loop_factory):
    cl = loop_factory(23)
    with pytest.raises(ValidationError):
        lyapunov_loss(cl, np.zeros((0, cl.num_classes)), 1.0)


def test_mlp_json_round_trip(tmp_path):
    m = mlp_init([3, 5, 2], seed=30)
    back = mlp_from_json(mlp_to_json(m))
    for (w1, b1), (w2, b2) in zip(m.layers, back.layers):
        np.testing.assert_array_equal(w1, w2)
        np.testing.assert_array_equal(b1, b2)

    path = tmp_path / "net.json"
    save_mlp(m, path)
    loaded = load_mlp(path)
    assert loaded.dims == m.dims


def test_mlp_from_json_rejects_corruption():
    m = mlp_init([3, 4, 1], seed=31)
    payload = mlp_to_json(m)
    payload["dims"] = [3, 9, 1]
    with pytest.raises(ValidationError):
        mlp_from_json(payload)
    with pytest.raises(ValidationError):
        mlp_from_json({"layers": []})
