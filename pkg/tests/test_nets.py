import math

import numpy as np
import pytest

from deeppark import nets
from deeppark.nets import (
    ACTION_BOUNDS,
    Adam,
    Conv3x3,
    ConvReluPool,
    Dense,
    MaxPool2,
    PolicyNet,
    ReLU,
    Topology,
    ValueNet,
    gaussian_log_density,
    log_density_grads,
    sample_action,
)


def _rel_err(a, b, floor=1e-6):
    # the floor keeps finite-difference roundoff noise on near-zero
    # gradients from masquerading as relative error
    return abs(a - b) / max(abs(a), abs(b), floor)


def _fd_check_params(loss_fn, params, grads, rng, n_per_block=8, h=1e-6,
                     tol=1e-4):
    """Central finite differences on a random subset of every block."""
    worst = 0.0
    for name, arr in params.items():
        grad = grads[name]
        for _ in range(min(n_per_block, arr.size)):
            idx = tuple(rng.integers(0, s) for s in arr.shape)
            old = arr[idx]
            arr[idx] = old + h
            up = loss_fn()
            arr[idx] = old - h
            down = loss_fn()
            arr[idx] = old
            fd = (up - down) / (2 * h)
            if abs(fd) < 1e-12 and abs(grad[idx]) < 1e-12:
                continue
            worst = max(worst, _rel_err(fd, grad[idx]))
    assert worst < tol, worst
    return worst


# ---------------------------------------------------------------------------
# layer-level gradients

def test_dense_gradients():
    rng = np.random.default_rng(0)
    layer = Dense(rng, 5, 4)
    x = rng.normal(size=(3, 5))
    upstream = rng.normal(size=(3, 4))

    def loss():
        return float((layer.forward(x) * upstream).sum())

    layer.gw[...] = 0.0
    layer.gb[...] = 0.0
    out = layer.forward(x)
    gx = layer.backward(upstream)
    _fd_check_params(loss, {"w": layer.w, "b": layer.b},
                     {"w": layer.gw, "b": layer.gb}, rng, n_per_block=12)
    # input gradient vs finite differences
    h = 1e-6
    for _ in range(8):
        idx = tuple(rng.integers(0, s) for s in x.shape)
        old = x[idx]
        x[idx] = old + h
        up = loss()
        x[idx] = old - h
        down = loss()
        x[idx] = old
        assert _rel_err((up - down) / (2 * h), gx[idx]) < 1e-6


def test_linear_unit_matches_closed_form():
    # one linear unit, quadratic loss: gradient has an exact formula
    rng = np.random.default_rng(1)
    layer = Dense(rng, 3, 1)
    x = rng.normal(size=(4, 3))
    target = rng.normal(size=4)
    pred = layer.forward(x)[:, 0]
    layer.gw[...] = 0.0
    layer.gb[...] = 0.0
    layer.backward((2 * (pred - target) / 4)[:, None])
    expected_gw = 2 / 4 * x.T @ (pred - target)
    expected_gb = 2 / 4 * (pred - target).sum()
    assert np.allclose(layer.gw[:, 0], expected_gw, atol=1e-14)
    assert layer.gb[0] == pytest.approx(expected_gb, abs=1e-14)


def test_relu_gradient_routing():
    layer = ReLU()
    x = np.array([[-1.0, 0.0, 2.0, 1e-12]])
    out = layer.forward(x)
    assert np.array_equal(out, [[0.0, 0.0, 2.0, 1e-12]])
    gx = layer.backward(np.ones_like(x))
    assert np.array_equal(gx, [[0.0, 0.0, 1.0, 1.0]])


@pytest.mark.parametrize("c_in,c_out,hw", [(1, 6, 8), (3, 2, 6)])
def test_conv_gradients(c_in, c_out, hw):
    rng = np.random.default_rng(2)
    layer = Conv3x3(rng, c_in, c_out)
    x = rng.normal(size=(2, hw, hw, c_in))
    upstream = rng.normal(size=(2, hw, hw, c_out))

    def loss():
        return float((layer.forward(x) * upstream).sum())

    layer.gw[...] = 0.0
    layer.gb[...] = 0.0
    layer.forward(x)
    gx = layer.backward(upstream)
    assert gx.shape == x.shape
    _fd_check_params(loss, {"w": layer.w, "b": layer.b},
                     {"w": layer.gw, "b": layer.gb}, rng, n_per_block=10)
    h = 1e-6
    for _ in range(8):
        idx = tuple(rng.integers(0, s) for s in x.shape)
        old = x[idx]
        x[idx] = old + h
        up = loss()
        x[idx] = old - h
        down = loss()
        x[idx] = old
        assert _rel_err((up - down) / (2 * h), gx[idx]) < 1e-6


def test_conv_preserves_spatial_dims():
    rng = np.random.default_rng(3)
    layer = Conv3x3(rng, 2, 5)
    out = layer.forward(rng.normal(size=(4, 10, 12, 2)))
    assert out.shape == (4, 10, 12, 5)


def test_maxpool_halves_and_routes_to_argmax():
    rng = np.random.default_rng(4)
    layer = MaxPool2()
    x = rng.normal(size=(3, 8, 10, 4))   # continuous: ties have measure zero
    out = layer.forward(x)
    assert out.shape == (3, 4, 5, 4)
    # pooled values really are window maxima
    for b in (0, 2):
        for i in (0, 3):
            for j in (0, 4):
                for c in (0, 3):
                    window = x[b, 2 * i:2 * i + 2, 2 * j:2 * j + 2, c]
                    assert out[b, i, j, c] == window.max()
    upstream = rng.normal(size=out.shape)
    gx = layer.backward(upstream)
    # conservation: every pooled gradient lands on exactly one input cell
    assert gx.sum() == pytest.approx(upstream.sum(), rel=1e-12)
    assert (gx != 0).sum() == upstream.size
    # routed to the argmax cell
    mask = (gx != 0)
    winners = np.where(mask, x, -np.inf).reshape(3, 4, 2, 5, 2, 4).max((2, 4))
    pooled = x.reshape(3, 4, 2, 5, 2, 4).max((2, 4))
    assert np.array_equal(winners, pooled)


def test_maxpool_tie_routes_to_first():
    x = np.zeros((1, 2, 2, 1))
    layer = MaxPool2()
    out = layer.forward(x)
    assert out[0, 0, 0, 0] == 0.0
    gx = layer.backward(np.ones((1, 1, 1, 1)))
    assert gx[0, 0, 0, 0] == 1.0 and gx.sum() == 1.0


def test_conv_relu_pool_matches_unfused_stack():
    rng = np.random.default_rng(5)
    fused = ConvReluPool(rng, 3, 7)
    conv = Conv3x3(np.random.default_rng(99), 3, 7)
    conv.w = fused.w.copy()
    conv.b = fused.b.copy()
    relu = ReLU()
    pool = MaxPool2()
    x = rng.normal(size=(2, 8, 8, 3))
    out_fused = fused.forward(x)
    out_stack = pool.forward(relu.forward(conv.forward(x)))
    assert np.allclose(out_fused, out_stack, atol=1e-13)

    upstream = rng.normal(size=out_fused.shape)
    fused.gw[...] = 0.0
    fused.gb[...] = 0.0
    gx_fused = fused.backward(upstream)
    conv.gw[...] = 0.0
    conv.gb[...] = 0.0
    gx_stack = conv.backward(relu.backward(pool.backward(upstream)))
    assert np.allclose(gx_fused, gx_stack, atol=1e-13)
    assert np.allclose(fused.gw, conv.gw, atol=1e-13)
    assert np.allclose(fused.gb, conv.gb, atol=1e-13)


def test_conv_relu_pool_gradients_fd():
    rng = np.random.default_rng(6)
    layer = ConvReluPool(rng, 2, 4)
    x = rng.normal(size=(2, 8, 8, 2))
    upstream = rng.normal(size=(2, 4, 4, 4))

    def loss():
        return float((layer.forward(x) * upstream).sum())

    layer.gw[...] = 0.0
    layer.gb[...] = 0.0
    layer.forward(x)
    layer.backward(upstream, need_gx=False)
    _fd_check_params(loss, {"w": layer.w, "b": layer.b},
                     {"w": layer.gw, "b": layer.gb}, rng, n_per_block=12)


# ---------------------------------------------------------------------------
# network-level behavior

def test_zero_weights_give_zero_mean_and_init_sigma():
    policy = PolicyNet(0)
    for name, arr in policy.params().items():
        if name != "log_sigma":
            arr[...] = 0.0
    rng = np.random.default_rng(1)
    out = policy.forward(rng.uniform(-1, 1, (4, 7)),
                         rng.integers(-1, 2, (4, 32, 32)).astype(np.int8))
    assert np.all(out.mu == 0.0)
    assert np.allclose(out.sigma, 0.5)


def test_mu_always_within_bounds():
    policy = PolicyNet(2)
    for name, arr in policy.params().items():
        if name != "log_sigma":
            arr[...] *= 50.0    # drive tanh deep into saturation
    rng = np.random.default_rng(3)
    out = policy.forward(rng.uniform(-1, 1, (16, 7)),
                         rng.integers(-1, 2, (16, 32, 32)).astype(np.int8))
    assert np.all(np.abs(out.mu) <= ACTION_BOUNDS)
    assert np.all(np.isfinite(out.mu))


def test_forward_deterministic():
    policy = PolicyNet(4)
    rng = np.random.default_rng(5)
    feats = rng.uniform(-1, 1, (3, 7))
    grids = rng.integers(-1, 2, (3, 32, 32)).astype(np.int8)
    a = policy.forward(feats, grids)
    b = policy.forward(feats, grids)
    assert np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma, b.sigma)


def test_sigma_independent_of_input():
    policy = PolicyNet(6)
    rng = np.random.default_rng(7)
    a = policy.forward(rng.uniform(-1, 1, (2, 7)),
                       rng.integers(-1, 2, (2, 32, 32)).astype(np.int8))
    b = policy.forward(rng.uniform(-1, 1, (5, 7)),
                       rng.integers(-1, 2, (5, 32, 32)).astype(np.int8))
    assert np.array_equal(a.sigma, b.sigma)


def test_shape_mismatch_rejected():
    policy = PolicyNet(0)
    with pytest.raises(ValueError):
        policy.forward(np.zeros((2, 6)), np.zeros((2, 32, 32), dtype=np.int8))
    with pytest.raises(ValueError):
        policy.forward(np.zeros((2, 7)), np.zeros((2, 16, 32), dtype=np.int8))


def test_grid_branch_dims_quartered():
    policy = PolicyNet(0)
    rng = np.random.default_rng(1)
    policy.forward(rng.uniform(-1, 1, (2, 7)),
                   rng.integers(-1, 2, (2, 32, 32)).astype(np.int8))
    assert policy.feature_maps.shape == (2, 16, 16, 30)


def test_orthogonal_init_is_orthogonal():
    rng = np.random.default_rng(0)
    w = nets.orthogonal(rng, 64, 32)
    assert np.allclose(w.T @ w, np.eye(32), atol=1e-12)
    w2 = nets.orthogonal(rng, 16, 48)
    assert np.allclose(w2 @ w2.T, np.eye(16), atol=1e-12)


# ---------------------------------------------------------------------------
# the Gaussian head

def test_sample_action_zero_sigma_limit():
    policy = PolicyNet(0)
    policy.log_sigma[...] = -60.0
    rng = np.random.default_rng(2)
    out = policy.forward(rng.uniform(-1, 1, (1, 7)),
                         rng.integers(-1, 2, (1, 32, 32)).astype(np.int8))
    sampled = sample_action(out, np.random.default_rng(0))
    assert np.allclose(sampled.action,
                       np.clip(out.mu[0], -ACTION_BOUNDS, ACTION_BOUNDS))


def test_log_density_at_mean():
    mu = np.array([[0.3, -0.7]])
    sigma = np.array([0.5, 0.2])
    expected = -sum(math.log(s * math.sqrt(2 * math.pi)) for s in sigma)
    assert gaussian_log_density(mu, mu, sigma)[0] == pytest.approx(expected)


def test_log_density_symmetry():
    mu = np.array([[0.1, 0.2]])
    sigma = np.array([0.4, 0.9])
    d = np.array([[0.3, -0.5]])
    assert gaussian_log_density(mu + d, mu, sigma)[0] == pytest.approx(
        gaussian_log_density(mu - d, mu, sigma)[0])


def test_sampling_moments_match():
    mu_row = np.array([[0.3, -0.2]])
    sigma = np.array([0.5, 0.7])
    out = nets.PolicyOutput(mu_row, sigma)
    rng = np.random.default_rng(123)
    n = 100_000
    raws = np.array([sample_action(out, rng).raw for _ in range(n)])
    se_mean = sigma / math.sqrt(n)
    se_std = sigma / math.sqrt(2 * n)
    assert np.all(np.abs(raws.mean(0) - mu_row[0]) < 3 * se_mean)
    assert np.all(np.abs(raws.std(0) - sigma) < 3 * se_std)
    # clipped actions stay inside the bounds, raw draws may not
    acts = np.clip(raws, -ACTION_BOUNDS, ACTION_BOUNDS)
    assert np.all(np.abs(acts) <= ACTION_BOUNDS)


def test_log_density_grads_match_fd():
    rng = np.random.default_rng(8)
    actions = rng.normal(size=(6, 2))
    mu = rng.normal(size=(6, 2)) * 0.5
    log_sigma = rng.normal(size=2) * 0.3
    upstream = rng.normal(size=6)

    def loss(m, ls):
        return float((gaussian_log_density(actions, m, np.exp(ls)) * upstream).sum())

    d_mu, d_ls = log_density_grads(actions, mu, np.exp(log_sigma), upstream)
    h = 1e-6
    for idx in [(0, 0), (3, 1), (5, 0)]:
        old = mu[idx]
        mu[idx] = old + h
        up = loss(mu, log_sigma)
        mu[idx] = old - h
        down = loss(mu, log_sigma)
        mu[idx] = old
        assert _rel_err((up - down) / (2 * h), d_mu[idx]) < 1e-6
    for j in (0, 1):
        old = log_sigma[j]
        log_sigma[j] = old + h
        up = loss(mu, log_sigma)
        log_sigma[j] = old - h
        down = loss(mu, log_sigma)
        log_sigma[j] = old
        assert _rel_err((up - down) / (2 * h), d_ls[j]) < 1e-6


# ---------------------------------------------------------------------------
# full-network gradient checks (small topology; the full-size pass runs in
# the acceptance suite)

def _small_nets(seed=0):
    topo = Topology(grid_rows=16, grid_cols=16, conv_maps=6, hidden=24)
    return PolicyNet(seed, topo), ValueNet(seed + 1, topo), topo


def test_policy_network_gradients_fd():
    policy, _, topo = _small_nets()
    rng = np.random.default_rng(9)
    feats = rng.uniform(-1, 1, (4, 7))
    grids = rng.uniform(-1, 1, (4, topo.grid_rows, topo.grid_cols))
    up_mu = rng.normal(size=(4, 2))
    up_ls = rng.normal(size=2)

    def loss():
        out = policy.forward(feats, grids)
        return float((out.mu * up_mu).sum() + (np.log(out.sigma) * up_ls).sum())

    policy.zero_grads()
    policy.forward(feats, grids)
    policy.backward(up_mu, up_ls)
    _fd_check_params(loss, policy.params(), policy.grads(),
                     rng, n_per_block=6)


def test_value_network_gradients_fd():
    _, value, topo = _small_nets()
    rng = np.random.default_rng(10)
    feats = rng.uniform(-1, 1, (4, 7))
    grids = rng.uniform(-1, 1, (4, topo.grid_rows, topo.grid_cols))
    upstream = rng.normal(size=4)

    def loss():
        return float((value.forward(feats, grids) * upstream).sum())

    value.zero_grads()
    value.forward(feats, grids)
    value.backward(upstream)
    _fd_check_params(loss, value.params(), value.grads(), rng, n_per_block=6)


# ---------------------------------------------------------------------------
# Adam

def test_adam_zero_gradient_is_identity():
    rng = np.random.default_rng(0)
    params = {"w": rng.normal(size=(3, 3))}
    before = params["w"].copy()
    opt = Adam(params, lr=1e-3)
    opt.step(params, {"w": np.zeros((3, 3))})
    assert np.array_equal(params["w"], before)


def test_adam_first_step_closed_form():
    # first update with gradient g: m-hat = g, v-hat = g^2, so the step is
    # -lr * g / (|g| + eps)
    g = np.array([0.7, -0.2, 1e-9])
    params = {"w": np.zeros(3)}
    lr, eps = 5e-5, 1e-5
    opt = Adam(params, lr=lr, eps=eps)
    opt.step(params, {"w": g.copy()})
    expected = -lr * g / (np.abs(g) + eps)
    assert np.allclose(params["w"], expected, rtol=0, atol=1e-18)


def test_adam_constant_gradient_step_magnitude():
    params = {"w": np.zeros(1)}
    lr = 1e-3
    opt = Adam(params, lr=lr, eps=1e-12)
    g = {"w": np.full(1, 0.37)}
    prev = params["w"].copy()
    for _ in range(2000):
        prev = params["w"].copy()
        opt.step(params, g)
    # with constant gradients the bias-corrected update approaches -lr
    assert abs(params["w"][0] - prev[0]) == pytest.approx(lr, rel=1e-6)


# ---------------------------------------------------------------------------
# persistence / sharing

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    policy, value, topo = _small_nets(3)
    adam_p = Adam(policy.params())
    adam_v = Adam(value.params())
    rng = np.random.default_rng(4)
    # take one optimization step so moments are non-trivial
    grads = {k: rng.normal(size=v.shape) for k, v in policy.params().items()}
    adam_p.step(policy.params(), grads)
    path = tmp_path / "ckpt.npz"
    nets.save_checkpoint(path, policy, value, adam_p, adam_v,
                         meta={"epoch": 7, "phase": 2, "task": "driver"})
    p2, v2, ap2, av2, meta = nets.load_checkpoint(path)
    assert meta == {"epoch": 7, "phase": 2, "task": "driver"}
    for name, arr in policy.params().items():
        assert np.array_equal(arr, p2.params()[name]), name
    for name, arr in value.params().items():
        assert np.array_equal(arr, v2.params()[name]), name
    assert ap2.t == adam_p.t
    for name in adam_p.m:
        assert np.array_equal(adam_p.m[name], ap2.m[name])
        assert np.array_equal(adam_p.v[name], ap2.v[name])

    feats = rng.uniform(-1, 1, (2, 7))
    grids = rng.integers(-1, 2, (2, 16, 16)).astype(np.int8)
    a = policy.forward(feats, grids)
    b = p2.forward(feats, grids)
    assert np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma, b.sigma)


def test_checkpoint_rejects_unknown_format(tmp_path):
    import json
    path = tmp_path / "bad.npz"
    meta = np.frombuffer(json.dumps({"format": "???"}).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=meta)
    with pytest.raises(ValueError):
        nets.load_checkpoint(path)


def test_clone_shares_parameters():
    policy, _, topo = _small_nets(5)
    twin = policy.clone_shared()
    policy.params()["head.w"][0, 0] = 123.456
    assert twin.params()["head.w"][0, 0] == 123.456
    rng = np.random.default_rng(6)
    feats = rng.uniform(-1, 1, (2, 7))
    grids = rng.integers(-1, 2, (2, 16, 16)).astype(np.int8)
    a = policy.forward(feats, grids)
    b = twin.forward(feats, grids)
    assert np.array_equal(a.mu, b.mu)
