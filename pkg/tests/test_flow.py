import numpy as np
import pytest

from flowssc.flow import (
    StepSchedule,
    euler_oracle,
    flow_matching_loss,
    gaussian_velocity,
    interpolate,
    sample,
    sample_t_d,
    self_consistency_target,
    shortcut_loss,
)
from flowssc.flow.train import FlowTrainConfig, draw_batch, train_flow
from flowssc.dit import DiT, DiTConfig
from flowssc.tensor import Parameter, Tensor, backward, ops
from flowssc.triplane import TriplaneLayout


class FieldNet:
    """Velocity given by a plain function; records the (t, d) it is queried at."""

    def __init__(self, fn):
        self.fn = fn
        self.queries = []

    def __call__(self, h, cond, t, d):
        self.queries.append((np.array(t, dtype=float), np.array(d, dtype=float)))
        h = h.data if isinstance(h, Tensor) else np.asarray(h)
        return Tensor(self.fn(h, np.asarray(t, dtype=float), np.asarray(d, dtype=float)))


class LinearNet:
    """v = h @ W + b * d, enough structure for gradient-routing checks."""

    def __init__(self, rng, dims):
        self.w = Parameter(0.3 * rng.standard_normal((dims, dims)))
        self.b = Parameter(rng.standard_normal((1, dims)))

    def __call__(self, h, cond, t, d):
        h = h if isinstance(h, Tensor) else Tensor(np.asarray(h))
        d = np.asarray(d, dtype=float).reshape(-1, 1)
        return ops.matmul(h, self.w) + self.b * d


def test_interpolate_endpoints(rng):
    a, b = rng.standard_normal((3, 4, 2)), rng.standard_normal((3, 4, 2))
    assert np.array_equal(interpolate(a, b, np.zeros(3)), a)
    assert np.array_equal(interpolate(a, b, np.ones(3)), b)
    mid = interpolate(a, b, np.array([0.0, 0.5, 1.0]))
    np.testing.assert_allclose(mid[1], 0.5 * (a[1] + b[1]))
    with pytest.raises(ValueError):
        interpolate(a, b[:, :3], np.zeros(3))


# -- (t, d) sampling -------------------------------------------------------

def test_sample_t_d_fraction_zero(rng):
    t, d, sc = sample_t_d(StepSchedule(), 0.0, rng, 1000)
    assert not sc.any() and not d.any()
    assert t.min() >= 0 and t.max() < 1


def test_sample_t_d_enumerates_small_grids(rng):
    t, d, _ = sample_t_d(StepSchedule(2), 1.0, rng, 500)
    assert set(zip(t.tolist(), d.tolist())) == {(0.0, 0.5)}
    t, d, _ = sample_t_d(StepSchedule(4), 1.0, rng, 4000)
    assert set(zip(t.tolist(), d.tolist())) == {(0.0, 0.25), (0.25, 0.25), (0.5, 0.25), (0.0, 0.5)}


def test_sample_t_d_consistency_rows_on_grid(rng):
    sched = StepSchedule()
    t, d, sc = sample_t_d(sched, 1.0, rng, 20000)
    assert np.all(t + 2 * d <= 1.0)
    assert np.all(d >= sched.delta)
    np.testing.assert_array_equal(np.rint(t / d) * d, t)
    np.testing.assert_array_equal(np.log2(d * 128) % 1, 0)


def test_sample_t_d_fraction_frequency():
    _, _, sc = sample_t_d(StepSchedule(), 0.25, np.random.default_rng(7), 100_000)
    assert abs(sc.mean() - 0.25) < 0.01


def test_sample_t_d_rejects_bad_fraction(rng):
    with pytest.raises(ValueError):
        sample_t_d(StepSchedule(), 1.5, rng, 4)


def test_schedule_resolution_power_of_two():
    with pytest.raises(ValueError):
        StepSchedule(100)
    assert StepSchedule().consistency_steps()[[0, -1]].tolist() == [1 / 128, 0.5]


def test_query_d_finest_level_is_instantaneous():
    s = StepSchedule()
    assert s.query_d(1 / 128) == 0.0
    assert s.query_d(1 / 64) == 1 / 64
    assert s.query_d(1.0) == 1.0


# -- objectives ------------------------------------------------------------

def test_constant_net_loss(rng):
    noise, gt = rng.standard_normal((4, 5, 2)), rng.standard_normal((4, 5, 2))
    net = FieldNet(lambda h, t, d: np.full_like(h, 0.7))
    loss = flow_matching_loss(net, noise, gt, rng.random(4), None)
    assert loss.item() == pytest.approx(np.mean((0.7 - (gt - noise)) ** 2))


def test_exact_linear_target_zero_loss(rng):
    noise = rng.standard_normal((4, 5, 2))
    gt = noise + 1.5
    net = FieldNet(lambda h, t, d: np.full_like(h, 1.5))
    assert flow_matching_loss(net, noise, gt, rng.random(4), None).item() == pytest.approx(0.0, abs=1e-12)


def test_self_consistency_target_two_steps(f64):
    net = FieldNet(lambda h, t, d: -h + t.reshape(-1, 1))
    h = np.array([[1.0, 2.0]])
    target = self_consistency_target(net, h, [0.25], [0.125], None)
    s1 = -h + 0.25
    s2 = -(h + 0.125 * s1) + 0.375
    np.testing.assert_allclose(target, 0.5 * (s1 + s2))


def test_self_consistency_bounds():
    net = FieldNet(lambda h, t, d: h)
    with pytest.raises(ValueError):
        self_consistency_target(net, np.zeros((1, 2)), [0.75], [0.25], None)
    with pytest.raises(ValueError):
        self_consistency_target(net, np.zeros((1, 2)), [0.0], [1 / 512], None)


def test_shortcut_loss_queries_doubled_step(rng):
    net = FieldNet(lambda h, t, d: np.zeros_like(h))
    h0, h1 = rng.standard_normal((2, 3, 2)), rng.standard_normal((2, 3, 2))
    shortcut_loss(net, h0, h1, None, np.array([0.5, 0.0]), np.array([0.0, 0.125]), np.array([False, True]))
    # target pass at d, then the trained prediction at 2d
    assert net.queries[0][1].tolist() == [0.125]
    assert net.queries[-1][1].tolist() == [0.0, 0.25]


def test_consistency_target_blocks_gradient(f64, rng):
    net = LinearNet(rng, 3)
    h0, h1 = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    t = np.array([0.0, 0.25, 0.5, 0.125])
    d = np.array([0.25, 0.125, 0.25, 0.0625])
    sc = np.ones(4, dtype=bool)
    loss, _ = shortcut_loss(net, h0, h1, None, t, d, sc)
    backward(loss)
    grads = net.w.grad.copy(), net.b.grad.copy()

    # same objective with the target frozen into a constant
    net.w.grad = net.b.grad = None
    h_t = interpolate(h0, h1, t)
    target = self_consistency_target(net, h_t, t, d, None)
    pred = net(h_t, None, t, 2 * d)
    backward(ops.mean((pred - target) * (pred - target)))
    np.testing.assert_allclose(grads[0], net.w.grad, rtol=1e-10)
    np.testing.assert_allclose(grads[1], net.b.grad, rtol=1e-10)


def test_shortcut_loss_parts(rng):
    net = FieldNet(lambda h, t, d: np.zeros_like(h))
    h0, h1 = rng.standard_normal((4, 3, 2)), rng.standard_normal((4, 3, 2))
    sc = np.array([False, False, True, True])
    total, parts = shortcut_loss(net, h0, h1, None, np.array([0.1, 0.2, 0.0, 0.5]),
                                 np.array([0.0, 0.0, 0.25, 0.25]), sc)
    fm = np.mean((h1 - h0)[:2] ** 2)
    assert parts["fm_loss"] == pytest.approx(fm)
    assert parts["sc_loss"] == 0.0
    assert parts["total"] == pytest.approx(fm / 2)
    assert parts["sc_fraction"] == 0.5


# -- sampling --------------------------------------------------------------

def test_one_step_zero_net_returns_noise(rng):
    noise = rng.standard_normal((2, 5, 3))
    out = sample(FieldNet(lambda h, t, d: np.zeros_like(h)), None, 1, noise=noise)
    assert np.array_equal(out, noise)


@pytest.mark.parametrize("n", [1, 2, 8, 128])
def test_constant_field_exact(n, rng):
    noise = rng.standard_normal((2, 4))
    out = sample(FieldNet(lambda h, t, d: np.full_like(h, -0.8)), None, n, noise=noise)
    np.testing.assert_allclose(out, noise - 0.8, atol=1e-6)


def test_euler_first_order_convergence(f64):
    # dh/dt = a h has the exact flow h0 * exp(a)
    a = 0.9
    net = FieldNet(lambda h, t, d: a * h)
    h0 = np.array([[1.0, -2.0]])
    errors = [np.abs(euler_oracle(net, None, n, noise=h0) - h0 * np.exp(a)).max() for n in (32, 64, 128, 256)]
    ratios = np.array(errors[:-1]) / np.array(errors[1:])
    assert np.all((ratios > 1.8) & (ratios < 2.2))


def test_sampler_paths_agree_for_step_blind_net(rng):
    net = FieldNet(lambda h, t, d: np.sin(h) * (1 + t.reshape(-1, 1)))
    noise = rng.standard_normal((3, 4))
    for n in (1, 4, 32):
        np.testing.assert_array_equal(sample(net, None, n, noise=noise), euler_oracle(net, None, n, noise=noise))


def test_sampler_time_grid_exact():
    net = FieldNet(lambda h, t, d: np.zeros_like(h))
    sample(net, None, 8, noise=np.zeros((1, 2)))
    ts = [q[0][0] for q in net.queries]
    ds = [q[1][0] for q in net.queries]
    assert ts == [k / 8 for k in range(8)]
    assert ts[-1] + 1 / 8 == 1.0
    assert ds == [0.125] * 8
    net.queries.clear()
    sample(net, None, 128, noise=np.zeros((1, 2)))
    assert all(q[1][0] == 0.0 for q in net.queries)  # finest level queries d = 0


@pytest.mark.parametrize("n", [0, 3, 6, 256])
def test_invalid_step_counts(n):
    with pytest.raises(ValueError):
        sample(FieldNet(lambda h, t, d: h), None, n, noise=np.zeros((1, 2)))


def test_sample_is_seeded():
    net = FieldNet(lambda h, t, d: np.zeros_like(h))
    a = sample(net, np.zeros((2, 3)), 1, seed=5)
    assert np.array_equal(a, sample(net, np.zeros((2, 3)), 1, seed=5))
    assert not np.array_equal(a, sample(net, np.zeros((2, 3)), 1, seed=6))


# -- gaussian closed form --------------------------------------------------

def test_gaussian_velocity_matches_monte_carlo_regression():
    # in 1-D the conditional mean is linear in x_t; fit it by least squares
    r = np.random.default_rng(0)
    mu, sigma = 1.3, 0.6
    for t in (0.2, 0.5, 0.85):
        x0 = r.standard_normal(400_000)
        x1 = mu + sigma * r.standard_normal(400_000)
        xt = (1 - t) * x0 + t * x1
        slope, intercept = np.polyfit(xt, x1 - x0, 1)
        probe = np.array([[-1.0], [0.0], [2.0]])
        want = gaussian_velocity(probe, np.full(3, t), np.array([mu]), sigma)[:, 0]
        np.testing.assert_allclose(slope * probe[:, 0] + intercept, want, atol=0.01)


def test_gaussian_velocity_standard_case_is_not_zero():
    # identical endpoint laws still give a non-zero field away from t = 1/2
    x = np.array([[1.0, -2.0]])
    for t in (0.1, 0.3, 0.9):
        v = gaussian_velocity(x, np.array([t]), np.zeros(2), 1.0)
        np.testing.assert_allclose(v, (2 * t - 1) / ((1 - t) ** 2 + t ** 2) * x)
    assert np.allclose(gaussian_velocity(x, np.array([0.5]), np.zeros(2), 1.0), 0.0)


# -- training loop ---------------------------------------------------------

TINY = DiTConfig(TriplaneLayout(4, 4, 2, 2), patch=2, embed=8, depth=1, heads=2, mlp_ratio=2, time_bands=2)


def _latents(seed, n=6):
    r = np.random.default_rng(seed)
    gt = r.standard_normal((n, TINY.layout.n_tokens, 2)).astype(np.float32)
    return gt, (gt + 0.3 * r.standard_normal(gt.shape)).astype(np.float32)


def test_draw_batch_deterministic():
    gt, cond = _latents(0)
    cfg = FlowTrainConfig(batch_size=4, seed=3)
    a, b = draw_batch(gt, cond, cfg, 5), draw_batch(gt, cond, cfg, 5)
    assert np.array_equal(a.h_noise, b.h_noise) and np.array_equal(a.t, b.t)
    assert not np.array_equal(a.h_noise, draw_batch(gt, cond, cfg, 6).h_noise)


def test_train_flow_reproducible_and_learns(tmp_path):
    gt, cond = _latents(1)
    cfg = FlowTrainConfig(iterations=60, batch_size=4, lr=3e-3, warmup=5, seed=0)
    runs = []
    for k in range(2):
        net = DiT(TINY, np.random.default_rng(0))
        res = train_flow(net, gt, cond, cfg, csv_path=tmp_path / f"log{k}.csv")
        runs.append((net.state_dict(), res.history))
    for name, v in runs[0][0].items():
        assert np.array_equal(v, runs[1][0][name])
    fm = [r["fm_loss"] for r in runs[0][1] if not np.isnan(r["fm_loss"])]
    assert np.mean(fm[-10:]) < np.mean(fm[:10])
    header = (tmp_path / "log0.csv").read_text().splitlines()[0]
    assert header == "iteration,fm_loss,sc_loss,total"


def test_chunked_training_matches_uninterrupted():
    gt, cond = _latents(2)
    cfg = FlowTrainConfig(iterations=8, batch_size=2, warmup=2, seed=1)
    whole = DiT(TINY, np.random.default_rng(0))
    train_flow(whole, gt, cond, cfg)
    chunked = DiT(TINY, np.random.default_rng(0))
    first = train_flow(chunked, gt, cond, cfg, stop_iteration=3)
    train_flow(chunked, gt, cond, cfg, start_iteration=3, optimizer_state=first.optimizer.state())
    for name, v in whole.state_dict().items():
        assert np.array_equal(v, chunked.state_dict()[name]), name
