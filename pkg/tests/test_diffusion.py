import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dkdm.diffusion import (
    GaussianParams,
    ModelOut,
    build_schedule,
    ddim_step,
    denoise_step,
    gaussian_kl,
    generate,
    hybrid_loss,
    mean_from_eps,
    p_step,
    posterior_params,
    q_sample,
    respace,
    respaced_timesteps,
    sigma_from_v,
)
from dkdm.engine import tensor as E
from dkdm.engine.tensor import Tensor

from conftest import small_model


def test_linear_schedule_endpoints():
    s = build_schedule("linear", 1000)
    assert s.betas[0] == pytest.approx(1e-4, abs=1e-15)
    assert s.betas[-1] == pytest.approx(0.02, abs=1e-15)
    assert np.all(np.diff(s.alpha_bar) < 0) and s.alpha_bar[0] == 1.0


def test_single_step_schedule():
    s = build_schedule("linear", 1)
    assert s.T == 1 and s.alpha_bar[1] == 1.0 - s.betas[0]


def test_alpha_bar_product_oracle():
    s = build_schedule("linear", 4)
    prod = 1.0
    for t in range(1, 5):
        prod *= 1.0 - s.betas[t - 1]
        assert abs(s.alpha_bar[t] - prod) < 1e-15


@pytest.mark.parametrize("T", [1, 2, 7, 100, 1000])
def test_schedule_invariants(T):
    s = build_schedule("linear", T)
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all(s.beta_tilde <= s.betas)


@pytest.mark.parametrize("bad", [0, -3, 2.5])
def test_schedule_rejects_bad_T(bad):
    with pytest.raises(ValueError):
        build_schedule("linear", bad)


def test_forward_variance_recurrence():
    s = build_schedule("linear", 1000)
    v = 0.0
    for t in range(1, 1001):
        v = s.alphas[t - 1] * v + s.betas[t - 1]
        assert abs(v - (1.0 - s.alpha_bar[t])) < 1e-12


def test_q_sample_limits(sched10):
    x0 = np.array([[1.0, -2.0]])
    eps = np.array([[0.3, 0.7]])
    t = 6
    assert np.allclose(q_sample(x0, t, np.zeros_like(x0), sched10).data, math.sqrt(sched10.alpha_bar[t]) * x0)
    assert np.allclose(q_sample(np.zeros_like(x0), t, eps, sched10).data,
                       math.sqrt(1 - sched10.alpha_bar[t]) * eps)
    with pytest.raises(ValueError):
        q_sample(x0, 11, eps, sched10)
    with pytest.raises(ValueError):
        q_sample(x0, 0, eps, sched10)


def test_posterior_t1_collapses_to_x0(sched10):
    gen = np.random.default_rng(0)
    x0, xt = gen.standard_normal((3, 2)), gen.standard_normal((3, 2))
    post = posterior_params(x0, xt, 1, sched10)
    assert np.allclose(post.mean.data, x0, atol=1e-15)
    assert np.all(post.variance.data == 0.0)


def test_posterior_variance_is_beta_tilde(sched10):
    post = posterior_params(np.zeros((2, 2)), np.ones((2, 2)), np.array([3, 7]), sched10)
    assert post.variance.data[0, 0] == sched10.beta_tilde[2]
    assert post.variance.data[1, 1] == sched10.beta_tilde[6]


def test_posterior_mean_equals_eps_mean_1000_triples():
    s = build_schedule("linear", 1000)
    gen = np.random.default_rng(42)
    x0 = gen.standard_normal((1000, 3))
    eps = gen.standard_normal((1000, 3))
    t = gen.integers(1, 1001, 1000)
    xt = q_sample(x0, t, eps, s).data
    a = posterior_params(x0, xt, t, s).mean.data
    b = mean_from_eps(xt, t, eps, s).data
    assert np.abs(a - b).max() < 1e-9


def test_mean_from_eps_limits(sched10):
    xt = np.array([[0.5, -1.0]])
    out = mean_from_eps(xt, 4, np.zeros_like(xt), sched10).data
    assert np.allclose(out, xt / math.sqrt(sched10.alphas[3]))
    from dkdm.diffusion import NoiseSchedule

    flat = NoiseSchedule(3, np.array([0.5, 1e-12, 0.5]))
    assert np.allclose(mean_from_eps(xt, 2, np.ones_like(xt), flat).data, xt, atol=1e-11)


def test_sigma_from_v_endpoints_and_midpoint(sched10):
    t = 5
    big = np.full((1, 1), 30.0)
    assert np.isclose(sigma_from_v(big, t, sched10).data[0, 0], sched10.betas[t - 1], rtol=1e-12)
    assert np.isclose(sigma_from_v(-big, t, sched10).data[0, 0], sched10.beta_tilde[t - 1], rtol=1e-12)
    mid = sigma_from_v(np.zeros((1, 1)), t, sched10).data[0, 0]
    assert np.isclose(mid, math.sqrt(sched10.betas[t - 1] * sched10.beta_tilde[t - 1]), rtol=1e-12)


def test_sigma_from_v_floor_at_t1(sched10):
    v = sigma_from_v(np.full((1, 1), -30.0), 1, sched10).data[0, 0]
    assert v == pytest.approx(1e-20, rel=1e-6)


def _g(mean, var):
    return GaussianParams(Tensor(np.atleast_1d(np.asarray(mean, float))), Tensor(np.atleast_1d(np.asarray(var, float))))


def test_kl_reference_values():
    assert gaussian_kl(_g(0.0, 1.0), _g(0.0, 1.0)).item() == 0.0
    assert abs(gaussian_kl(_g(0.0, 1.0), _g(1.0, 1.0)).item() - 0.5) < 1e-9
    assert abs(gaussian_kl(_g(0.0, 4.0), _g(0.0, 1.0)).item() - (1.5 - math.log(2))) < 1e-9


def test_kl_rejects_non_positive_variance():
    with pytest.raises(ValueError):
        gaussian_kl(_g(0.0, 0.0), _g(0.0, 1.0))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_kl_non_negative_and_zero_only_at_identity(seed):
    gen = np.random.default_rng(seed)
    m1, m2 = gen.standard_normal(4), gen.standard_normal(4)
    v1, v2 = np.exp(gen.standard_normal(4)), np.exp(gen.standard_normal(4))
    assert gaussian_kl(_g(m1, v1), _g(m2, v2)).item() > 0
    assert abs(gaussian_kl(_g(m1, v1), _g(m1, v1)).item()) < 1e-12


def test_hybrid_loss_perfect_prediction(sched10):
    gen = np.random.default_rng(0)
    eps = gen.standard_normal((4, 2))
    out = ModelOut(Tensor(eps.copy()), Tensor(np.zeros((4, 2))))
    x0 = gen.standard_normal((4, 2))
    t = np.array([1, 3, 5, 10])
    xt = q_sample(x0, t, eps, sched10).data
    _, parts = hybrid_loss(out, x0, xt, t, eps, sched10)
    assert parts["simple"] == 0.0


def test_hybrid_loss_lambda_zero_and_errors(sched10):
    gen = np.random.default_rng(1)
    eps, x0 = gen.standard_normal((4, 2)), gen.standard_normal((4, 2))
    t = np.array([2, 3, 5, 10])
    xt = q_sample(x0, t, eps, sched10).data
    out = ModelOut(Tensor(gen.standard_normal((4, 2))), Tensor(gen.standard_normal((4, 2))))
    loss, parts = hybrid_loss(out, x0, xt, t, eps, sched10, lam=0.0)
    assert loss.item() == parts["simple"]
    with pytest.raises(ValueError):
        hybrid_loss(out, x0, xt, t, eps, sched10, lam=-1.0)
    loss, parts = hybrid_loss(out, x0, xt, t, eps, sched10, loss_mode="simple")
    assert "vlb" not in parts


def test_vlb_gradient_on_eps_head_is_exactly_zero(sched10):
    m = small_model("mlp", T=10, randomize_heads=True, dtype=np.float64)
    gen = np.random.default_rng(2)
    x0, eps = gen.standard_normal((8, 2)), gen.standard_normal((8, 2))
    t = gen.integers(1, 11, 8)
    xt = q_sample(x0, t, eps, sched10).data
    out = m(Tensor(xt), t)
    _, _ = hybrid_loss(out, x0, xt, t, eps, sched10)
    # isolate the vlb term: rebuild it as the loss on its own
    from dkdm.diffusion import log_variance_from_v

    out = m(Tensor(xt), t)
    post = posterior_params(x0, xt, t, sched10)
    mu = mean_from_eps(xt, t, E.stop_gradient(out.eps_pred), sched10)
    vlb = gaussian_kl(post, GaussianParams(mu, None, log_variance_from_v(out.v_raw, t, sched10)))
    g = E.grad(vlb, m.params)
    assert np.array_equal(g["eps.w"], np.zeros_like(g["eps.w"]))
    assert np.array_equal(g["eps.b"], np.zeros_like(g["eps.b"]))
    assert np.abs(g["var.w"]).sum() > 0


def test_respaced_timesteps():
    ts = respaced_timesteps(1000, 50)
    assert ts[0] == 1 and ts[-1] == 1000 and len(ts) == 50
    assert set(np.diff(ts)) <= {20, 21}
    assert np.array_equal(respaced_timesteps(10, 10), np.arange(1, 11))
    assert respaced_timesteps(10, 1).tolist() == [10]
    with pytest.raises(ValueError):
        respaced_timesteps(10, 11)


def test_respace_keeps_alpha_bar(sched100):
    sub = respace(sched100, 7)
    assert np.allclose(sub.alpha_bar[1:], sched100.alpha_bar[sub.timesteps], rtol=1e-12)
    assert respace(sched100, 100) is sched100


def test_denoise_step_conventions(sched10):
    m = small_model("mlp", T=10, randomize_heads=True)
    xt = np.random.default_rng(0).standard_normal((3, 2)).astype(np.float32)
    with E.no_grad():
        out = m(Tensor(xt), np.ones(3, dtype=int))
    mu = mean_from_eps(xt, 1, out.eps_pred, sched10).data
    got = denoise_step(m, xt, 1, sched10, "ancestral", z=np.ones((3, 2), np.float32)).data
    assert np.array_equal(got, mu)
    with pytest.raises(ValueError):
        denoise_step(m, xt, 5, sched10, "ancestral", z=None)
    a = denoise_step(m, xt, 5, sched10, "ancestral", z=np.ones((3, 2), np.float32)).data
    b = denoise_step(m, xt, 5, sched10, "ancestral", z=np.ones((3, 2), np.float32)).data
    assert np.array_equal(a, b)


def test_ddim_with_true_eps(sched10):
    gen = np.random.default_rng(0)
    x0, eps = gen.standard_normal((2, 2)), gen.standard_normal((2, 2))
    t = 6
    xt = q_sample(x0, t, eps, sched10).data
    got = ddim_step(ModelOut(Tensor(eps), Tensor(np.zeros_like(eps))), xt, t, sched10).data
    ab_prev = sched10.alpha_bar[t - 1]
    assert np.allclose(got, math.sqrt(ab_prev) * x0 + math.sqrt(1 - ab_prev) * eps, atol=1e-12)


def test_generate_full_respacing_matches_manual_chain(sched10):
    from dkdm import rng as R

    m = small_model("mlp", T=10, randomize_heads=True)
    a = generate(m, sched10, 10, "ancestral", 3, 5)
    gen = R.stream(3, "sample")
    x = R.normal(gen, (5, 2))
    for t in range(10, 0, -1):
        z = R.normal(gen, (5, 2)) if t > 1 else None
        with E.no_grad():
            out = m(Tensor(x), np.full(5, t))
        x = p_step(out, x, t, sched10, z).data
    assert np.array_equal(a, x)


def test_generate_count_zero_and_bounds(sched10):
    m = small_model("mlp", T=10)
    out = generate(m, sched10, 5, count=0)
    assert out.shape == (0, 2) and m.n_forward == 0
    with pytest.raises(ValueError):
        generate(m, sched10, 11, count=1)


def test_generate_respaced_and_ddim_run(sched100):
    m = small_model("mlp", T=100, randomize_heads=True)
    x = generate(m, sched100, 10, "ancestral", 0, 4)
    y = generate(m, sched100, 10, "ddim", 0, 4)
    assert x.shape == y.shape == (4, 2) and m.n_forward == 80
    assert np.array_equal(x, generate(m, sched100, 10, "ancestral", 0, 4))
