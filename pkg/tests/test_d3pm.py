import math

import numpy as np
import pytest
import torch

from symreg import d3pm as D
from symreg.errors import TimestepOutOfRange, UnnormalizedInput

from conftest import rng_from


def const_tm(k=4, beta=0.1, steps=5) -> D.TransitionModel:
    return D.TransitionModel(D.NoiseSchedule(np.full(steps, beta), k))


# --- independent oracles (brute-force float64 matrix algebra) -----------------


def oracle_qbar(tm: D.TransitionModel, t: int) -> np.ndarray:
    """Literal product Q_1 Q_2 ... Q_t."""
    out = np.eye(tm.num_classes)
    for s in range(1, t + 1):
        out = out @ tm.one_step_matrix(s)
    return out


def oracle_bayes_posterior(tm: D.TransitionModel, x0: int, x_t: int, t: int) -> np.ndarray:
    """Exact q(x_{t-1} | x_t, x0) by Bayes' rule on the forward marginals."""
    k = tm.num_classes
    q_t = tm.one_step_matrix(t)
    qbar_prev = oracle_qbar(tm, t - 1)
    qbar_t = oracle_qbar(tm, t)
    num = np.array([q_t[j, x_t] * qbar_prev[x0, j] for j in range(k)])
    return num / qbar_t[x0, x_t]


def oracle_marginalized_posterior(tm, x_t: int, x0_dist: np.ndarray, t: int) -> np.ndarray:
    """Scalar-loop marginalization over all candidate clean tokens."""
    k = tm.num_classes
    q_t = tm.one_step_matrix(t)
    qbar_prev = oracle_qbar(tm, t - 1)
    un = np.zeros(k)
    for j in range(k):
        for i in range(k):
            un[j] += x0_dist[i] * qbar_prev[i, j] * q_t[j, x_t]
    return un / un.sum()


# --- schedule -----------------------------------------------------------------


def test_cosine_schedule_endpoints_and_monotonicity():
    s = D.NoiseSchedule.cosine(13)
    assert s.num_steps == 1000
    assert s.betas[0] == 1e-4
    assert s.betas[-1] == 0.02
    assert np.all(np.diff(s.betas) >= 0)
    assert np.all((s.gammas > 0) & (s.gammas < 1))
    assert np.all(np.diff(s.gamma_bar) < 0)


def test_schedule_rejects_bad_betas():
    with pytest.raises(ValueError):
        D.NoiseSchedule(np.array([0.0, 0.1]), 4)
    with pytest.raises(ValueError):
        D.NoiseSchedule(np.array([0.9]), 4)  # gamma would go negative


def test_stochastic_rows_sum_to_one():
    for k in (2, 4, 13, 16):
        tm = D.TransitionModel(D.NoiseSchedule.cosine(k, num_steps=50, beta_max=0.05))
        for t in (1, 2, 25, 50):
            for mat in (tm.one_step_matrix(t), tm.cumulative_matrix(t)):
                assert np.max(np.abs(mat.sum(axis=1) - 1.0)) <= 1e-12
                assert mat.min() >= 0.0 and mat.max() <= 1.0


def test_closed_form_matches_matrix_product():
    for k in (2, 4, 16):
        tm = D.TransitionModel(D.NoiseSchedule.cosine(k, num_steps=50, beta_max=0.05))
        prod = np.eye(k)
        for t in range(1, 51):
            prod = prod @ tm.one_step_matrix(t)
            assert np.max(np.abs(tm.cumulative_matrix(t) - prod)) <= 1e-10


def test_chapman_kolmogorov():
    # Qbar_t == Qbar_s * (Q_{s+1} ... Q_t): composing the marginal at s with
    # the remaining one-step kernels reproduces the marginal at t.
    tm = const_tm(k=4, beta=0.1, steps=6)
    for s in (1, 2, 3):
        for t in (4, 5, 6):
            rest = np.eye(4)
            for u in range(s + 1, t + 1):
                rest = rest @ tm.one_step_matrix(u)
            composed = tm.cumulative_matrix(s) @ rest
            assert np.max(np.abs(composed - tm.cumulative_matrix(t))) <= 1e-12


# --- forward marginals ---------------------------------------------------------


def test_q_xt_probs_near_identity_for_tiny_beta():
    tm = D.TransitionModel(D.NoiseSchedule(np.full(3, 1e-12), 4))
    x0 = torch.tensor([[0, 1, 2, 3]])
    probs = D.q_xt_probs(x0, torch.tensor([1]), tm)
    onehot = torch.nn.functional.one_hot(x0, 4).double()
    assert torch.max(torch.abs(probs - onehot)).item() < 1e-10


def test_q_xt_probs_near_uniform_after_heavy_noise():
    tm = D.TransitionModel(D.NoiseSchedule(np.full(50, 0.74), 4))
    probs = D.q_xt_probs(torch.tensor([[2]]), torch.tensor([50]), tm)
    assert torch.max(torch.abs(probs - 0.25)).item() < 1e-12


def test_q_xt_probs_matches_product_oracle():
    # K=4, constant beta 0.1, t=2: diagonal mass gbar_2 + (1-gbar_2)/4.
    tm = const_tm()
    probs = D.q_xt_probs(torch.tensor([[1]]), torch.tensor([2]), tm).numpy()[0, 0]
    oracle_row = oracle_qbar(tm, 2)[1]
    assert np.max(np.abs(probs - oracle_row)) <= 1e-12
    gbar2 = (1 - 0.1 * 4 / 3) ** 2
    assert probs[1] == pytest.approx(gbar2 + (1 - gbar2) / 4, abs=1e-12)


def test_q_xt_probs_rejects_bad_t():
    tm = const_tm()
    with pytest.raises(TimestepOutOfRange):
        D.q_xt_probs(torch.zeros(1, 2, dtype=torch.int64), torch.tensor([0]), tm)
    with pytest.raises(TimestepOutOfRange):
        D.q_xt_probs(torch.zeros(1, 2, dtype=torch.int64), torch.tensor([6]), tm)


# --- forward sampling -----------------------------------------------------------


def test_sample_xt_monte_carlo_matches_closed_form():
    tm = D.TransitionModel(D.NoiseSchedule.cosine(13, num_steps=100))
    n = 100_000
    x0 = torch.full((1, n), 5, dtype=torch.int64)
    for t in (10, 50, 90):
        gbar = float(tm.gamma_bar(torch.tensor([t])))
        p_corrupt = (1 - gbar) * (13 - 1) / 13
        xt = D.sample_xt(x0, torch.tensor([t]), tm, rng_from(1234, t))
        freq = float((xt != x0).double().mean())
        se = math.sqrt(p_corrupt * (1 - p_corrupt) / n)
        assert abs(freq - p_corrupt) <= 3 * se


def test_sample_xt_near_identity_at_tiny_noise():
    tm = D.TransitionModel(D.NoiseSchedule(np.full(3, 1e-9), 13))
    x0 = torch.randint(0, 13, (4, 32))
    xt = D.sample_xt(x0, torch.full((4,), 1), tm, rng_from(0))
    assert torch.equal(xt, x0)


def test_sample_xt_reproducible():
    tm = const_tm()
    x0 = torch.randint(0, 4, (3, 8), generator=torch.Generator().manual_seed(0))
    t = torch.tensor([1, 3, 5])
    a = D.sample_xt(x0, t, tm, rng_from(42))
    b = D.sample_xt(x0, t, tm, rng_from(42))
    assert torch.equal(a, b)


# --- posterior ------------------------------------------------------------------


def test_posterior_one_hot_matches_bayes_enumeration():
    tm = const_tm(k=4, beta=0.1, steps=5)
    for t in range(2, 6):
        for x0 in range(4):
            for xt in range(4):
                x0_dist = torch.zeros(1, 1, 4, dtype=torch.float64)
                x0_dist[0, 0, x0] = 1.0
                got = D.posterior(torch.tensor([[xt]]), x0_dist,
                                  torch.tensor([t]), tm).numpy()[0, 0]
                want = oracle_bayes_posterior(tm, x0, xt, t)
                assert np.max(np.abs(got - want)) <= 1e-10


def test_posterior_marginalizes_over_x0_dist():
    tm = const_tm(k=4, beta=0.1, steps=5)
    rng = np.random.default_rng(3)
    for t in (2, 3, 5):
        dist = rng.random(4)
        dist /= dist.sum()
        for xt in range(4):
            x0_dist = torch.tensor(dist, dtype=torch.float64).reshape(1, 1, 4)
            got = D.posterior(torch.tensor([[xt]]), x0_dist,
                              torch.tensor([t]), tm).numpy()[0, 0]
            want = oracle_marginalized_posterior(tm, xt, dist, t)
            assert np.max(np.abs(got - want)) <= 1e-10


def test_posterior_concentrates_toward_x0():
    # Heavy noise, x_t agreeing with x0: most mass should sit on x0.
    tm = D.TransitionModel(D.NoiseSchedule(np.full(5, 0.5), 4))
    x0_dist = torch.zeros(1, 1, 4, dtype=torch.float64)
    x0_dist[0, 0, 2] = 1.0
    post = D.posterior(torch.tensor([[2]]), x0_dist, torch.tensor([2]), tm)[0, 0]
    assert int(post.argmax()) == 2
    assert float(post[2]) > 0.5


def test_posterior_rows_normalized():
    tm = const_tm()
    x0_dist = torch.full((2, 3, 4), 0.25, dtype=torch.float64)
    x_t = torch.randint(0, 4, (2, 3))
    post = D.posterior(x_t, x0_dist, torch.tensor([3, 5]), tm)
    assert torch.max(torch.abs(post.sum(-1) - 1.0)).item() <= 1e-10


def test_posterior_t1_returns_x0_dist():
    tm = const_tm()
    x0_dist = torch.tensor([[[0.7, 0.1, 0.1, 0.1]]], dtype=torch.float64)
    out = D.posterior(torch.tensor([[2]]), x0_dist, torch.tensor([1]), tm)
    assert torch.equal(out, x0_dist)


def test_posterior_rejects_unnormalized():
    tm = const_tm()
    bad = torch.full((1, 1, 4), 0.3, dtype=torch.float64)
    with pytest.raises(UnnormalizedInput):
        D.posterior(torch.tensor([[0]]), bad, torch.tensor([2]), tm)


# --- loss -----------------------------------------------------------------------


class FixedLogitsModel:
    """Callable standing in for the network: returns a stored logits tensor."""

    def __init__(self, logits):
        self.logits = logits

    def __call__(self, points, x_t, t):
        return self.logits


def _onehot_logits(x0, k, big=60.0):
    return torch.nn.functional.one_hot(x0, k).double() * big


def test_loss_zero_for_oracle_model():
    tm = const_tm(k=4, beta=0.1, steps=5)
    x0 = torch.randint(0, 4, (8, 3), generator=torch.Generator().manual_seed(1))
    model = FixedLogitsModel(_onehot_logits(x0, 4))
    t = torch.randint(1, 6, (8,), generator=torch.Generator().manual_seed(2))
    loss, diag = D.d3pm_loss(x0, None, t, model, tm, lam=1.0, rng=rng_from(0))
    assert float(loss) == pytest.approx(0.0, abs=1e-8)
    assert diag["kl"] == pytest.approx(0.0, abs=1e-8)
    assert diag["ce"] == pytest.approx(0.0, abs=1e-8)


def test_loss_uniform_logits_ce_is_log_k():
    tm = const_tm(k=4, beta=0.1, steps=5)
    x0 = torch.randint(0, 4, (6, 3), generator=torch.Generator().manual_seed(3))
    model = FixedLogitsModel(torch.zeros(6, 3, 4, dtype=torch.float64))
    t = torch.full((6,), 3)
    loss, diag = D.d3pm_loss(x0, None, t, model, tm, lam=1.0, rng=rng_from(1))
    assert diag["ce"] == pytest.approx(math.log(4), abs=1e-12)
    assert float(loss) >= diag["ce"] - 1e-12


def test_loss_matches_scalar_enumeration():
    # Random tiny instance; recompute the value by pure-python enumeration
    # from the sampled x_t in the diagnostics.
    k, s, steps, b = 4, 3, 5, 6
    tm = const_tm(k=k, beta=0.1, steps=steps)
    gen = torch.Generator().manual_seed(9)
    x0 = torch.randint(0, k, (b, s), generator=gen)
    logits = torch.randn(b, s, k, generator=gen, dtype=torch.float64)
    model = FixedLogitsModel(logits)
    t = torch.randint(1, steps + 1, (b,), generator=gen)
    lam = 0.37
    loss, diag = D.d3pm_loss(x0, None, t, model, tm, lam=lam, rng=rng_from(5))

    x_t = diag["x_t"]
    kl_total, ce_total = 0.0, 0.0
    for i in range(b):
        ti = int(t[i])
        for j in range(s):
            row = logits[i, j].numpy()
            p_x0 = np.exp(row - row.max())
            p_x0 /= p_x0.sum()
            if ti == 1:
                q_true = np.eye(k)[int(x0[i, j])]
                p_model = p_x0
            else:
                q_true = oracle_bayes_posterior(tm, int(x0[i, j]), int(x_t[i, j]), ti)
                p_model = oracle_marginalized_posterior(tm, int(x_t[i, j]), p_x0, ti)
            for c in range(k):
                if q_true[c] > 0:
                    kl_total += q_true[c] * (math.log(q_true[c]) - math.log(p_model[c]))
            ce_total += -math.log(p_x0[int(x0[i, j])])
    expected = kl_total / (b * s) + lam * ce_total / (b * s)
    assert float(loss) == pytest.approx(expected, abs=1e-8)


def test_loss_nonnegative_on_random_instances():
    tm = const_tm(k=4, beta=0.1, steps=5)
    for seed in range(20):
        gen = torch.Generator().manual_seed(seed)
        x0 = torch.randint(0, 4, (4, 3), generator=gen)
        model = FixedLogitsModel(torch.randn(4, 3, 4, generator=gen, dtype=torch.float64) * 3)
        t = torch.randint(1, 6, (4,), generator=gen)
        loss, _ = D.d3pm_loss(x0, None, t, model, tm, lam=0.01, rng=rng_from(seed))
        assert float(loss) >= 0.0


# --- ancestral sampling -----------------------------------------------------------


class OracleDenoiser:
    """Always predicts the stored truth, whatever the noisy input."""

    def __init__(self, x0, k, big=60.0):
        self.logits = _onehot_logits(x0, k, big)

    def __call__(self, points, x_t, t):
        return self.logits[: x_t.shape[0]]


def test_oracle_denoiser_recovers_truth():
    k, s = 13, 32
    tm = D.TransitionModel(D.NoiseSchedule.cosine(k, num_steps=100))
    gen = torch.Generator().manual_seed(17)
    x0 = torch.randint(0, k, (4, s), generator=gen)
    model = OracleDenoiser(x0, k)
    for seed in range(10):
        out = D.sample(model, torch.zeros(4, 1, 3), tm, rng_from(seed), max_len=s)
        assert torch.equal(out, x0)


def test_sample_steps_one_is_argmax_of_x0_logits():
    k, s = 4, 3
    tm = const_tm(k=k, beta=0.1, steps=5)
    logits = torch.randn(2, s, k, generator=torch.Generator().manual_seed(3),
                         dtype=torch.float64)
    model = FixedLogitsModel(logits)
    out = D.sample(model, torch.zeros(2, 1, 3), tm, rng_from(0), max_len=s, num_steps=1)
    assert torch.equal(out, logits.argmax(-1))


def test_sample_deterministic_per_seed():
    k, s = 4, 3
    tm = const_tm(k=k, beta=0.1, steps=5)
    logits = torch.randn(2, s, k, generator=torch.Generator().manual_seed(4),
                         dtype=torch.float64)
    model = FixedLogitsModel(logits)
    a = D.sample(model, torch.zeros(2, 1, 3), tm, rng_from(9), max_len=s)
    b = D.sample(model, torch.zeros(2, 1, 3), tm, rng_from(9), max_len=s)
    assert torch.equal(a, b)
