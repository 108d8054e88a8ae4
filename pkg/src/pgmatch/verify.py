"""Self-contained verification suites: gradient checks, distribution
statistics, ranking-metric oracles, and a bandit sanity run for the
policy-gradient estimator. Each check carries its tolerance; the CLI and
the acceptance tests both run these."""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import AttentionTrace
from .config import ModelConfig
from .data import Instance
from .distributions import (
    action_to_mu,
    categorical_sample,
    discrete_logprob,
    gumbel_softmax,
    normal_logprob,
    normal_sample_reparam,
    soft_action_value,
)
from .encoders import GruParams, gcn_reason, gru_step, region_affinity
from .losses import discrete_pg_loss
from .model import MatchingModel
from .rewards import average_precision, pg_baseline, rank_of, recall_at_1
from .training import _batch_losses

GRAD_TOL = 1e-4
GRAD_EPS = 1e-5
FREQ_TOL = 0.01
QUAD_TOL = 1e-6
BANDIT_REL_TOL = 0.05
BANDIT_ARMS = np.array([1.0, 0.5, 0.0])


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _check(results, name, fn):
    start = time.perf_counter()
    try:
        passed, detail = fn()
    except Exception as exc:  # noqa: BLE001 - a crash is a failed check
        passed, detail = False, f"raised {type(exc).__name__}: {exc}"
    results.append(CheckResult(name, passed, detail, time.perf_counter() - start))


# ---------------------------------------------------------------------------
# gradcheck suite
# ---------------------------------------------------------------------------


def _unary_cases(rng):
    x = ad.Tensor(rng.standard_normal((3, 4)))
    pos = ad.Tensor(0.5 + rng.random((3, 4)))
    away = ad.Tensor(rng.standard_normal((3, 4)) + np.where(rng.random((3, 4)) > 0.5, 2.0, -2.0))
    return [
        ("sigmoid", lambda t: ad.tsum(ad.sigmoid(t)), x),
        ("tanh", lambda t: ad.tsum(ad.tanh(t)), x),
        ("relu", lambda t: ad.tsum(ad.relu(t)), away),
        ("softmax", lambda t: ad.tsum(ad.mul(ad.softmax(t, axis=1), ad.constant(np.arange(12.).reshape(3, 4)))), x),
        ("log_softmax", lambda t: ad.tsum(ad.mul(ad.log_softmax(t, axis=1), ad.constant(np.arange(12.).reshape(3, 4)))), x),
        ("log", lambda t: ad.tsum(ad.log(t)), pos),
        ("exp", lambda t: ad.tsum(ad.exp(t)), x),
        ("square", lambda t: ad.tsum(ad.square(t)), x),
        ("sqrt", lambda t: ad.tsum(ad.sqrt(t)), pos),
        ("softplus", lambda t: ad.tsum(ad.softplus(t)), x),
        ("mean", lambda t: ad.tmean(ad.square(t)), x),
        ("neg", lambda t: ad.tsum(ad.mul(ad.neg(t), t)), x),
        ("transpose", lambda t: ad.tsum(ad.square(ad.transpose(t))), x),
        ("scalar_mul", lambda t: ad.tsum(ad.scalar_mul(ad.square(t), 2.5)), x),
        ("l2_normalize", lambda t: ad.tsum(ad.mul(ad.l2_normalize(t), ad.constant(np.arange(5.)))),
         ad.Tensor(rng.standard_normal(5) + 1.0)),
    ]


def _binary_cases(rng):
    a = ad.Tensor(rng.standard_normal((3, 4)))
    b = ad.Tensor(rng.standard_normal((3, 4)))
    s = ad.Tensor(np.asarray(0.7))
    m1 = ad.Tensor(rng.standard_normal((3, 4)))
    m2 = ad.Tensor(rng.standard_normal((4, 2)))
    v1 = ad.Tensor(rng.standard_normal(4))
    v2 = ad.Tensor(rng.standard_normal(4))
    posb = ad.Tensor(1.0 + rng.random((3, 4)))
    return [
        ("add", lambda p, q: ad.tsum(ad.square(ad.add(p, q))), (a, b)),
        ("sub", lambda p, q: ad.tsum(ad.square(ad.sub(p, q))), (a, b)),
        ("mul", lambda p, q: ad.tsum(ad.mul(p, q)), (a, b)),
        ("mul_scalar_operand", lambda p, q: ad.tsum(ad.mul(p, q)), (a, s)),
        ("div", lambda p, q: ad.tsum(ad.div(p, q)), (a, posb)),
        ("matmul_2d", lambda p, q: ad.tsum(ad.square(ad.matmul(p, q))), (m1, m2)),
        ("matmul_vec_mat", lambda p, q: ad.tsum(ad.square(ad.matmul(p, q))), (v1, m2)),
        ("matmul_mat_vec", lambda p, q: ad.tsum(ad.square(ad.matmul(p, q))), (m1, v2)),
        ("matmul_dot", lambda p, q: ad.square(ad.matmul(p, q)), (v1, v2)),
    ]


def _structural_cases(rng):
    v1 = ad.Tensor(rng.standard_normal(3))
    v2 = ad.Tensor(rng.standard_normal(4))
    table = ad.Tensor(rng.standard_normal((5, 3)))
    mat = ad.Tensor(rng.standard_normal((4, 3)))
    weights7 = ad.constant(np.arange(7.))

    def concat_loss(p, q):
        return ad.tsum(ad.mul(ad.concat([p, q]), weights7))

    def stack_loss(p, q):
        return ad.tsum(ad.square(ad.stack_rows([p, ad.scalar_mul(q, 2.0)])))

    return [
        ("concat", concat_loss, (v1, v2)),
        ("stack_rows", stack_loss, (ad.Tensor(rng.standard_normal(4)), v2)),
        ("gather_rows", lambda t: ad.tsum(ad.square(ad.gather_rows(t, [0, 2, 2, 4]))), (table,)),
        ("pick_vector", lambda t: ad.square(ad.pick(t, 1)), (v1,)),
        ("pick_matrix", lambda t: ad.square(ad.pick(t, (2, 1))), (mat,)),
        ("pick_row", lambda t: ad.tsum(ad.square(ad.pick_row(t, 2))), (mat,)),
    ]


def _model_cases(rng):
    gru = GruParams.init(3, 3, rng)
    x = ad.Tensor(rng.standard_normal(3))
    h = ad.Tensor(0.5 * rng.standard_normal(3))
    feats = ad.Tensor(rng.standard_normal((4, 3)))
    wa = ad.Tensor(0.3 * rng.standard_normal((3, 3)))
    wb = ad.Tensor(0.3 * rng.standard_normal((3, 3)))
    wg = ad.Tensor(0.3 * rng.standard_normal((3, 3)))
    xv = ad.Tensor(np.asarray(0.3))
    mu = ad.Tensor(np.asarray(0.55))
    sg = ad.Tensor(np.asarray(0.8))
    probs_logits = ad.Tensor(rng.standard_normal(5))

    def gru_loss(xx, hh):
        return ad.tsum(ad.square(gru_step(xx, hh, gru)))

    def affinity_loss(ff):
        return ad.tsum(ad.square(region_affinity(ff, wa, wb)))

    def gcn_loss(ff):
        rel = region_affinity(ff, wa, wb)
        return ad.tsum(ad.square(gcn_reason(ff, rel, wg)))

    def norm_lp(a, b, c):
        return normal_logprob(a, b, c)

    def soft_mu(lg):
        return ad.sigmoid(soft_action_value(ad.softmax(lg, axis=-1), 4))

    return [
        ("gru_step", gru_loss, (x, h)),
        ("region_affinity", affinity_loss, (feats,)),
        ("gcn_reason", gcn_loss, (feats,)),
        ("normal_logprob", norm_lp, (xv, mu, sg)),
        ("soft_action_path", soft_mu, (probs_logits,)),
    ]


def _composite_model_check() -> tuple[bool, str]:
    """Finite differences through the whole rollout -> fuse -> loss graph,
    on a tiny model with frozen sampling noise. The straight-through mean
    uses its relaxed forward here so the hard jump does not poison the
    numeric derivative. The fixture is conditioned so no gradient entry
    sits inside the finite-difference noise floor: tokens cover the whole
    vocabulary and lambda is small enough that the fusion GRU does not
    saturate."""
    config = ModelConfig(feature_dim=5, word_dim=4, hidden=5, embed_dim=5, decoder_dim=4,
                         n_actions=6, batch_size=2, epochs=1, heads=1, gcn_layers=1,
                         init_scale=0.4, decoder_init_scale=0.4, lam=2.0)
    dgen = np.random.default_rng(99)
    instances = [
        Instance(class_id=0, regions=dgen.standard_normal((3, 5)), tokens=np.array([0, 2, 3, 0])),
        Instance(class_id=1, regions=dgen.standard_normal((3, 5)), tokens=np.array([1, 4, 5, 1])),
    ]
    model = MatchingModel(config, 6, 2, np.random.default_rng(2))
    labels = [0, 1]

    def f(*_params):
        rng = np.random.default_rng(77)
        bundle, _ = _batch_losses(model, instances, labels, rng, st_soft_forward=True)
        return bundle.total

    err = ad.grad_check(f, model.parameters(), eps=GRAD_EPS)
    return err < GRAD_TOL, f"max rel err {err:.3g} (tol {GRAD_TOL})"


def gradcheck_suite() -> list[CheckResult]:
    results = []
    rng = np.random.default_rng(7)
    for name, fn, x in _unary_cases(rng):
        def run(fn=fn, x=x):
            err = ad.grad_check(fn, [x], eps=GRAD_EPS)
            return err < GRAD_TOL, f"max rel err {err:.3g}"
        _check(results, f"op.{name}", run)
    for name, fn, args in _binary_cases(rng):
        def run(fn=fn, args=args):
            err = ad.grad_check(fn, list(args), eps=GRAD_EPS)
            return err < GRAD_TOL, f"max rel err {err:.3g}"
        _check(results, f"op.{name}", run)
    for name, fn, args in _structural_cases(rng) + _model_cases(rng):
        def run(fn=fn, args=args):
            err = ad.grad_check(fn, list(args), eps=GRAD_EPS)
            return err < GRAD_TOL, f"max rel err {err:.3g}"
        _check(results, f"op.{name}", run)
    _check(results, "composite.rollout_fuse_loss", _composite_model_check)
    return results


# ---------------------------------------------------------------------------
# distributions suite
# ---------------------------------------------------------------------------


def _gumbel_max_frequencies(logits, draws, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    ad.clear_tape()
    tiled = ad.constant(np.tile(logits, (draws, 1)))
    relaxed = gumbel_softmax(tiled, 1.0, rng)
    winners = np.argmax(relaxed.values, axis=1)
    ad.clear_tape()
    return np.bincount(winners, minlength=len(logits)) / draws


def _gumbel_check(logits, seed):
    logits = np.asarray(logits, dtype=np.float64)
    freqs = _gumbel_max_frequencies(logits, 100_000, seed)
    target = np.exp(logits - logits.max())
    target = target / target.sum()
    worst = float(np.abs(freqs - target).max())
    return worst < FREQ_TOL, f"max |freq - softmax| = {worst:.4f} (tol {FREQ_TOL})"


def _quadrature_check(mu, sigma):
    xs = np.linspace(mu - 8 * sigma, mu + 8 * sigma, 20_001)
    ad.clear_tape()
    dens = np.array([math.exp(normal_logprob(float(x), mu, sigma).item()) for x in xs])
    ad.clear_tape()
    integral = float(np.trapezoid(dens, xs))
    return abs(integral - 1.0) < QUAD_TOL, f"|integral - 1| = {abs(integral - 1.0):.2e}"


def _action_map_check():
    lo = action_to_mu(0, 100)
    hi = action_to_mu(100, 100)
    expect_hi = 1.0 / (1.0 + math.exp(-1.0))
    ok = lo == 0.5 and hi == expect_hi and abs(hi - 0.7311) < 5e-5
    mono = all(action_to_mu(i, 100) < action_to_mu(i + 1, 100) for i in range(100))
    return ok and mono, f"mu(0)={lo}, mu(100)={hi:.6f}, strictly monotone={mono}"


def _reparam_check():
    eps = 0.6321
    mu = ad.Tensor(np.asarray(0.55))
    sigma = ad.Tensor(np.asarray(0.9))

    def f(m, s):
        return normal_sample_reparam(m, s, None, eps=eps)

    err = ad.grad_check(f, [mu, sigma], eps=GRAD_EPS)
    ad.clear_tape()
    mu.requires_grad = sigma.requires_grad = True
    out = f(mu, sigma)
    ad.backward(out)
    dmu, dsig = float(mu.grad), float(sigma.grad)
    ad.clear_tape()
    ok = err < GRAD_TOL and abs(dmu - 1.0) < 1e-12 and abs(dsig - eps) < 1e-12
    return ok, f"d/dmu={dmu}, d/dsigma={dsig} (eps={eps}), fd err {err:.2g}"


def _categorical_check():
    rng = np.random.default_rng(5)
    draws = np.array([categorical_sample(np.array([0.25, 0.75]), rng) for _ in range(100_000)])
    f1 = float(np.mean(draws == 1))
    uniform = np.full(100, 0.01)
    rng2 = np.random.default_rng(6)
    d2 = np.array([categorical_sample(uniform, rng2) for _ in range(100_000)])
    freqs = np.bincount(d2, minlength=100) / 100_000
    worst = float(np.abs(freqs - 0.01).max())
    ok = abs(f1 - 0.75) < FREQ_TOL and worst < 0.003
    return ok, f"p(1)={f1:.4f} (want 0.75), uniform max dev {worst:.4f}"


def distributions_suite() -> list[CheckResult]:
    results = []
    _check(results, "gumbel_max.uniform_logits", lambda: _gumbel_check([0.0, 0.0, 0.0], seed=42))
    _check(results, "gumbel_max.skewed_logits", lambda: _gumbel_check([0.5, 0.0, -0.5], seed=43))
    _check(results, "normal_density.quadrature_standard", lambda: _quadrature_check(0.0, 1.0))
    _check(results, "normal_density.quadrature_offset", lambda: _quadrature_check(0.3, 0.7))
    _check(results, "action_to_mu.endpoints", _action_map_check)
    _check(results, "reparam.derivatives", _reparam_check)
    _check(results, "categorical.monte_carlo", _categorical_check)
    return results


# ---------------------------------------------------------------------------
# metrics suite
# ---------------------------------------------------------------------------


def _enumeration_check():
    checked = 0
    for size in range(2, 7):
        for perm in itertools.permutations(range(size)):
            row = np.array(perm, dtype=np.float64)
            sim = np.tile(row, (size, 1))
            for k in range(size):
                oracle_rank = 1 + int(np.sum(row > row[k]))
                if rank_of(row, k) != oracle_rank:
                    return False, f"rank mismatch at size {size}, perm {perm}, k {k}"
                if average_precision(sim, k) != 1.0 / oracle_rank:
                    return False, f"AP mismatch at size {size}, perm {perm}, k {k}"
                if recall_at_1(sim, k) != (1.0 if oracle_rank == 1 else 0.0):
                    return False, f"R@1 mismatch at size {size}, perm {perm}, k {k}"
                checked += 1
    return True, f"{checked} (gallery, query) cases match enumeration exactly"


def _tie_check():
    row = np.array([0.5, 0.9, 0.9, 0.1])
    ok = (rank_of(row, 1) == 1 and rank_of(row, 2) == 2
          and recall_at_1(np.tile(row, (4, 1)), 1) == 1.0
          and recall_at_1(np.tile(row, (4, 1)), 2) == 0.0)
    return ok, "ties resolve to the lowest index"


def _baseline_check():
    b, adv = pg_baseline([1.0, 2.0, 3.0], beta=0.5)
    if not np.array_equal(b, [2.5, 2.0, 1.5]):
        return False, f"baselines {b} != [2.5, 2.0, 1.5]"
    rng = np.random.default_rng(9)
    for _ in range(50):
        r = rng.random(rng.integers(2, 12))
        _, adv1 = pg_baseline(r, beta=1.0)
        if abs(adv1.sum()) > 1e-12:
            return False, f"beta=1 advantages sum to {adv1.sum():.2e}"
    return True, "exact baselines; beta=1 advantages sum to 0 within 1e-12"


def metrics_suite() -> list[CheckResult]:
    results = []
    _check(results, "rank.enumeration_oracle", _enumeration_check)
    _check(results, "rank.tie_breaking", _tie_check)
    _check(results, "baseline.identity", _baseline_check)
    return results


# ---------------------------------------------------------------------------
# bandit suite
# ---------------------------------------------------------------------------


def bandit_gradient_estimate(theta_values, samples: int = 100_000, seed: int = 0,
                             chunk: int = 500) -> np.ndarray:
    """Monte-Carlo mean of the REINFORCE gradient samples on the 3-armed
    bandit, computed through the real loss machinery. Returns the estimate
    of the ascent direction d(expected reward)/d(logits)."""
    rng = np.random.default_rng(seed)
    theta = ad.Tensor(np.asarray(theta_values, dtype=np.float64), requires_grad=True)
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        ad.clear_tape()
        probs = ad.softmax(theta, axis=-1)
        traces, rewards = [], []
        zero = ad.constant(np.asarray(0.0))
        for _ in range(n):
            idx = categorical_sample(probs, rng)
            lp = discrete_logprob(probs, idx)
            traces.append(AttentionTrace(steps=[], atts=[], discrete_logprob_sum=lp,
                                         continuous_logprob_sum=zero, mode="stochastic"))
            rewards.append(BANDIT_ARMS[idx])
        loss = discrete_pg_loss(traces, rewards, batch_mean=False)
        ad.backward(loss)
        done += n
    grad = theta.grad.copy()
    ad.clear_tape()
    return -grad / samples


def bandit_analytic_gradient(theta_values) -> np.ndarray:
    """Exact d(expected reward)/d(logits) for the softmax bandit:
    p_j * (r_j - sum_a p_a r_a)."""
    theta = np.asarray(theta_values, dtype=np.float64)
    p = np.exp(theta - theta.max())
    p /= p.sum()
    j = float(p @ BANDIT_ARMS)
    return p * (BANDIT_ARMS - j)


def _bandit_gradient_check():
    theta = np.array([0.5, 0.0, -0.5])
    est = bandit_gradient_estimate(theta, samples=100_000, seed=12)
    exact = bandit_analytic_gradient(theta)
    rel = np.abs(est - exact) / np.abs(exact)
    worst = float(rel.max())
    return worst < BANDIT_REL_TOL, (
        f"est {np.round(est, 4)} vs exact {np.round(exact, 4)}; max rel {worst:.3f}")


def bandit_optimize(steps: int = 2000, batch: int = 8, lr: float = 0.05,
                    seed: int = 0, target: float = 0.95):
    """REINFORCE + Adam on the bandit; returns (best-arm prob, step reached)."""
    rng = np.random.default_rng(seed)
    theta = ad.Tensor(np.zeros(3), requires_grad=True)
    opt = ad.Adam([theta], lr=lr)
    for step in range(1, steps + 1):
        ad.clear_tape()
        probs = ad.softmax(theta, axis=-1)
        zero = ad.constant(np.asarray(0.0))
        traces, rewards = [], []
        for _ in range(batch):
            idx = categorical_sample(probs, rng)
            traces.append(AttentionTrace(steps=[], atts=[],
                                         discrete_logprob_sum=discrete_logprob(probs, idx),
                                         continuous_logprob_sum=zero, mode="stochastic"))
            rewards.append(BANDIT_ARMS[idx])
        loss = discrete_pg_loss(traces, rewards)
        ad.backward(loss)
        opt.step()
        p = np.exp(theta.values - theta.values.max())
        p /= p.sum()
        if p[0] > target:
            ad.clear_tape()
            return float(p[0]), step
    ad.clear_tape()
    return float(p[0]), steps


def _bandit_convergence_check():
    prob, step = bandit_optimize(steps=2000, seed=21)
    return prob > 0.95, f"best-arm probability {prob:.4f} after {step} steps"


def bandit_suite() -> list[CheckResult]:
    results = []
    _check(results, "bandit.gradient_unbiasedness", _bandit_gradient_check)
    _check(results, "bandit.convergence", _bandit_convergence_check)
    return results


SUITES = {
    "gradcheck": gradcheck_suite,
    "distributions": distributions_suite,
    "metrics": metrics_suite,
    "bandit": bandit_suite,
}


def run_suites(names) -> list[CheckResult]:
    results = []
    for name in names:
        if name not in SUITES:
            raise KeyError(f"unknown suite {name!r}; available: {', '.join(sorted(SUITES))}, all")
        results.extend(SUITES[name]())
    return results
