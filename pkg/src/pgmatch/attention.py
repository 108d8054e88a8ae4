"""Policy-gradient attention: roll a GRU policy over region or token
features, sample one compound-distribution attention weight per timestep,
and fuse the adjusted features into a single embedding.

One rollout over one instance's features is one episode; the trace keeps
every per-step sample plus the episode log-probability sums that the PG
losses differentiate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    constant,
    matmul,
    mul,
    parameter,
    pick,
    scalar_mul,
    sigmoid,
    softmax,
    softplus,
)
from .distributions import (
    ActionSpace,
    CompoundSample,
    categorical_sample,
    discrete_logprob,
    gumbel_softmax,
    normal_logprob,
    normal_sample_reparam,
    soft_action_value,
    straight_through,
)
from .encoders import GruParams, gru_step

SIGMA_FLOOR = 1e-3

ACTION_MODES = ("compound", "discrete", "continuous")
ROLLOUT_MODES = ("stochastic", "deterministic")


@dataclass
class PolicyParams:
    """Weights for one branch's attention policy: the shared policy GRU,
    per-head mean/std projection heads, and the fusion GRU."""

    gru: GruParams
    w_mu: list
    w_std: list
    fusion_gru: GruParams

    def __post_init__(self):
        if len(self.w_mu) not in (1, 2) or len(self.w_mu) != len(self.w_std):
            raise ValueError(f"head count must be 1 or 2, got {len(self.w_mu)}/{len(self.w_std)}")
        hidden = self.gru.hidden_size
        for w in self.w_mu:
            if w.values.ndim != 2 or w.shape[0] != hidden:
                raise ShapeError(f"w_mu shape {w.shape} does not match hidden size {hidden}")
        for w in self.w_std:
            if w.shape != (hidden, 1):
                raise ShapeError(f"w_std shape {w.shape} != ({hidden}, 1)")

    @property
    def head_count(self) -> int:
        return len(self.w_mu)

    @classmethod
    def init(cls, feature_dim: int, hidden: int, space: ActionSpace,
             rng: np.random.Generator, heads: int = 1, scale: float = 0.1) -> "PolicyParams":
        return cls(
            gru=GruParams.init(feature_dim, hidden, rng, scale),
            w_mu=[parameter((hidden, space.num_labels), rng, scale) for _ in range(heads)],
            w_std=[parameter((hidden, 1), rng, scale) for _ in range(heads)],
            fusion_gru=GruParams.init(feature_dim, feature_dim, rng, scale),
        )

    def tensors(self):
        out = self.gru.tensors() + list(self.w_mu) + list(self.w_std)
        return out + self.fusion_gru.tensors()


@dataclass
class AttentionTrace:
    """Record of one sampling episode: per-timestep samples (one per head),
    the combined per-step attention scalars, and the episode log-prob sums."""

    steps: list
    atts: list
    discrete_logprob_sum: Tensor
    continuous_logprob_sum: Tensor
    mode: str

    @property
    def length(self) -> int:
        return len(self.steps)


def _sample_head(h, w_mu, w_std, space, rng, mode, action_mode, st_soft_forward):
    logits = matmul(h, w_mu)
    sigma = add(softplus(pick(matmul(h, w_std), 0)), constant(np.asarray(SIGMA_FLOOR)))

    stochastic = mode == "stochastic"
    if action_mode == "continuous":
        # single-Gaussian policy: mean comes straight from the relaxed
        # probabilities, no categorical draw
        soft = softmax(logits, axis=-1)
        hard = int(np.argmax(soft.values))
        mu = sigmoid(soft_action_value(soft, space.n))
        dlp = constant(np.asarray(0.0))
    else:
        if stochastic:
            soft = gumbel_softmax(logits, space.temperature, rng)
            hard = categorical_sample(soft, rng)
        else:
            soft = softmax(logits, axis=-1)
            hard = int(np.argmax(soft.values))
        dlp = discrete_logprob(soft, hard)
        if st_soft_forward:
            mu_in = soft_action_value(soft, space.n)
        else:
            mu_in = straight_through(hard, soft, space.n)
        mu = sigmoid(mu_in)

    if action_mode == "discrete":
        # discrete action used directly as the attention weight
        raw = mu
        att = mu
        clp = constant(np.asarray(0.0))
    elif stochastic:
        raw = normal_sample_reparam(mu, sigma, rng)
        att = sigmoid(raw)
        clp = normal_logprob(raw, mu, sigma)
    else:
        raw = mu
        att = sigmoid(mu)
        clp = normal_logprob(mu, mu, sigma)

    sample = CompoundSample(soft_probs=soft, hard_index=hard, discrete_logprob=dlp,
                            mu=mu, sigma=sigma, raw_sample=raw, att=att,
                            continuous_logprob=clp)
    return sample, att, dlp, clp


def policy_rollout(features, params: PolicyParams, space: ActionSpace,
                   rng: np.random.Generator | None = None, mode: str = "stochastic",
                   action_mode: str = "compound", st_soft_forward: bool = False) -> AttentionTrace:
    """Run the attention policy over a feature sequence.

    ``features`` is a nonempty list of equal-length vector tensors. In
    stochastic mode every step draws through the compound distribution; in
    deterministic mode the argmax category is taken and the attention is
    the squashed mean (log-prob sums are still recorded).

    ``st_soft_forward`` replaces the hard straight-through forward value
    with the relaxed expectation so the whole graph is finite-difference
    checkable; never used in training.
    """
    features = list(features)
    if not features:
        raise ValueError("policy_rollout: empty feature sequence")
    if mode not in ROLLOUT_MODES:
        raise ValueError(f"unknown rollout mode {mode!r}")
    if action_mode not in ACTION_MODES:
        raise ValueError(f"unknown action mode {action_mode!r}")
    if mode == "stochastic" and rng is None:
        raise ValueError("stochastic rollout needs an rng")

    h = constant(np.zeros(params.gru.hidden_size))
    dsum = constant(np.asarray(0.0))
    csum = constant(np.asarray(0.0))
    steps = []
    atts = []
    for f in features:
        h = gru_step(f, h, params.gru)
        head_samples = []
        head_atts = []
        for w_mu, w_std in zip(params.w_mu, params.w_std):
            sample, att, dlp, clp = _sample_head(
                h, w_mu, w_std, space, rng, mode, action_mode, st_soft_forward)
            head_samples.append(sample)
            head_atts.append(att)
            dsum = add(dsum, dlp)
            csum = add(csum, clp)
        combined = head_atts[0]
        if len(head_atts) == 2:
            combined = scalar_mul(add(head_atts[0], head_atts[1]), 0.5)
        steps.append(head_samples)
        atts.append(combined)
    return AttentionTrace(steps=steps, atts=atts, discrete_logprob_sum=dsum,
                          continuous_logprob_sum=csum, mode=mode)


def multi_head_rollout(features, params: PolicyParams, space: ActionSpace,
                       rng: np.random.Generator | None = None, mode: str = "stochastic",
                       action_mode: str = "compound") -> AttentionTrace:
    """Two-head rollout: both heads share the policy GRU, sample their own
    compound action per step, and the step attention is the head mean."""
    if params.head_count != 2:
        raise ValueError(f"multi_head_rollout needs exactly 2 heads, got {params.head_count}")
    return policy_rollout(features, params, space, rng, mode, action_mode)


def neutral_trace(length: int, lam: float) -> AttentionTrace:
    """Attention switched off: every weight is 1/lambda so the scaled
    features equal the originals and the PG sums are zero constants."""
    att = 1.0 / lam
    atts = [constant(np.asarray(att)) for _ in range(length)]
    zero = constant(np.asarray(0.0))
    return AttentionTrace(steps=[[] for _ in range(length)], atts=atts,
                          discrete_logprob_sum=zero, continuous_logprob_sum=zero,
                          mode="deterministic")


def fuse(features, trace: AttentionTrace, lam: float, gru: GruParams | None) -> Tensor:
    """Scale each feature by lambda times its attention weight, reason over
    the scaled sequence with the fusion GRU, and return final hidden state
    plus the mean scaled feature. Callers normalize the result before any
    similarity computation.

    ``gru=None`` is a pass-through configuration (final hidden := last
    scaled feature) used to probe linearity."""
    features = list(features)
    if len(features) != trace.length:
        raise ValueError(f"fuse: {len(features)} features vs trace length {trace.length}")
    if lam <= 0:
        raise ValueError(f"fuse: lambda must be positive, got {lam}")
    adjusted = [mul(f, scalar_mul(att, lam)) for f, att in zip(features, trace.atts)]
    if gru is None:
        h = adjusted[-1]
    else:
        h = constant(np.zeros(gru.hidden_size))
        for a in adjusted:
            h = gru_step(a, h, gru)
    acc = adjusted[0]
    for a in adjusted[1:]:
        acc = add(acc, a)
    return add(h, scalar_mul(acc, 1.0 / len(adjusted)))
