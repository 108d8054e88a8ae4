"""Sampling machinery for the compound action distribution.

A discrete category is drawn through a Gumbel-softmax relaxation, mapped
to the mean of a Normal via a logistic squash, and the continuous action
is a reparameterized draw from that Normal. Log-densities of both stages
are kept on the tape so policy-gradient losses can differentiate them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    DomainError,
    Tensor,
    add,
    constant,
    div,
    log,
    mul,
    pick,
    record_op,
    scalar_mul,
    softmax,
    square,
    sub,
    tsum,
)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ActionSpace:
    """Discrete action layout: labels run 0..n inclusive, so logits have
    n+1 entries; n is also the divisor in the label -> mean map."""

    n: int = 100
    temperature: float = 1.0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"action space needs n >= 2, got {self.n}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    @property
    def num_labels(self) -> int:
        return self.n + 1


@dataclass
class CompoundSample:
    """One timestep of the two-stage action draw."""

    soft_probs: Tensor
    hard_index: int
    discrete_logprob: Tensor
    mu: Tensor
    sigma: Tensor
    raw_sample: Tensor
    att: Tensor
    continuous_logprob: Tensor


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = np.clip(rng.random(shape), 1e-300, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def gumbel_softmax(logits: Tensor, temperature: float, rng: np.random.Generator,
                   noise: np.ndarray | None = None) -> Tensor:
    """Relaxed categorical sample on the simplex, differentiable w.r.t.
    logits. Works row-wise on matrices. ``noise`` overrides the Gumbel
    draw (used to freeze randomness in gradient checks)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if noise is None:
        noise = gumbel_noise(rng, logits.shape)
    perturbed = add(logits, constant(noise))
    return softmax(scalar_mul(perturbed, 1.0 / temperature), axis=-1)


def categorical_sample(probs, rng: np.random.Generator) -> int:
    """Draw an index from a simplex vector."""
    p = probs.values if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"categorical_sample expects a vector, got shape {p.shape}")
    if np.any(p < 0):
        raise ValueError("categorical_sample: negative probability entry")
    total = p.sum()
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"categorical_sample: probabilities sum to {total}, not 1")
    cum = np.cumsum(p)
    idx = int(np.searchsorted(cum, rng.random() * total, side="right"))
    return min(idx, p.size - 1)


def discrete_logprob(probs: Tensor, index: int) -> Tensor:
    """log(probs[index]) as a tape node, differentiable into the probs."""
    index = int(index)
    if probs.values[index] <= 0.0:
        raise DomainError(f"discrete_logprob: zero probability at index {index}")
    return log(pick(probs, index))


def action_to_mu(index: int, n: int) -> float:
    """Logistic squash of the label fraction: 1 / (1 + exp(-index / n))."""
    index = int(index)
    if not 0 <= index <= n:
        raise ValueError(f"action label {index} outside [0, {n}]")
    return 1.0 / (1.0 + math.exp(-index / n))


def straight_through(hard_index: int, soft_probs: Tensor, n: int) -> Tensor:
    """Pre-squash mean input: forward value is exactly hard_index/n, the
    backward pass sees the relaxed expectation sum_i (i/n) * probs[i]."""
    labels = np.arange(soft_probs.size, dtype=np.float64) / n
    out = np.asarray(float(hard_index) / n)

    def bw(g):
        return (g * labels,)

    return record_op("straight_through", (soft_probs,), out, bw)


def soft_action_value(soft_probs: Tensor, n: int) -> Tensor:
    """The relaxed path on its own: sum_i (i/n) * probs[i]. This is what
    ``straight_through`` routes gradients through."""
    labels = np.arange(soft_probs.size, dtype=np.float64) / n
    return tsum(mul(soft_probs, constant(labels)))


def normal_sample_reparam(mu: Tensor, sigma: Tensor, rng: np.random.Generator,
                          eps: float | None = None) -> Tensor:
    """mu + sigma * eps with eps a standard-normal constant, so gradients
    flow into both mu and sigma."""
    if float(sigma.values) <= 0.0:
        raise DomainError(f"normal_sample_reparam: sigma must be positive, got {float(sigma.values)}")
    if eps is None:
        eps = float(rng.standard_normal())
    return add(mu, scalar_mul(sigma, eps))


def normal_logprob(x, mu, sigma) -> Tensor:
    """Normal log-density -log(2*pi)/2 - log(sigma) - (x-mu)^2 / (2*sigma^2),
    evaluated on the raw (pre-sigmoid) sample."""
    x = x if isinstance(x, Tensor) else constant(np.asarray(float(x)))
    mu = mu if isinstance(mu, Tensor) else constant(np.asarray(float(mu)))
    sigma = sigma if isinstance(sigma, Tensor) else constant(np.asarray(float(sigma)))
    if float(sigma.values) <= 0.0:
        raise DomainError(f"normal_logprob: sigma must be positive, got {float(sigma.values)}")
    quad = div(square(sub(x, mu)), scalar_mul(square(sigma), 2.0))
    return sub(sub(constant(np.asarray(-0.5 * LOG_2PI)), log(sigma)), quad)
