"""Objective terms: REINFORCE losses for both action stages, the
hardest-negative triplet loss, instance classification, and a small
causal-convolution text-decoding loss with weights shared across
modalities. The training objective is their unweighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    constant,
    concat,
    gather_rows,
    log_softmax,
    matmul,
    neg,
    parameter,
    pick,
    pick_row,
    relu,
    scalar_mul,
    sub,
)
from .encoders import TokenSeq


@dataclass
class LossBundle:
    """Every objective component of one batch, plus their sum. PG terms are
    sign-indefinite; everything else is non-negative."""

    triplet: Tensor
    instance: Tensor
    text_decode_image: Tensor
    text_decode_text: Tensor
    pg_discrete_image: Tensor
    pg_continuous_image: Tensor
    pg_discrete_text: Tensor
    pg_continuous_text: Tensor
    total: Tensor

    COMPONENTS = ("triplet", "instance", "text_decode_image", "text_decode_text",
                  "pg_discrete_image", "pg_continuous_image",
                  "pg_discrete_text", "pg_continuous_text")

    def as_floats(self) -> dict:
        out = {name: getattr(self, name).item() for name in self.COMPONENTS}
        out["total"] = self.total.item()
        return out


def _zero() -> Tensor:
    return constant(np.asarray(0.0))


def total_loss(triplet=None, instance=None, text_decode_image=None, text_decode_text=None,
               pg_discrete_image=None, pg_continuous_image=None,
               pg_discrete_text=None, pg_continuous_text=None) -> LossBundle:
    """Assemble the bundle; missing components enter as zero constants so
    ablation switches zero out exactly the disabled terms."""
    parts = {
        "triplet": triplet, "instance": instance,
        "text_decode_image": text_decode_image, "text_decode_text": text_decode_text,
        "pg_discrete_image": pg_discrete_image, "pg_continuous_image": pg_continuous_image,
        "pg_discrete_text": pg_discrete_text, "pg_continuous_text": pg_continuous_text,
    }
    parts = {name: (_zero() if t is None else t) for name, t in parts.items()}
    total = _zero()
    for name in LossBundle.COMPONENTS:
        total = add(total, parts[name])
    return LossBundle(total=total, **parts)


def discrete_pg_loss(traces, advantages, batch_mean: bool = True) -> Tensor:
    """REINFORCE surrogate for the categorical stage: minus the advantage-
    weighted episode log-prob sums, averaged over the batch. Advantages are
    constants; gradients flow only through the log-probs."""
    traces = list(traces)
    advantages = np.asarray(advantages, dtype=np.float64)
    if len(traces) != advantages.size:
        raise ValueError(f"{len(traces)} traces vs {advantages.size} advantages")
    scale = 1.0 / len(traces) if batch_mean else 1.0
    loss = _zero()
    for trace, adv in zip(traces, advantages):
        loss = add(loss, scalar_mul(trace.discrete_logprob_sum, -float(adv) * scale))
    return loss


def continuous_pg_loss(traces, advantages, batch_mean: bool = True) -> Tensor:
    """REINFORCE surrogate for the Normal stage, on the episode sums of the
    raw-sample log-densities."""
    traces = list(traces)
    advantages = np.asarray(advantages, dtype=np.float64)
    if len(traces) != advantages.size:
        raise ValueError(f"{len(traces)} traces vs {advantages.size} advantages")
    scale = 1.0 / len(traces) if batch_mean else 1.0
    loss = _zero()
    for trace, adv in zip(traces, advantages):
        loss = add(loss, scalar_mul(trace.continuous_logprob_sum, -float(adv) * scale))
    return loss


def triplet_loss(sim: Tensor, margin: float = 0.2) -> Tensor:
    """Hinge ranking loss with in-batch hardest negatives, averaged over
    instances. Negatives are selected on detached values; gradients reach
    only the diagonal and the selected entries."""
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    k_total = sim.shape[0]
    if sim.values.ndim != 2 or sim.shape[0] != sim.shape[1] or k_total < 2:
        raise ValueError(f"triplet loss needs a square gallery of size >= 2, got {sim.shape}")
    vals = sim.values
    masked = vals.copy()
    np.fill_diagonal(masked, -np.inf)
    hardest_col_per_row = masked.argmax(axis=1)
    hardest_row_per_col = masked.argmax(axis=0)

    m = constant(np.asarray(float(margin)))
    loss = _zero()
    for k in range(k_total):
        pos = pick(sim, (k, k))
        neg_txt = pick(sim, (k, int(hardest_col_per_row[k])))
        neg_img = pick(sim, (int(hardest_row_per_col[k]), k))
        loss = add(loss, relu(add(sub(m, pos), neg_txt)))
        loss = add(loss, relu(add(sub(m, pos), neg_img)))
    return scalar_mul(loss, 1.0 / k_total)


def instance_loss(embeddings, labels, classifier: Tensor) -> Tensor:
    """Mean softmax cross-entropy of each embedding against its instance
    label, through a classifier shared by both modalities."""
    embeddings = list(embeddings)
    labels = [int(l) for l in labels]
    if len(embeddings) != len(labels):
        raise ValueError(f"{len(embeddings)} embeddings vs {len(labels)} labels")
    num_classes = classifier.shape[1]
    for l in labels:
        if not 0 <= l < num_classes:
            raise ValueError(f"label {l} outside [0, {num_classes})")
    loss = _zero()
    for emb, label in zip(embeddings, labels):
        lsm = log_softmax(matmul(emb, classifier), axis=-1)
        loss = add(loss, neg(pick(lsm, label)))
    return scalar_mul(loss, 1.0 / len(embeddings))


@dataclass
class DecoderParams:
    """Shared text decoder: token embeddings, a start vector, an embedding
    conditioning map, two causal conv layers (kernel 3), and the vocabulary
    projection. One instance serves both the image and text branches."""

    tok_table: Tensor
    start: Tensor
    cond: Tensor
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    out_w: Tensor
    out_b: Tensor

    @property
    def channels(self) -> int:
        return self.tok_table.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.tok_table.shape[0]

    @classmethod
    def init(cls, vocab_size: int, embed_dim: int, channels: int,
             rng: np.random.Generator, scale: float = 0.1) -> "DecoderParams":
        def w(*shape):
            return parameter(shape, rng, scale)

        return cls(
            tok_table=w(vocab_size, channels),
            start=w(channels,),
            cond=w(embed_dim, channels),
            conv1_w=w(3 * channels, channels), conv1_b=parameter(np.zeros(channels)),
            conv2_w=w(3 * channels, channels), conv2_b=parameter(np.zeros(channels)),
            out_w=w(channels, vocab_size), out_b=parameter(np.zeros(vocab_size)),
        )

    def tensors(self):
        return [self.tok_table, self.start, self.cond, self.conv1_w, self.conv1_b,
                self.conv2_w, self.conv2_b, self.out_w, self.out_b]


def _causal_conv(xs, w, b):
    channels = xs[0].shape[0]
    pad = constant(np.zeros(channels))
    out = []
    for i in range(len(xs)):
        left2 = xs[i - 2] if i >= 2 else pad
        left1 = xs[i - 1] if i >= 1 else pad
        window = concat([left2, left1, xs[i]])
        out.append(relu(add(matmul(window, w), b)))
    return out


def text_decoding_loss(embedding: Tensor, target, decoder: DecoderParams) -> Tensor:
    """Teacher-forced next-token cross-entropy. Each position sees the
    conditioning embedding plus a causal convolution over the previous
    target tokens; position i predicts target[i]."""
    ids = target.token_ids if isinstance(target, TokenSeq) else np.asarray(target, dtype=np.int64)
    if ids.size < 1:
        raise ValueError("text_decoding_loss: empty target")
    if ids.min() < 0 or ids.max() >= decoder.vocab_size:
        raise ValueError(f"target token outside vocabulary [0, {decoder.vocab_size})")

    cond_vec = matmul(embedding, decoder.cond)
    prev = gather_rows(decoder.tok_table, ids[:-1]) if ids.size > 1 else None
    xs = [add(decoder.start, cond_vec)]
    for i in range(ids.size - 1):
        xs.append(add(pick_row(prev, i), cond_vec))

    hidden = _causal_conv(xs, decoder.conv1_w, decoder.conv1_b)
    hidden = _causal_conv(hidden, decoder.conv2_w, decoder.conv2_b)

    loss = _zero()
    for i, h in enumerate(hidden):
        lsm = log_softmax(add(matmul(h, decoder.out_w), decoder.out_b), axis=-1)
        loss = add(loss, neg(pick(lsm, int(ids[i]))))
    return scalar_mul(loss, 1.0 / ids.size)
