"""Training loop, retrieval evaluation, and the ablation grid runner.

Runs are deterministic: one seed drives independent init / rollout /
shuffle streams, and every logging record is a JSON object (one per line
in the on-disk metric log). Wall-time fields are informational only;
determinism comparisons strip them via ``canonical_records``.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, add, backward, clear_tape, matmul, scalar_mul, stack_rows, transpose
from .config import ModelConfig
from .data import SyntheticDataset
from .losses import (
    continuous_pg_loss,
    discrete_pg_loss,
    instance_loss,
    text_decoding_loss,
    total_loss,
    triplet_loss,
)
from .model import MatchingModel
from .rewards import attach_baseline, instance_rewards, rank_of


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, components: dict):
        self.epoch = epoch
        self.step = step
        self.components = components
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}: {components}")


@dataclass
class TrainResult:
    records: list
    final_params: dict
    best_params: dict
    best_epoch: int
    best_metric: float
    config: ModelConfig
    vocab_size: int
    num_instances: int

    def rebuild(self, best: bool = True) -> MatchingModel:
        model = MatchingModel(self.config, self.vocab_size, self.num_instances,
                              np.random.default_rng(0))
        model.load_state_arrays(self.best_params if best else self.final_params)
        return model


def canonical_records(records) -> list:
    """Records with the wall-time field removed, for determinism checks."""
    return [{k: v for k, v in rec.items() if k != "wall_time"} for rec in records]


def record_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def _batch_losses(model: MatchingModel, instances, labels, rollout_rng,
                  st_soft_forward: bool = False):
    cfg = model.config
    img_embs, txt_embs, img_traces, txt_traces = [], [], [], []
    for inst in instances:
        emb_i, trace_i = model.embed_image(inst.regions, rollout_rng, mode="stochastic",
                                           st_soft_forward=st_soft_forward)
        emb_t, trace_t = model.embed_text(inst.tokens, rollout_rng, mode="stochastic",
                                          st_soft_forward=st_soft_forward)
        img_embs.append(emb_i)
        txt_embs.append(emb_t)
        img_traces.append(trace_i)
        txt_traces.append(trace_t)

    sim = matmul(stack_rows(img_embs), transpose(stack_rows(txt_embs)))
    sim_detached = sim.values.copy()
    reward_records = instance_rewards(sim_detached, direction="both", mode=cfg.reward_mode)
    attach_baseline(reward_records, beta=cfg.beta)
    advantages = [rec.advantage for rec in reward_records]

    parts = {}
    if cfg.loss_triplet:
        parts["triplet"] = triplet_loss(sim, cfg.margin)
    if cfg.loss_instance:
        parts["instance"] = instance_loss(img_embs + txt_embs, labels + labels,
                                          model.classifier)
    if cfg.loss_decode:
        td_img = None
        td_txt = None
        for inst, emb_i, emb_t in zip(instances, img_embs, txt_embs):
            li = text_decoding_loss(emb_i, inst.tokens, model.decoder)
            lt = text_decoding_loss(emb_t, inst.tokens, model.decoder)
            td_img = li if td_img is None else add(td_img, li)
            td_txt = lt if td_txt is None else add(td_txt, lt)
        parts["text_decode_image"] = scalar_mul(td_img, 1.0 / len(instances))
        parts["text_decode_text"] = scalar_mul(td_txt, 1.0 / len(instances))
    if cfg.pg_mode in ("discrete", "compound"):
        parts["pg_discrete_image"] = discrete_pg_loss(img_traces, advantages, cfg.pg_batch_mean)
        parts["pg_discrete_text"] = discrete_pg_loss(txt_traces, advantages, cfg.pg_batch_mean)
    if cfg.pg_mode in ("continuous", "compound"):
        parts["pg_continuous_image"] = continuous_pg_loss(img_traces, advantages,
                                                          cfg.pg_batch_mean)
        parts["pg_continuous_text"] = continuous_pg_loss(txt_traces, advantages,
                                                         cfg.pg_batch_mean)
    bundle = total_loss(**parts)
    mean_reward = float(np.mean([rec.reward for rec in reward_records]))
    return bundle, mean_reward


def train(config: ModelConfig, dataset: SyntheticDataset, log_fh=None) -> TrainResult:
    """Run the full training recipe: seeded shuffling, stochastic rollouts,
    all configured losses, Adam with the two-phase learning rate, per-epoch
    deterministic validation, and best-validation checkpoint selection."""
    config.validate()
    train_split = dataset.split("train")
    val_split = dataset.split("val")
    if len(train_split) < 2:
        raise ValueError("training needs at least 2 instances")

    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_rng = np.random.default_rng(seeds[0])
    rollout_rng = np.random.default_rng(seeds[1])
    shuffle_rng = np.random.default_rng(seeds[2])

    model = MatchingModel(config, dataset.vocab_size, len(train_split), init_rng)
    opt = Adam(model.trainable_parameters(), lr=config.lr)

    records = []
    start = time.perf_counter()

    def emit(record):
        record["wall_time"] = round(time.perf_counter() - start, 6)
        records.append(record)
        if log_fh is not None:
            log_fh.write(record_line(record) + "\n")
            log_fh.flush()

    best_metric = -1.0
    best_epoch = 0
    best_params = model.state_arrays()
    step = 0
    eval_ks = _eval_ks(len(val_split))

    for epoch in range(1, config.epochs + 1):
        opt.lr = config.lr if epoch <= config.lr_drop_epoch else config.lr_after_drop
        order = shuffle_rng.permutation(len(train_split))
        for lo in range(0, len(order), config.batch_size):
            chunk = order[lo:lo + config.batch_size]
            if chunk.size < 2:
                continue  # ranking losses need a gallery
            instances = [train_split[i] for i in chunk]
            labels = [int(i) for i in chunk]
            clear_tape()
            bundle, mean_reward = _batch_losses(model, instances, labels, rollout_rng)
            floats = bundle.as_floats()
            if not np.isfinite(floats["total"]):
                raise TrainingDiverged(epoch, step, floats)
            backward(bundle.total)
            opt.step()
            step += 1
            emit({"type": "train", "epoch": epoch, "step": step,
                  "reward_mean": mean_reward, **floats})
        metrics = evaluate(model, val_split, ks=eval_ks)
        emit({"type": "eval", "epoch": epoch, "step": step, **metrics})
        score = metrics["r1_i2t"] + metrics["r1_t2i"]
        if score > best_metric:
            best_metric = score
            best_epoch = epoch
            best_params = model.state_arrays()

    clear_tape()
    return TrainResult(records=records, final_params=model.state_arrays(),
                       best_params=best_params, best_epoch=best_epoch,
                       best_metric=best_metric, config=config,
                       vocab_size=dataset.vocab_size, num_instances=len(train_split))


def _eval_ks(split_size: int):
    return tuple(k for k in (1, 5, 10) if k <= split_size)


def evaluate(model: MatchingModel, instances, ks=(1, 5, 10)) -> dict:
    """Recall at K over a full split, both directions, with deterministic
    rollouts. The correct item must rank within the top K (descending
    similarity, ties by index)."""
    if len(instances) < max(ks):
        raise ValueError(f"split of {len(instances)} is smaller than K={max(ks)}")
    clear_tape()
    img = np.stack([model.embed_image(inst.regions, None, mode="deterministic")[0].values
                    for inst in instances])
    txt = np.stack([model.embed_text(inst.tokens, None, mode="deterministic")[0].values
                    for inst in instances])
    clear_tape()
    sim = img @ txt.T
    out = {}
    for direction, view in (("i2t", sim), ("t2i", sim.T)):
        ranks = np.array([rank_of(view[k], k) for k in range(view.shape[0])])
        for k in ks:
            out[f"r{k}_{direction}"] = float(np.mean(ranks <= k))
    return out


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------


def _run_cell(args):
    base_dict, name, overrides, seed, dataset = args
    config = ModelConfig.from_dict(base_dict).replaced(**overrides).replaced(seed=seed)
    result = train(config, dataset)
    model = result.rebuild(best=True)
    metrics = evaluate(model, dataset.split("test"), ks=_eval_ks(len(dataset.split("test"))))
    return {"cell": name, "seed": seed, "best_epoch": result.best_epoch, **metrics}


def run_ablation(base_config: ModelConfig, grid, dataset: SyntheticDataset,
                 seeds=(0, 1, 2, 3, 4), jobs: int = 1):
    """Train and evaluate every (cell, seed) combination. ``grid`` is a list
    of (name, config-overrides) pairs. Failures are captured per cell, not
    propagated. Returns (per-run records, aggregated rows)."""
    cells = [(base_config.to_dict(), name, overrides, int(seed), dataset)
             for name, overrides in grid for seed in seeds]
    runs = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell, cell) for cell in cells]
            for cell, fut in zip(cells, futures):
                try:
                    runs.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - cell errors must not kill the grid
                    runs.append({"cell": cell[1], "seed": cell[3], "error": str(exc)})
    else:
        for cell in cells:
            try:
                runs.append(_run_cell(cell))
            except Exception as exc:  # noqa: BLE001
                runs.append({"cell": cell[1], "seed": cell[3], "error": str(exc)})

    order = []
    for name, _ in grid:
        if name not in order:
            order.append(name)
    rows = []
    metric_names = sorted({k for run in runs for k in run
                           if k.startswith("r") and "_" in k})
    for name in order:
        ok = [r for r in runs if r["cell"] == name and "error" not in r]
        failed = [r for r in runs if r["cell"] == name and "error" in r]
        row = {"cell": name, "runs": len(ok), "failures": len(failed)}
        for m in metric_names:
            vals = [r[m] for r in ok if m in r]
            if vals:
                row[f"{m}_mean"] = float(np.mean(vals))
                row[f"{m}_std"] = float(np.std(vals))
        rows.append(row)
    return runs, rows


def format_ablation_table(rows) -> str:
    """Aligned text table of the aggregated grid results."""
    metrics = sorted({k[:-5] for row in rows for k in row if k.endswith("_mean")})
    headers = ["cell", "runs"] + metrics
    lines = []
    widths = [max(len(h), 18) for h in headers]
    lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    for row in rows:
        cells = [str(row["cell"]).ljust(widths[0]), str(row["runs"]).ljust(widths[1])]
        for m, w in zip(metrics, widths[2:]):
            if f"{m}_mean" in row:
                cells.append(f"{row[f'{m}_mean']:.4f} ± {row[f'{m}_std']:.4f}".ljust(w))
            else:
                cells.append("-".ljust(w))
        lines.append("  ".join(cells))
    return "\n".join(lines)
