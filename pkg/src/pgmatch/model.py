"""Full matching model: both modality encoders, one attention policy per
branch, projections into the common embedding space, the shared instance
classifier and the shared text decoder. Also owns the checkpoint format
(same raw-matrix layout as datasets, one file per parameter)."""

from __future__ import annotations

import json
import os

import numpy as np

from .attention import PolicyParams, fuse, multi_head_rollout, neutral_trace, policy_rollout
from .autodiff import constant, l2_normalize, matmul, parameter, pick_row
from .config import ModelConfig
from .data import read_matrix, write_matrix
from .distributions import ActionSpace
from .encoders import embed_words, gcn_reason, load_embedding_table, region_affinity
from .losses import DecoderParams


class MatchingModel:
    def __init__(self, config: ModelConfig, vocab_size: int, num_instances: int,
                 rng: np.random.Generator):
        config.validate()
        self.config = config
        self.vocab_size = vocab_size
        self.num_instances = num_instances
        self.space = ActionSpace(n=config.n_actions, temperature=config.temperature)
        c, s = config, config.init_scale

        self.w_aff_a = parameter((c.feature_dim, c.feature_dim), rng, s)
        self.w_aff_b = self.w_aff_a if c.tied_affinity else parameter(
            (c.feature_dim, c.feature_dim), rng, s)
        self.w_gcn = [parameter((c.feature_dim, c.feature_dim), rng, s)
                      for _ in range(c.gcn_layers)]
        self.word_table = parameter((vocab_size, c.word_dim), rng, s)
        self.img_policy = PolicyParams.init(c.feature_dim, c.hidden, self.space, rng,
                                            heads=c.heads, scale=s)
        self.txt_policy = PolicyParams.init(c.word_dim, c.hidden, self.space, rng,
                                            heads=c.heads, scale=s)
        self.proj_img = parameter((c.feature_dim, c.embed_dim), rng, s)
        self.proj_txt = parameter((c.word_dim, c.embed_dim), rng, s)
        self.classifier = parameter((c.embed_dim, num_instances), rng, s)
        self.decoder = DecoderParams.init(vocab_size, c.embed_dim, c.decoder_dim, rng,
                                          scale=c.decoder_init_scale)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict:
        out = {"w_aff_a": self.w_aff_a}
        if self.w_aff_b is not self.w_aff_a:
            out["w_aff_b"] = self.w_aff_b
        for i, w in enumerate(self.w_gcn):
            out[f"w_gcn.{i}"] = w
        out["word_table"] = self.word_table
        for branch, policy in (("img", self.img_policy), ("txt", self.txt_policy)):
            for name, t in zip(_GRU_FIELDS, policy.gru.tensors()):
                out[f"{branch}.gru.{name}"] = t
            for h, w in enumerate(policy.w_mu):
                out[f"{branch}.w_mu.{h}"] = w
            for h, w in enumerate(policy.w_std):
                out[f"{branch}.w_std.{h}"] = w
            for name, t in zip(_GRU_FIELDS, policy.fusion_gru.tensors()):
                out[f"{branch}.fusion_gru.{name}"] = t
        out["proj_img"] = self.proj_img
        out["proj_txt"] = self.proj_txt
        out["classifier"] = self.classifier
        for name, t in zip(_DECODER_FIELDS, self.decoder.tensors()):
            out[f"decoder.{name}"] = t
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def trainable_parameters(self) -> list:
        """Parameters reached by the configured loss graph. The optimizer
        must see exactly these: anything else never receives a gradient
        (adam treats a missing grad as an error by contract)."""
        cfg = self.config
        named = self.named_parameters()
        task_losses = cfg.loss_triplet or cfg.loss_instance or cfg.loss_decode

        def drop(predicate):
            for name in [n for n in named if predicate(n)]:
                named.pop(name)

        if cfg.pg_mode == "off":
            drop(lambda n: ".gru." in n or ".w_mu." in n or ".w_std." in n)
        elif cfg.pg_mode == "discrete":
            # attention is the squashed mean; the sigma head dangles
            drop(lambda n: ".w_std." in n)
        if not cfg.loss_decode:
            drop(lambda n: n.startswith("decoder."))
        if not cfg.loss_instance:
            drop(lambda n: n == "classifier")
        if not task_losses:
            # only the PG losses remain; they stop at the policy inputs
            drop(lambda n: ".fusion_gru." in n or n.startswith("proj_"))
            if cfg.pg_mode == "off":
                raise ValueError("no loss term is enabled; nothing to train")
        return list(named.values())

    def state_arrays(self) -> dict:
        return {name: t.values.copy() for name, t in self.named_parameters().items()}

    def load_state_arrays(self, arrays: dict):
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, t in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != expected {t.shape}")
            t.values = arr.copy()
            t.grad = None

    def load_word_embeddings(self, path):
        """Seed the word table from a pretrained plain-text embedding file
        (rows present in the file override the random init)."""
        self.word_table.values = load_embedding_table(
            path, self.vocab_size, self.config.word_dim, base=self.word_table.values)
        self.word_table.grad = None

    # -- forward ------------------------------------------------------------

    def encode_image(self, regions: np.ndarray) -> list:
        feats = constant(np.asarray(regions, dtype=np.float64))
        relation = region_affinity(feats, self.w_aff_a, self.w_aff_b)
        out = feats
        for w in self.w_gcn:
            out = gcn_reason(out, relation, w)
        return [pick_row(out, t) for t in range(out.shape[0])]

    def encode_text(self, tokens) -> list:
        emb = embed_words(tokens, self.word_table)
        return [pick_row(emb, i) for i in range(emb.shape[0])]

    def _rollout(self, features, policy: PolicyParams, rng, mode: str,
                 st_soft_forward: bool = False):
        pg = self.config.pg_mode
        if pg == "off":
            return neutral_trace(len(features), self.config.lam)
        action_mode = {"discrete": "discrete", "continuous": "continuous",
                       "compound": "compound"}[pg]
        if policy.head_count == 2 and not st_soft_forward:
            return multi_head_rollout(features, policy, self.space, rng, mode, action_mode)
        return policy_rollout(features, policy, self.space, rng, mode, action_mode,
                              st_soft_forward=st_soft_forward)

    def embed_image(self, regions: np.ndarray, rng, mode: str = "stochastic",
                    st_soft_forward: bool = False):
        features = self.encode_image(regions)
        trace = self._rollout(features, self.img_policy, rng, mode, st_soft_forward)
        fused = fuse(features, trace, self.config.lam, self.img_policy.fusion_gru)
        return l2_normalize(matmul(fused, self.proj_img)), trace

    def embed_text(self, tokens, rng, mode: str = "stochastic",
                   st_soft_forward: bool = False):
        features = self.encode_text(tokens)
        trace = self._rollout(features, self.txt_policy, rng, mode, st_soft_forward)
        fused = fuse(features, trace, self.config.lam, self.txt_policy.fusion_gru)
        return l2_normalize(matmul(fused, self.proj_txt)), trace

    # -- checkpoints ----------------------------------------------------------

    def save_checkpoint(self, outdir):
        os.makedirs(outdir, exist_ok=True)
        arrays = self.state_arrays()
        manifest = {
            "format": "pgmatch-checkpoint-v1",
            "config": self.config.to_dict(),
            "vocab_size": self.vocab_size,
            "num_instances": self.num_instances,
            "params": {},
        }
        for name, arr in arrays.items():
            fname = name.replace(".", "_") + ".bin"
            write_matrix(os.path.join(outdir, fname), arr.reshape(1, -1))
            manifest["params"][name] = {"file": fname, "shape": list(arr.shape)}
        with open(os.path.join(outdir, "checkpoint.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def load_checkpoint(cls, path) -> "MatchingModel":
        with open(os.path.join(path, "checkpoint.json"), "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        if manifest.get("format") != "pgmatch-checkpoint-v1":
            raise ValueError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
        config = ModelConfig.from_dict(manifest["config"])
        model = cls(config, manifest["vocab_size"], manifest["num_instances"],
                    np.random.default_rng(0))
        arrays = {}
        for name, info in manifest["params"].items():
            flat = read_matrix(os.path.join(path, info["file"]))
            arrays[name] = flat.reshape(info["shape"])
        model.load_state_arrays(arrays)
        return model


_GRU_FIELDS = ("w_xz", "w_hz", "b_z", "w_xr", "w_hr", "b_r", "w_xc", "w_hc", "b_c")
_DECODER_FIELDS = ("tok_table", "start", "cond", "conv1_w", "conv1_b",
                   "conv2_w", "conv2_b", "out_w", "out_b")
