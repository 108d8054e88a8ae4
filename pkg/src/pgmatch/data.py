"""Synthetic paired-feature datasets and their on-disk format.

Each instance couples a region-feature matrix with a token sequence, both
derived from one latent class vector plus modality-specific noise. The
export format is a manifest plus raw binary matrices: a header of two
little-endian uint32 extents (rows, cols) followed by row-major
little-endian float64 values.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

SPLITS = ("train", "val", "test")
DATASET_FORMAT = "pgmatch-dataset-v1"


@dataclass
class Instance:
    class_id: int
    regions: np.ndarray   # (T, d)
    tokens: np.ndarray    # (N,) int64


@dataclass
class SyntheticDataset:
    classes: int
    regions_per_instance: int
    tokens_per_instance: int
    feature_dim: int
    noise_scale: float
    seed: int
    distractors: int
    splits: dict = field(default_factory=dict)

    @property
    def vocab_size(self) -> int:
        return self.classes + self.distractors

    def split(self, name: str) -> list:
        if name not in self.splits:
            raise KeyError(f"no split {name!r}; have {sorted(self.splits)}")
        return self.splits[name]


def generate_dataset(classes: int, regions: int = 8, tokens: int = 6, dim: int = 64,
                     noise_scale: float = 0.1, seed: int = 0,
                     train_per_class: int = 1, val_per_class: int = 1,
                     test_per_class: int = 1, class_token_rate: float = 0.75,
                     distractors: int | None = None) -> SyntheticDataset:
    """Sample class latents once, then emit per-split instances: regions are
    the latent prototype plus Gaussian noise, token sequences open with the
    class token and mix in distractor tokens."""
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if min(regions, tokens, dim) < 1:
        raise ValueError("regions, tokens and dim must all be >= 1")
    if noise_scale < 0:
        raise ValueError(f"noise_scale must be non-negative, got {noise_scale}")
    if min(train_per_class, val_per_class, test_per_class) < 1:
        raise ValueError("every split needs at least one instance per class")
    if distractors is None:
        distractors = max(4, classes // 4)

    rng = np.random.default_rng(seed)
    latents = rng.standard_normal((classes, dim))
    counts = {"train": train_per_class, "val": val_per_class, "test": test_per_class}
    splits = {}
    for split in SPLITS:
        instances = []
        for c in range(classes):
            for _ in range(counts[split]):
                feats = latents[c] + noise_scale * rng.standard_normal((regions, dim))
                toks = np.empty(tokens, dtype=np.int64)
                toks[0] = c
                for j in range(1, tokens):
                    if rng.random() < class_token_rate:
                        toks[j] = c
                    else:
                        toks[j] = classes + rng.integers(distractors)
                instances.append(Instance(class_id=c, regions=feats, tokens=toks))
        splits[split] = instances
    return SyntheticDataset(classes=classes, regions_per_instance=regions,
                            tokens_per_instance=tokens, feature_dim=dim,
                            noise_scale=noise_scale, seed=seed,
                            distractors=distractors, splits=splits)


# ---------------------------------------------------------------------------
# binary matrix format
# ---------------------------------------------------------------------------


def write_matrix(path, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"matrix files are 2-D, got shape {arr.shape}")
    header = np.asarray(arr.shape, dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = np.frombuffer(fh.read(8), dtype="<u4")
        if header.size != 2:
            raise ValueError(f"{path}: truncated header")
        rows, cols = int(header[0]), int(header[1])
        data = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8")
    if data.size != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} values, got {data.size}")
    return data.reshape(rows, cols).astype(np.float64)


def export_dataset(ds: SyntheticDataset, outdir, force: bool = False):
    """Materialize a dataset directory: manifest.json plus one regions and
    one tokens matrix per split. Refuses a non-empty directory unless
    forced."""
    os.makedirs(outdir, exist_ok=True)
    if os.listdir(outdir) and not force:
        raise FileExistsError(f"output directory {outdir} is not empty (use force to overwrite)")
    manifest = {
        "format": DATASET_FORMAT,
        "classes": ds.classes,
        "regions_per_instance": ds.regions_per_instance,
        "tokens_per_instance": ds.tokens_per_instance,
        "feature_dim": ds.feature_dim,
        "noise_scale": ds.noise_scale,
        "seed": ds.seed,
        "distractors": ds.distractors,
        "vocab_size": ds.vocab_size,
        "splits": {},
    }
    for split, instances in ds.splits.items():
        regions = np.concatenate([inst.regions for inst in instances], axis=0)
        tokens = np.stack([inst.tokens for inst in instances]).astype(np.float64)
        write_matrix(os.path.join(outdir, f"{split}_regions.bin"), regions)
        write_matrix(os.path.join(outdir, f"{split}_tokens.bin"), tokens)
        manifest["splits"][split] = {
            "count": len(instances),
            "class_ids": [int(inst.class_id) for inst in instances],
        }
    with open(os.path.join(outdir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_dataset(path) -> SyntheticDataset:
    with open(os.path.join(path, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"{path}: unknown dataset format {manifest.get('format')!r}")
    ds = SyntheticDataset(
        classes=manifest["classes"],
        regions_per_instance=manifest["regions_per_instance"],
        tokens_per_instance=manifest["tokens_per_instance"],
        feature_dim=manifest["feature_dim"],
        noise_scale=manifest["noise_scale"],
        seed=manifest["seed"],
        distractors=manifest["distractors"],
    )
    t = ds.regions_per_instance
    for split, info in manifest["splits"].items():
        regions = read_matrix(os.path.join(path, f"{split}_regions.bin"))
        tokens = read_matrix(os.path.join(path, f"{split}_tokens.bin")).astype(np.int64)
        count = info["count"]
        if regions.shape != (count * t, ds.feature_dim):
            raise ValueError(f"{path}: {split} regions shape {regions.shape} inconsistent with manifest")
        instances = []
        for i, class_id in enumerate(info["class_ids"]):
            instances.append(Instance(class_id=int(class_id),
                                      regions=regions[i * t:(i + 1) * t].copy(),
                                      tokens=tokens[i].copy()))
        ds.splits[split] = instances
    return ds


def dataset_fingerprint(path) -> str:
    """sha256 over the manifest and every matrix file, name-sorted."""
    digest = hashlib.sha256()
    for name in sorted(os.listdir(path)):
        if name == "manifest.json" or name.endswith(".bin"):
            digest.update(name.encode())
            with open(os.path.join(path, name), "rb") as fh:
                digest.update(fh.read())
    return digest.hexdigest()
