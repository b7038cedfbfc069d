"""Shared fixtures: synthetic corpora written through the real ingestion path."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from maple.corpus import Corpus, load_corpus, write_embeddings


def write_corpus_files(
    out_dir: Path,
    *,
    n_prompts: int = 6,
    n_traits: int = 2,
    n_levels: int = 4,
    per_level: int = 6,
    d: int = 8,
    d_u: int = 4,
    noise: float = 0.1,
    sep: float = 1.0,
    seed: int = 0,
    shift_policy: str = "none",
    scale_start: float = 0.0,
    with_features: bool = True,
    with_context: bool = True,
) -> Path:
    """Write a level-clustered synthetic dataset and return the manifest path.

    Essay embeddings sit in per-level clusters `sep` apart with isotropic
    gaussian noise of scale `noise`; both traits share each essay's level so
    one embedding supports both. Feature vectors carry the level in their
    first coordinate.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    traits = [f"T{t}" for t in range(n_traits)]
    prompts = [f"P{p}" for p in range(n_prompts)]
    scale_values = [scale_start + i for i in range(n_levels)]

    centers = np.zeros((n_levels, d))
    centers[:, 0] = sep * np.arange(n_levels)

    records: dict[str, np.ndarray] = {}
    label_rows = []
    feature_rows = []
    for prompt in prompts:
        for level in range(n_levels):
            for j in range(per_level):
                essay_id = f"{prompt}_L{level}_{j}"
                vec = centers[level] + noise * rng.standard_normal(d)
                records[f"essay:{essay_id}"] = vec.astype(np.float32)
                label_rows.append(
                    [essay_id, prompt, *[repr(float(scale_values[level]))] * n_traits]
                )
                if with_features:
                    feats = noise * rng.standard_normal(d_u)
                    feats[0] += sep * level
                    feature_rows.append([essay_id, *[repr(float(v)) for v in feats]])
    for prompt in prompts:
        records[f"prompt:{prompt}"] = rng.standard_normal(d).astype(np.float32)
    for trait in traits:
        records[f"rubric:{trait}"] = rng.standard_normal(d).astype(np.float32)

    write_embeddings(out_dir / "embeddings.emb1", records)
    with open(out_dir / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["essay_id", "prompt_id", *traits])
        writer.writerows(label_rows)
    if with_features:
        with open(out_dir / "features.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["essay_id", *[f"f{i}" for i in range(d_u)]])
            writer.writerows(feature_rows)

    manifest = {
        "dataset_name": "synthetic",
        "d": d,
        "d_u": d_u if with_features else 0,
        "shift_policy": shift_policy,
        "traits": [
            {
                "trait_id": t,
                "rubric_vec_key": f"rubric:{t}" if with_context else None,
                "scale": scale_values,
            }
            for t in traits
        ],
        "prompts": [
            {"prompt_id": p, "prompt_vec_key": f"prompt:{p}" if with_context else None}
            for p in prompts
        ],
        "labels_csv": "labels.csv",
        "embeddings_file": "embeddings.emb1",
    }
    if with_features:
        manifest["features_csv"] = "features.csv"
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest_path


@pytest.fixture
def synth_corpus(tmp_path) -> Corpus:
    return load_corpus(write_corpus_files(tmp_path / "synth"))


@pytest.fixture
def five_prompt_corpus(tmp_path) -> Corpus:
    return load_corpus(
        write_corpus_files(tmp_path / "five", n_prompts=5, per_level=7, seed=3)
    )
