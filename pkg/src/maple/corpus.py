"""Data model and ingestion: datasets, prompts, traits, score scales, essays,
embeddings and engineered features.

A corpus is loaded once from a JSON manifest plus a labels CSV, an optional
features CSV and a binary embeddings file, validated in full, and is immutable
afterwards. All downstream modules treat it as shared read-only state.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

LEVEL_TOLERANCE = 1e-9

EMB_MAGIC = b"EMB1"

MANIFEST_KEYS = {
    "dataset_name",
    "d",
    "d_u",
    "shift_policy",
    "traits",
    "prompts",
    "labels_csv",
    "features_csv",
    "embeddings_file",
}


class CorpusError(ValueError):
    """Raised for any ingestion or validation failure, naming the offender."""


class OffScaleError(CorpusError):
    """Score does not match any level of the scale within tolerance."""


# ---------------------------------------------------------------------------
# Embeddings file (binary, shared with the offline extractor)
# ---------------------------------------------------------------------------

def write_embeddings(path: str | Path, records: Mapping[str, np.ndarray]) -> None:
    """Write key -> vector records: magic, u32 count, u32 dim, then per record
    a u16 key length, the UTF-8 key, and dim little-endian float32 values."""
    items = list(records.items())
    if not items:
        raise CorpusError("embeddings file must contain at least one record")
    dim = len(items[0][1])
    buf = bytearray()
    buf += EMB_MAGIC
    buf += struct.pack("<II", len(items), dim)
    for key, vec in items:
        arr = np.asarray(vec, dtype="<f4")
        if arr.ndim != 1 or arr.shape[0] != dim:
            raise CorpusError(f"embedding '{key}' has dimension {arr.shape}, expected ({dim},)")
        raw = key.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CorpusError(f"embedding key too long: '{key[:32]}...'")
        buf += struct.pack("<H", len(raw))
        buf += raw
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def read_embeddings(path: str | Path) -> tuple[dict[str, np.ndarray], int]:
    """Read an embeddings file; returns ({key: float32 vector}, dim)."""
    data = Path(path).read_bytes()
    if data[:4] != EMB_MAGIC:
        raise CorpusError(f"{path}: bad magic, not an embeddings file")
    count, dim = struct.unpack_from("<II", data, 4)
    offset = 12
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", data, offset)
        offset += 2
        key = data[offset : offset + klen].decode("utf-8")
        offset += klen
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).copy()
        offset += 4 * dim
        if key in records:
            raise CorpusError(f"{path}: duplicate embedding key '{key}'")
        records[key] = vec
    if offset != len(data):
        raise CorpusError(f"{path}: trailing bytes after {count} records")
    return records, dim


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScoreScale:
    """Ordered score levels for one (prompt, trait). Under a shift-to-zero
    policy `values` start at 0 and `offset` restores the original scores."""

    values: tuple[float, ...]
    offset: float = 0.0

    def __post_init__(self) -> None:
        if len(self.values) < 2:
            raise CorpusError(f"scale needs at least 2 levels, got {self.values}")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise CorpusError(f"scale values must be strictly increasing: {self.values}")

    @property
    def n_levels(self) -> int:
        return len(self.values)

    def reported_value(self, level: int) -> float:
        """Original-units score for a level index (undoes any shift)."""
        return self.values[level] + self.offset


def level_of(score: float, scale: ScoreScale) -> int:
    """Index of the scale level matching `score` within 1e-9.

    Labels arrive as decimal text, so exact binary comparison is unsafe.
    """
    for i, v in enumerate(scale.values):
        if abs(v - score) <= LEVEL_TOLERANCE:
            return i
    raise OffScaleError(f"score {score!r} is not on scale {scale.values}")


@dataclass(frozen=True)
class Trait:
    trait_id: str
    rubric_key: str | None
    scales: dict[str, ScoreScale] = field(default_factory=dict)  # prompt_id -> scale

    def scale_for(self, prompt_id: str) -> ScoreScale:
        try:
            return self.scales[prompt_id]
        except KeyError:
            raise CorpusError(
                f"trait '{self.trait_id}' has no score scale for prompt '{prompt_id}'"
            ) from None


@dataclass(frozen=True)
class Prompt:
    prompt_id: str
    vec_key: str | None
    essay_ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class Essay:
    essay_id: str
    prompt_id: str
    labels: dict[str, float] = field(default_factory=dict)  # trait_id -> stored score
    levels: dict[str, int] = field(default_factory=dict)  # trait_id -> level index


@dataclass(frozen=True)
class FeatureNormalizer:
    """Per-dimension z-scoring fitted on training essays only. Dimensions with
    std below 1e-12 are centered but not rescaled."""

    mean: np.ndarray
    scale: np.ndarray

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.scale


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

class Corpus:
    """Immutable container for one dataset; safe to share across workers."""

    def __init__(
        self,
        *,
        dataset_name: str,
        d: int,
        d_u: int,
        shift_policy: str,
        traits: dict[str, Trait],
        prompts: dict[str, Prompt],
        essays: dict[str, Essay],
        essay_vecs: dict[str, np.ndarray],
        prompt_vecs: dict[str, np.ndarray],
        rubric_vecs: dict[str, np.ndarray],
        features: dict[str, np.ndarray],
    ) -> None:
        self.dataset_name = dataset_name
        self.d = d
        self.d_u = d_u
        self.shift_policy = shift_policy
        self.traits = traits
        self.prompts = prompts
        self.essays = essays
        self.essay_vecs = essay_vecs
        self.prompt_vecs = prompt_vecs
        self.rubric_vecs = rubric_vecs
        self.features = features
        # (trait, prompt) -> per-level essay-id lists, in labels-CSV row order
        self._pools: dict[tuple[str, str], list[list[str]]] = {}
        for essay in essays.values():
            for trait_id, level in essay.levels.items():
                key = (trait_id, essay.prompt_id)
                if key not in self._pools:
                    n = traits[trait_id].scale_for(essay.prompt_id).n_levels
                    self._pools[key] = [[] for _ in range(n)]
                self._pools[key][level].append(essay.essay_id)

    @property
    def prompt_ids(self) -> list[str]:
        return list(self.prompts)

    @property
    def trait_ids(self) -> list[str]:
        return list(self.traits)

    def scale_for(self, trait_id: str, prompt_id: str) -> ScoreScale:
        return self.traits[trait_id].scale_for(prompt_id)

    def annotated_prompts(self, trait_id: str) -> list[str]:
        """Prompts with at least one essay labeled on the trait."""
        return [p for p in self.prompts if (trait_id, p) in self._pools]

    def pool(
        self,
        trait_id: str,
        level: int,
        include: Iterable[str] | None = None,
        exclude: Iterable[str] | None = None,
    ) -> list[str]:
        """Essay ids labeled at `level` on the trait, restricted to the prompt
        filter, in deterministic (load) order. Empty lists are valid."""
        include_set = set(include) if include is not None else None
        exclude_set = set(exclude) if exclude is not None else frozenset()
        out: list[str] = []
        for prompt_id in self.prompts:
            if include_set is not None and prompt_id not in include_set:
                continue
            if prompt_id in exclude_set:
                continue
            per_level = self._pools.get((trait_id, prompt_id))
            if per_level is None or level >= len(per_level):
                continue
            out.extend(per_level[level])
        return out

    def prompt_level_pool(self, trait_id: str, prompt_id: str, level: int) -> list[str]:
        per_level = self._pools.get((trait_id, prompt_id))
        if per_level is None or level >= len(per_level):
            return []
        return per_level[level]

    def essay_vector(self, essay_id: str) -> np.ndarray:
        return self.essay_vecs[essay_id]

    def save(self, out_dir: str | Path) -> Path:
        """Write manifest + labels/features CSVs + embeddings so that
        `load_corpus` reproduces this corpus bit-exactly. Returns the
        manifest path."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

        trait_entries = []
        for trait in self.traits.values():
            scales = {
                p: [repr(v + s.offset) for v in s.values] for p, s in trait.scales.items()
            }
            # repr round-trips floats exactly; parse back to numbers for JSON
            entry = {
                "trait_id": trait.trait_id,
                "rubric_vec_key": trait.rubric_key,
                "scales": {p: [float(v) for v in vals] for p, vals in scales.items()},
            }
            trait_entries.append(entry)
        manifest = {
            "dataset_name": self.dataset_name,
            "d": self.d,
            "d_u": self.d_u,
            "shift_policy": self.shift_policy,
            "traits": trait_entries,
            "prompts": [
                {"prompt_id": p.prompt_id, "prompt_vec_key": p.vec_key}
                for p in self.prompts.values()
            ],
            "labels_csv": "labels.csv",
            "embeddings_file": "embeddings.emb1",
        }
        if self.d_u > 0:
            manifest["features_csv"] = "features.csv"

        with open(out / "labels.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["essay_id", "prompt_id", *self.traits])
            for essay in self.essays.values():
                row = [essay.essay_id, essay.prompt_id]
                for trait_id in self.traits:
                    if trait_id in essay.labels:
                        scale = self.scale_for(trait_id, essay.prompt_id)
                        row.append(repr(essay.labels[trait_id] + scale.offset))
                    else:
                        row.append("")
                writer.writerow(row)

        if self.d_u > 0:
            with open(out / "features.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["essay_id", *[f"f{i}" for i in range(self.d_u)]])
                for essay_id in self.essays:
                    vec = self.features[essay_id]
                    writer.writerow([essay_id, *[repr(float(v)) for v in vec]])

        records: dict[str, np.ndarray] = {}
        for essay_id, vec in self.essay_vecs.items():
            records[f"essay:{essay_id}"] = vec.astype("<f4")
        for prompt in self.prompts.values():
            if prompt.vec_key is not None:
                records[prompt.vec_key] = self.prompt_vecs[prompt.prompt_id].astype("<f4")
        for trait in self.traits.values():
            if trait.rubric_key is not None:
                records[trait.rubric_key] = self.rubric_vecs[trait.trait_id].astype("<f4")
        write_embeddings(out / "embeddings.emb1", records)

        manifest_path = out / "manifest.json"
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return manifest_path


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def _parse_scales(entry: dict, prompt_ids: list[str], shift: bool) -> tuple[dict[str, ScoreScale], str | None]:
    """Resolve a trait entry's scale declaration into a per-prompt map.

    Accepts `scale` (one list for every prompt) and/or `scales`
    ({prompt_id: list}) overriding it.
    """
    trait_id = entry["trait_id"]
    default = entry.get("scale")
    per_prompt = entry.get("scales", {})
    unknown = set(per_prompt) - set(prompt_ids)
    if unknown:
        raise CorpusError(
            f"trait '{trait_id}' declares scales for unknown prompts {sorted(unknown)}"
        )
    out: dict[str, ScoreScale] = {}
    for prompt_id in prompt_ids:
        declared = per_prompt.get(prompt_id, default)
        if declared is None:
            continue
        values = [float(v) for v in declared]
        if shift:
            offset = values[0]
            out[prompt_id] = ScoreScale(tuple(v - offset for v in values), offset=offset)
        else:
            out[prompt_id] = ScoreScale(tuple(values), offset=0.0)
    return out, entry.get("rubric_vec_key")


def load_corpus(manifest_path: str | Path) -> Corpus:
    """Load and fully validate a corpus from a JSON manifest.

    Every label is checked against its declared scale, embedding presence and
    dimensions are enforced, and feature vectors must be present for all
    essays or none.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise CorpusError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CorpusError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc

    missing = {"dataset_name", "d", "d_u", "shift_policy", "traits", "prompts",
               "labels_csv", "embeddings_file"} - set(manifest)
    if missing:
        raise CorpusError(f"manifest missing required fields: {sorted(missing)}")
    unknown = set(manifest) - MANIFEST_KEYS
    if unknown:
        raise CorpusError(f"manifest has unknown fields: {sorted(unknown)}")

    shift_policy = manifest["shift_policy"]
    if shift_policy not in ("none", "shift_to_zero"):
        raise CorpusError(f"unknown shift_policy '{shift_policy}'")
    shift = shift_policy == "shift_to_zero"

    d = int(manifest["d"])
    d_u = int(manifest["d_u"])
    base = manifest_path.parent

    prompt_entries = manifest["prompts"]
    prompt_ids = [e["prompt_id"] for e in prompt_entries]
    if len(set(prompt_ids)) != len(prompt_ids):
        raise CorpusError("duplicate prompt_id in manifest")

    traits: dict[str, Trait] = {}
    for entry in manifest["traits"]:
        trait_id = entry["trait_id"]
        if trait_id in traits:
            raise CorpusError(f"duplicate trait_id '{trait_id}' in manifest")
        scales, rubric_key = _parse_scales(entry, prompt_ids, shift)
        traits[trait_id] = Trait(trait_id=trait_id, rubric_key=rubric_key, scales=scales)

    # Embeddings
    emb_path = base / manifest["embeddings_file"]
    if not emb_path.is_file():
        raise CorpusError(f"embeddings file not found: {emb_path}")
    records, file_d = read_embeddings(emb_path)
    if file_d != d:
        raise CorpusError(
            f"embedding dimension mismatch: manifest declares d={d}, file has {file_d}"
        )

    # Labels
    labels_path = base / manifest["labels_csv"]
    if not labels_path.is_file():
        raise CorpusError(f"labels csv not found: {labels_path}")
    essays: dict[str, Essay] = {}
    prompt_essays: dict[str, list[str]] = {p: [] for p in prompt_ids}
    with open(labels_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["essay_id", "prompt_id"]:
            raise CorpusError(f"{labels_path}: header must start with essay_id,prompt_id")
        trait_cols = header[2:]
        unknown_cols = set(trait_cols) - set(traits)
        if unknown_cols:
            raise CorpusError(f"{labels_path}: undeclared trait columns {sorted(unknown_cols)}")
        for row in reader:
            if not row:
                continue
            essay_id, prompt_id = row[0], row[1]
            if essay_id in essays:
                raise CorpusError(f"duplicate essay_id '{essay_id}'")
            if prompt_id not in prompt_essays:
                raise CorpusError(f"essay '{essay_id}' references unknown prompt '{prompt_id}'")
            labels: dict[str, float] = {}
            levels: dict[str, int] = {}
            for trait_id, cell in zip(trait_cols, row[2:]):
                if cell == "":
                    continue
                try:
                    raw = float(cell)
                except ValueError:
                    raise CorpusError(
                        f"essay '{essay_id}': label '{cell}' for trait '{trait_id}' is not a number"
                    ) from None
                scale = traits[trait_id].scales.get(prompt_id)
                if scale is None:
                    raise CorpusError(
                        f"essay '{essay_id}': trait '{trait_id}' has no declared scale "
                        f"for prompt '{prompt_id}'"
                    )
                stored = raw - scale.offset
                try:
                    level = level_of(stored, scale)
                except OffScaleError:
                    raise OffScaleError(
                        f"essay '{essay_id}': label {raw!r} for trait '{trait_id}' "
                        f"is not on scale"
                    ) from None
                labels[trait_id] = stored
                levels[trait_id] = level
            essays[essay_id] = Essay(essay_id=essay_id, prompt_id=prompt_id,
                                     labels=labels, levels=levels)
            prompt_essays[prompt_id].append(essay_id)

    prompts: dict[str, Prompt] = {}
    for entry in prompt_entries:
        pid = entry["prompt_id"]
        if not prompt_essays[pid]:
            raise CorpusError(f"prompt '{pid}' has no essays")
        prompts[pid] = Prompt(prompt_id=pid, vec_key=entry.get("prompt_vec_key"),
                              essay_ids=tuple(prompt_essays[pid]))

    # Resolve vectors (widened to float64; exact for float32 inputs)
    essay_vecs: dict[str, np.ndarray] = {}
    for essay_id in essays:
        key = f"essay:{essay_id}"
        if key not in records:
            raise CorpusError(f"missing embedding record '{key}'")
        essay_vecs[essay_id] = records[key].astype(np.float64)
    prompt_vecs: dict[str, np.ndarray] = {}
    for prompt in prompts.values():
        if prompt.vec_key is None:
            continue
        if prompt.vec_key not in records:
            raise CorpusError(f"missing embedding record '{prompt.vec_key}'")
        prompt_vecs[prompt.prompt_id] = records[prompt.vec_key].astype(np.float64)
    rubric_vecs: dict[str, np.ndarray] = {}
    for trait in traits.values():
        if trait.rubric_key is None:
            continue
        if trait.rubric_key not in records:
            raise CorpusError(f"missing embedding record '{trait.rubric_key}'")
        rubric_vecs[trait.trait_id] = records[trait.rubric_key].astype(np.float64)

    # Features: all essays or none
    features: dict[str, np.ndarray] = {}
    features_csv = manifest.get("features_csv")
    if features_csv is not None:
        if d_u <= 0:
            raise CorpusError("features_csv given but manifest d_u is 0")
        feat_path = base / features_csv
        if not feat_path.is_file():
            raise CorpusError(f"features csv not found: {feat_path}")
        with open(feat_path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            expected = ["essay_id", *[f"f{i}" for i in range(d_u)]]
            if header != expected:
                raise CorpusError(
                    f"{feat_path}: header mismatch, expected {','.join(expected)}"
                )
            for row in reader:
                if not row:
                    continue
                essay_id = row[0]
                if essay_id not in essays:
                    raise CorpusError(f"features for unknown essay '{essay_id}'")
                if essay_id in features:
                    raise CorpusError(f"duplicate feature row for essay '{essay_id}'")
                features[essay_id] = np.array([float(v) for v in row[1:]], dtype=np.float64)
        missing_feats = [e for e in essays if e not in features]
        if missing_feats:
            raise CorpusError(f"essay '{missing_feats[0]}' has no feature vector")
    elif d_u != 0:
        raise CorpusError("manifest d_u > 0 but no features_csv given")

    return Corpus(
        dataset_name=manifest["dataset_name"],
        d=d,
        d_u=d_u,
        shift_policy=shift_policy,
        traits=traits,
        prompts=prompts,
        essays=essays,
        essay_vecs=essay_vecs,
        prompt_vecs=prompt_vecs,
        rubric_vecs=rubric_vecs,
        features=features,
    )


# ---------------------------------------------------------------------------
# Feature normalization
# ---------------------------------------------------------------------------

def normalize_features(corpus: Corpus, train_essay_ids: Iterable[str]) -> FeatureNormalizer:
    """Fit per-dimension mean/std over the training essays only.

    The normalizer is independent of iteration order of the given ids: rows
    are gathered in corpus load order.
    """
    wanted = set(train_essay_ids)
    rows = []
    for essay_id in corpus.essays:
        if essay_id not in wanted:
            continue
        if essay_id not in corpus.features:
            raise CorpusError(f"essay '{essay_id}' has no feature vector")
        rows.append(corpus.features[essay_id])
    if len(rows) != len(wanted):
        unknown = sorted(wanted - set(corpus.essays))
        raise CorpusError(f"normalize_features given unknown essay ids {unknown[:3]}")
    mat = np.stack(rows)
    mean = mat.mean(axis=0)
    std = mat.std(axis=0)
    scale = np.where(std < 1e-12, 1.0, std)
    return FeatureNormalizer(mean=mean, scale=scale)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """One fold: held-out test prompts plus the dev source.

    `mode` is either "prompts" (whole dev prompts held out from training) or
    "fraction" (each training prompt partitioned train/dev by `dev_fraction`).
    """

    test_prompts: tuple[str, ...]
    mode: str = "fraction"
    dev_prompts: tuple[str, ...] = ()
    dev_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("fraction", "prompts"):
            raise CorpusError(f"unknown split mode '{self.mode}'")
        if self.mode == "fraction" and not 0.0 < self.dev_fraction < 1.0:
            raise CorpusError(f"dev_fraction must be in (0, 1), got {self.dev_fraction}")
        overlap = set(self.test_prompts) & set(self.dev_prompts)
        if overlap:
            raise CorpusError(f"test prompts overlap dev prompts: {sorted(overlap)}")


@dataclass(frozen=True)
class Split:
    """Resolved fold: which essays may train, which are dev queries, which
    prompts are the unseen test set."""

    test_prompts: tuple[str, ...]
    train_essays: dict[str, tuple[str, ...]]  # prompt -> essay ids
    dev_queries: dict[str, tuple[str, ...]]  # prompt -> essay ids

    @property
    def train_prompts(self) -> tuple[str, ...]:
        return tuple(self.train_essays)

    def all_train_essay_ids(self) -> list[str]:
        out: list[str] = []
        for ids in self.train_essays.values():
            out.extend(ids)
        return out


def resolve_split(corpus: Corpus, spec: SplitSpec) -> Split:
    """Materialize a SplitSpec against a corpus.

    Fraction mode shuffles each training prompt's essays with a generator
    seeded by `spec.seed`, visiting prompts in corpus order, so the partition
    is reproducible and unaffected by anything outside the spec.
    """
    unknown = [p for p in (*spec.test_prompts, *spec.dev_prompts) if p not in corpus.prompts]
    if unknown:
        raise CorpusError(f"split references unknown prompts {unknown}")
    test = set(spec.test_prompts)
    if spec.mode == "prompts":
        dev = set(spec.dev_prompts)
        train_essays = {
            p: corpus.prompts[p].essay_ids
            for p in corpus.prompts
            if p not in test and p not in dev
        }
        dev_queries = {p: corpus.prompts[p].essay_ids for p in corpus.prompts if p in dev}
    else:
        rng = np.random.default_rng(spec.seed)
        train_essays = {}
        dev_queries = {}
        for p in corpus.prompts:
            if p in test:
                continue
            ids = list(corpus.prompts[p].essay_ids)
            order = rng.permutation(len(ids))
            n_dev = min(len(ids) - 1, max(1, int(round(spec.dev_fraction * len(ids)))))
            dev_idx = sorted(order[:n_dev])
            train_idx = sorted(order[n_dev:])
            dev_queries[p] = tuple(ids[i] for i in dev_idx)
            train_essays[p] = tuple(ids[i] for i in train_idx)
    if not train_essays:
        raise CorpusError("split leaves no training prompts")
    return Split(test_prompts=tuple(spec.test_prompts), train_essays=train_essays,
                 dev_queries=dev_queries)


def load_fold_specs(path: str | Path) -> list[SplitSpec]:
    """Parse a fold-spec JSON file into one SplitSpec per fold.

    Schema: {"mode": "fraction"|"prompts", "dev_fraction"?: float,
    "split_seed"?: int, "folds": [{"test_prompts": [...],
    "dev_prompts"?: [...]}]}. The file must state which dev mode applies.
    """
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"fold spec not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorpusError(f"fold spec {path} is not valid JSON: {exc}") from exc
    unknown = set(raw) - {"mode", "dev_fraction", "split_seed", "folds"}
    if unknown:
        raise CorpusError(f"fold spec has unknown fields: {sorted(unknown)}")
    mode = raw.get("mode")
    if mode not in ("fraction", "prompts"):
        raise CorpusError("fold spec must state mode: 'fraction' or 'prompts'")
    folds = raw.get("folds")
    if not folds:
        raise CorpusError("fold spec has no folds")
    specs = []
    seen_tests: set[str] = set()
    for i, fold in enumerate(folds):
        unknown = set(fold) - {"test_prompts", "dev_prompts"}
        if unknown:
            raise CorpusError(f"fold {i} has unknown fields: {sorted(unknown)}")
        test_prompts = tuple(fold["test_prompts"])
        dup = seen_tests & set(test_prompts)
        if dup:
            raise CorpusError(f"fold {i}: test prompts {sorted(dup)} repeat an earlier fold")
        seen_tests.update(test_prompts)
        specs.append(
            SplitSpec(
                test_prompts=test_prompts,
                mode=mode,
                dev_prompts=tuple(fold.get("dev_prompts", ())),
                dev_fraction=float(raw.get("dev_fraction", 0.2)),
                seed=int(raw.get("split_seed", 0)),
            )
        )
    return specs
