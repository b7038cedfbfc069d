"""Meta-testing on unseen prompts, the quadratic weighted kappa metric,
leave-one-prompt-out orchestration, and report emission.

Kappa is computed on level indices; reports convert predictions back to
original score values, so shifted heterogeneous ranges are handled without
special cases downstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import Corpus, CorpusError, FeatureNormalizer, SplitSpec, normalize_features, resolve_split
from .episodes import EpisodeUnavailable, MetaTestTask, Regime, build_meta_test
from .fusion import HeadConfig, HeadParams, forward
from .proto import compute_prototypes, predict_batch


# ---------------------------------------------------------------------------
# Quadratic weighted kappa
# ---------------------------------------------------------------------------

def qwk(gold: Sequence[int], pred: Sequence[int], n_levels: int) -> float:
    """Cohen's kappa with quadratic weights w_ij = (i-j)^2 / (N-1)^2.

    The expected matrix is the outer product of the two marginal histograms
    normalized to the sample count, so observed and expected share a scale.
    When expected disagreement is zero (both marginals on a single level) the
    result is 1 for perfect agreement and 0 otherwise.

    Sums are accumulated over index pairs {i, j} so that swapping gold and
    pred yields the exact same float.
    """
    g = np.asarray(gold, dtype=np.intp)
    p = np.asarray(pred, dtype=np.intp)
    if g.ndim != 1 or p.ndim != 1 or g.shape != p.shape or g.shape[0] < 1:
        raise ValueError("gold and pred must be equal-length non-empty sequences")
    if n_levels < 1:
        raise ValueError("n_levels must be >= 1")
    for name, arr in (("gold", g), ("pred", p)):
        if arr.min() < 0 or arr.max() >= n_levels:
            raise ValueError(f"{name} levels must lie in [0, {n_levels - 1}]")

    n = g.shape[0]
    observed = np.zeros((n_levels, n_levels))
    np.add.at(observed, (g, p), 1.0)
    hist_g = observed.sum(axis=1)
    hist_p = observed.sum(axis=0)

    if n_levels == 1:
        return 1.0
    denom_w = float((n_levels - 1) ** 2)
    num = 0.0
    den = 0.0
    for i in range(n_levels):
        for j in range(i + 1, n_levels):
            w = (i - j) ** 2 / denom_w
            num += w * (observed[i, j] + observed[j, i])
            den += w * (hist_g[i] * hist_p[j] + hist_g[j] * hist_p[i])
    den /= n
    if den == 0.0:
        return 1.0 if num == 0.0 else 0.0
    return 1.0 - num / den


# ---------------------------------------------------------------------------
# Encoding and task scoring
# ---------------------------------------------------------------------------

def gather_inputs(
    corpus: Corpus,
    trait_id: str,
    essay_ids: Sequence[str],
    use_context: bool,
    use_features: bool,
    normalizer: FeatureNormalizer | None,
) -> dict[str, np.ndarray | None]:
    """Stack head inputs for the given essays (rows in the given order)."""
    essay = np.stack([corpus.essay_vecs[e] for e in essay_ids])
    prompt = rubric = features = None
    if use_context:
        rub = corpus.rubric_vecs.get(trait_id)
        if rub is None:
            raise CorpusError(f"trait '{trait_id}' has no rubric embedding but context is on")
        rows = []
        for e in essay_ids:
            pid = corpus.essays[e].prompt_id
            vec = corpus.prompt_vecs.get(pid)
            if vec is None:
                raise CorpusError(f"prompt '{pid}' has no embedding but context is on")
            rows.append(vec)
        prompt = np.stack(rows)
        rubric = np.tile(rub, (len(essay_ids), 1))
    if use_features:
        if normalizer is None:
            raise ValueError("use_features requires a fitted normalizer")
        features = np.stack([normalizer.apply(corpus.features[e]) for e in essay_ids])
    return {"essay": essay, "prompt": prompt, "rubric": rubric, "features": features}


def encode_eval(
    corpus: Corpus,
    trait_id: str,
    essay_ids: Sequence[str],
    params: HeadParams,
    config: HeadConfig,
    normalizer: FeatureNormalizer | None,
) -> np.ndarray:
    """Eval-mode representations for a list of essays (dropout off)."""
    inputs = gather_inputs(corpus, trait_id, essay_ids, config.use_context,
                           config.d_u > 0, normalizer)
    out, _ = forward(params, config, inputs["essay"], inputs["prompt"],
                     inputs["rubric"], inputs["features"], mode="eval")
    return out


@dataclass(frozen=True)
class TaskScore:
    trait_id: str
    prompt_id: str
    essay_ids: tuple[str, ...]
    predicted_scores: tuple[float, ...]  # original score units
    predicted_levels: tuple[int, ...]
    gold_levels: tuple[int, ...]
    qwk: float
    class_levels: tuple[int, ...]
    support_prompts: tuple[str, ...]
    support_essay_ids: tuple[str, ...]


def score_task(
    corpus: Corpus,
    task: MetaTestTask,
    params: HeadParams,
    config: HeadConfig,
    normalizer: FeatureNormalizer | None = None,
    query_essay_ids: Sequence[str] | None = None,
) -> TaskScore:
    """Score one meta-test task with a trained head.

    Support pools and queries are encoded in eval mode, prototypes are the
    per-level support means, and each query takes the nearest prototype's
    level, reported in original score units. `query_essay_ids` restricts the
    query side (used for dev-subset evaluation); default is the full task
    query set.
    """
    if config.d != corpus.d:
        raise ValueError(f"checkpoint d={config.d} does not match corpus d={corpus.d}")
    if config.d_u > 0 and config.d_u != corpus.d_u:
        raise ValueError(f"checkpoint d_u={config.d_u} does not match corpus d_u={corpus.d_u}")
    if not task.class_levels:
        raise EpisodeUnavailable("task has no prototypes")
    queries = tuple(query_essay_ids) if query_essay_ids is not None else task.query
    if not queries:
        raise EpisodeUnavailable("task has no query essays")

    support_ids = [e for pool in task.support for e in pool]
    all_ids = support_ids + list(queries)
    reps = encode_eval(corpus, task.trait_id, all_ids, params, config, normalizer)
    pools = []
    pos = 0
    for pool in task.support:
        pools.append(reps[pos : pos + len(pool)])
        pos += len(pool)
    query_reps = reps[pos:]

    protos = compute_prototypes(pools)
    pred_class = predict_batch(query_reps, protos)
    pred_levels = tuple(int(task.class_levels[c]) for c in pred_class)
    gold_levels = tuple(int(corpus.essays[e].levels[task.trait_id]) for e in queries)
    pred_scores = tuple(task.scale.reported_value(l) for l in pred_levels)
    kappa = qwk(gold_levels, pred_levels, task.scale.n_levels)
    support_prompts = tuple(
        sorted({corpus.essays[e].prompt_id for e in support_ids})
    )
    return TaskScore(
        trait_id=task.trait_id,
        prompt_id=task.test_prompt_id,
        essay_ids=tuple(queries),
        predicted_scores=pred_scores,
        predicted_levels=pred_levels,
        gold_levels=gold_levels,
        qwk=kappa,
        class_levels=task.class_levels,
        support_prompts=support_prompts,
        support_essay_ids=tuple(support_ids),
    )


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """QWK per (prompt, trait) cell; unannotated pairs are absent, not zero."""

    prompt_order: list[str] = field(default_factory=list)
    trait_order: list[str] = field(default_factory=list)
    cells: dict[tuple[str, str], float] = field(default_factory=dict)

    def add(self, prompt_id: str, trait_id: str, value: float) -> None:
        if prompt_id not in self.prompt_order:
            self.prompt_order.append(prompt_id)
        if trait_id not in self.trait_order:
            self.trait_order.append(trait_id)
        self.cells[(prompt_id, trait_id)] = value

    def _mean(self, values: list[float]) -> float | None:
        return float(np.mean(values)) if values else None

    def trait_average(self, trait_id: str) -> float | None:
        return self._mean([v for (p, t), v in self.cells.items() if t == trait_id])

    def prompt_average(self, prompt_id: str, exclude_trait: str | None = None) -> float | None:
        return self._mean(
            [v for (p, t), v in self.cells.items() if p == prompt_id and t != exclude_trait]
        )

    def grand_average(self, exclude_trait: str | None = None) -> float | None:
        return self._mean([v for (p, t), v in self.cells.items() if t != exclude_trait])

    def to_csv_text(self) -> str:
        lines = ["prompt," + ",".join(self.trait_order) + ",avg"]
        for p in self.prompt_order:
            row = [p]
            for t in self.trait_order:
                v = self.cells.get((p, t))
                row.append("" if v is None else f"{v:.6f}")
            avg = self.prompt_average(p)
            row.append("" if avg is None else f"{avg:.6f}")
            lines.append(",".join(row))
        tail = ["avg"]
        for t in self.trait_order:
            v = self.trait_average(t)
            tail.append("" if v is None else f"{v:.6f}")
        g = self.grand_average()
        tail.append("" if g is None else f"{g:.6f}")
        lines.append(",".join(tail))
        return "\n".join(lines) + "\n"

    def to_pretty_text(self, holistic_trait: str | None = None) -> str:
        headers = ["prompt", *self.trait_order]
        if holistic_trait is not None and holistic_trait in self.trait_order:
            headers.append("avg-h")
        headers.append("avg")

        def fmt(v: float | None) -> str:
            return "-" if v is None else f"{v:.3f}"

        rows = []
        for p in self.prompt_order:
            row = [p, *[fmt(self.cells.get((p, t))) for t in self.trait_order]]
            if holistic_trait is not None and holistic_trait in self.trait_order:
                row.append(fmt(self.prompt_average(p, exclude_trait=holistic_trait)))
            row.append(fmt(self.prompt_average(p)))
            rows.append(row)
        tail = ["avg", *[fmt(self.trait_average(t)) for t in self.trait_order]]
        if holistic_trait is not None and holistic_trait in self.trait_order:
            tail.append(fmt(self.grand_average(exclude_trait=holistic_trait)))
        tail.append(fmt(self.grand_average()))
        rows.append(tail)

        widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
        out = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
        out.append("  ".join("-" * w for w in widths))
        for r in rows:
            out.append("  ".join(r[i].ljust(widths[i]) for i in range(len(headers))))
        return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

@dataclass
class FoldOutcome:
    fold_index: int
    spec: SplitSpec
    params: HeadParams
    head_config: HeadConfig
    train_result: "object | None"  # trainer.TrainResult when trained here
    tasks: list[TaskScore]
    audit: dict


@dataclass
class CvResult:
    report: EvalReport
    folds: list[FoldOutcome]

    def audit_rows(self) -> list[dict]:
        return [f.audit for f in self.folds]


def run_fold(
    corpus: Corpus,
    spec: SplitSpec,
    fold_index: int,
    regime: Regime,
    train_config,
    checkpoint: tuple[HeadParams, HeadConfig] | None = None,
) -> FoldOutcome:
    """Train (or adopt a provided checkpoint) and meta-test one fold."""
    from . import trainer as trainer_mod

    split = resolve_split(corpus, spec)
    train_ids = split.all_train_essay_ids()
    train_result = None
    if checkpoint is None:
        train_result = trainer_mod.train(corpus, split, regime, train_config)
        params = train_result.best.params
        head_config = train_result.head_config
        normalizer = train_result.normalizer
    else:
        params, head_config = checkpoint
        normalizer = (
            normalize_features(corpus, train_ids) if head_config.d_u > 0 else None
        )

    tasks: list[TaskScore] = []
    for test_prompt in spec.test_prompts:
        for trait_id in corpus.traits:
            try:
                task = build_meta_test(corpus, trait_id, test_prompt, train_ids)
            except (EpisodeUnavailable, CorpusError):
                continue
            tasks.append(score_task(corpus, task, params, head_config, normalizer))
    if not tasks:
        raise EpisodeUnavailable(
            f"fold {fold_index}: no trainable trait on test prompts {spec.test_prompts}"
        )

    episode_ids = sorted(train_result.episode_essay_ids) if train_result else []
    audit = {
        "fold": fold_index,
        "test_prompts": list(spec.test_prompts),
        "train_prompts": list(split.train_prompts),
        "dev_prompts": sorted(split.dev_queries),
        "train_essay_ids": sorted(train_ids),
        "episode_essay_ids": episode_ids,
        "tasks": [
            {
                "trait": t.trait_id,
                "query_prompt": t.prompt_id,
                "support_prompts": list(t.support_prompts),
                "support_essay_ids": list(t.support_essay_ids),
                "n_query": len(t.essay_ids),
                "qwk": t.qwk,
            }
            for t in tasks
        ],
    }
    return FoldOutcome(
        fold_index=fold_index,
        spec=spec,
        params=params,
        head_config=head_config,
        train_result=train_result,
        tasks=tasks,
        audit=audit,
    )


def run_cv(
    corpus: Corpus,
    fold_specs: list[SplitSpec],
    regime: Regime,
    train_config,
    checkpoint_loader: Callable[[int], tuple[HeadParams, HeadConfig]] | None = None,
    jobs: int = 1,
) -> CvResult:
    """Leave-one-prompt-out style evaluation over all folds.

    Each fold trains on its own split (or loads a checkpoint via
    `checkpoint_loader`) and meta-tests every trait annotated on its test
    prompts. Report averages use present cells only.
    """
    def one(i: int) -> FoldOutcome:
        ckpt = checkpoint_loader(i) if checkpoint_loader is not None else None
        return run_fold(corpus, fold_specs[i], i, regime, train_config, ckpt)

    if jobs > 1 and len(fold_specs) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(one, range(len(fold_specs))))
    else:
        outcomes = [one(i) for i in range(len(fold_specs))]

    report = EvalReport(trait_order=list(corpus.traits))
    for outcome in outcomes:
        for task in outcome.tasks:
            report.add(task.prompt_id, task.trait_id, task.qwk)
    return CvResult(report=report, folds=outcomes)


def write_report(result: CvResult, out_dir: str | Path, holistic_trait: str | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(result.report.to_csv_text())
    (out / "report.txt").write_text(result.report.to_pretty_text(holistic_trait))
    with open(out / "audit.jsonl", "w") as fh:
        for row in result.audit_rows():
            fh.write(json.dumps(row, sort_keys=True) + "\n")
