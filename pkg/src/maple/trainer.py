"""Meta-training loop: sample a batch of episodes, push every shot through the
fusion head in train mode, average the episodic losses, backprop, and take one
Adam step. Dev prompts are meta-tested periodically and the checkpoint with the
best dev QWK average is kept.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, FeatureNormalizer, Split, normalize_features
from .episodes import Episode, EpisodeSampler, EpisodeUnavailable, Regime, build_meta_test
from .evaluation import gather_inputs, score_task
from .fusion import HeadConfig, HeadParams, _PARAM_FIELDS, backward, forward, init_params
from .proto import episode_loss


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, message: str) -> None:
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    k: int = 5
    m: int = 5
    max_classes: int = 5
    total_tasks: int = 30000
    batch_size: int = 12
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dev_every: int = 1000
    seed: int = 0
    dropout_rate: float = 0.5
    grad_clip: float | None = None
    use_context: bool = True
    use_features: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_tasks < 1:
            raise ValueError("total_tasks must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")

    def to_json_dict(self) -> dict:
        out = {f: getattr(self, f) for f in self.__dataclass_fields__}
        return out


@dataclass
class AdamState:
    m: HeadParams
    v: HeadParams
    t: int = 0

    @staticmethod
    def zeros(config: HeadConfig) -> "AdamState":
        return AdamState(m=HeadParams.zeros(config), v=HeadParams.zeros(config))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.t).encode())
        for p in (self.m, self.v):
            for arr in p.arrays():
                h.update(arr.tobytes())
        return h.hexdigest()


def adam_step(
    params: HeadParams,
    grads: HeadParams,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[HeadParams, AdamState]:
    """One Adam update, in place: biased moment updates, bias correction, then
    theta -= lr * m_hat / (sqrt(v_hat) + eps)."""
    for f in _PARAM_FIELDS:
        if not np.all(np.isfinite(getattr(grads, f))):
            raise ValueError(f"non-finite gradient in {f}")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for f in _PARAM_FIELDS:
        g = getattr(grads, f)
        m = getattr(state.m, f)
        v = getattr(state.v, f)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        getattr(params, f)[...] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def params_digest(params: HeadParams) -> str:
    h = hashlib.sha256()
    for arr in params.arrays():
        h.update(arr.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Per-episode forward/backward
# ---------------------------------------------------------------------------

@dataclass
class ShotBatch:
    """All shots of one episode, support rows first (class-major), then query
    rows (class-major)."""

    inputs: dict[str, np.ndarray | None]
    support_counts: list[int]
    query_labels: np.ndarray


def make_shot_batch(
    corpus: Corpus,
    episode: Episode,
    config: HeadConfig,
    normalizer: FeatureNormalizer | None,
) -> ShotBatch:
    ids: list[str] = []
    support_counts = []
    for pool in episode.support:
        ids.extend(pool)
        support_counts.append(len(pool))
    labels = []
    for class_idx, pool in enumerate(episode.query):
        ids.extend(pool)
        labels.extend([class_idx] * len(pool))
    inputs = gather_inputs(corpus, episode.trait_id, ids, config.use_context,
                           config.d_u > 0, normalizer)
    return ShotBatch(inputs=inputs, support_counts=support_counts,
                     query_labels=np.asarray(labels, dtype=np.intp))


def episode_grads(
    params: HeadParams,
    config: HeadConfig,
    batch: ShotBatch,
    rng: np.random.Generator | None,
    mode: str = "train",
) -> tuple[float, HeadParams]:
    """Loss and parameter gradients for one episode."""
    reps, trace = forward(
        params,
        config,
        batch.inputs["essay"],
        batch.inputs["prompt"],
        batch.inputs["rubric"],
        batch.inputs["features"],
        mode=mode,
        rng=rng,
    )
    n_support = sum(batch.support_counts)
    support_reps = []
    pos = 0
    for count in batch.support_counts:
        support_reps.append(reps[pos : pos + count])
        pos += count
    query_reps = reps[n_support:]
    result = episode_loss(query_reps, batch.query_labels, support_reps)
    upstream = np.vstack([*result.support_grads, result.query_grads])
    param_grads, _ = backward(trace, params, upstream)
    return result.loss, param_grads


def _accumulate(total: HeadParams | None, grads: HeadParams) -> HeadParams:
    if total is None:
        return grads
    for f in _PARAM_FIELDS:
        getattr(total, f)[...] += getattr(grads, f)
    return total


def _scale(grads: HeadParams, factor: float) -> None:
    for f in _PARAM_FIELDS:
        getattr(grads, f)[...] *= factor


def global_norm(grads: HeadParams) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(getattr(grads, f)))) for f in _PARAM_FIELDS)))


# ---------------------------------------------------------------------------
# Dev evaluation
# ---------------------------------------------------------------------------

def evaluate_dev(
    corpus: Corpus,
    split: Split,
    params: HeadParams,
    config: HeadConfig,
    normalizer: FeatureNormalizer | None,
) -> float | None:
    """Average meta-test QWK over (dev prompt, trait) cells; support comes from
    training essays of other prompts, mirroring the test-time protocol. Returns
    None when the split has no dev queries. Parameters are only read."""
    train_ids = split.all_train_essay_ids()
    values = []
    for prompt_id, query_ids in split.dev_queries.items():
        annotated = [
            t
            for t in corpus.traits
            if any(t in corpus.essays[e].levels for e in query_ids)
        ]
        for trait_id in annotated:
            try:
                task = build_meta_test(corpus, trait_id, prompt_id, train_ids)
            except EpisodeUnavailable:
                continue
            queries = tuple(e for e in query_ids if trait_id in corpus.essays[e].levels)
            score = score_task(corpus, task, params, config, normalizer,
                               query_essay_ids=queries)
            values.append(score.qwk)
    if not values:
        return None
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: HeadParams
    dev_qwk: float | None
    tasks_seen: int
    config_hash: str


@dataclass
class LogRow:
    step: int
    tasks_seen: int
    batch_loss: float
    dev_qwk: float | None


@dataclass
class TrainResult:
    best: Checkpoint
    final_params: HeadParams
    head_config: HeadConfig
    log: list[LogRow] = field(default_factory=list)
    episode_essay_ids: set[str] = field(default_factory=set)
    normalizer: FeatureNormalizer | None = None


def config_hash(config: TrainConfig, regime: Regime, head: HeadConfig) -> str:
    blob = json.dumps(
        {
            "train": config.to_json_dict(),
            "regime": {"classification": regime.classification, "support": regime.support},
            "head": {"d": head.d, "d_u": head.d_u, "use_context": head.use_context,
                     "dropout_rate": head.dropout_rate},
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def train(corpus: Corpus, split: Split, regime: Regime, config: TrainConfig) -> TrainResult:
    """Run the full meta-training loop on one split.

    total_tasks episodes are consumed in batches of batch_size (the final
    batch may be short when they do not divide evenly); one Adam step per
    batch on the mean of the episode losses. Every dev_every tasks, and once
    more at the end, dev prompts are meta-tested and the best-average
    checkpoint is retained (first maximum wins ties).
    """
    if len(split.train_prompts) < 2:
        raise EpisodeUnavailable("need at least 2 training prompts for cross-prompt episodes")
    head = HeadConfig(
        d=corpus.d,
        d_u=corpus.d_u if config.use_features else 0,
        use_context=config.use_context,
        dropout_rate=config.dropout_rate,
    )
    init_ss, episode_ss, dropout_ss = np.random.SeedSequence(config.seed).spawn(3)
    params = init_params(head, np.random.default_rng(init_ss))
    sampler = EpisodeSampler(
        corpus,
        split,
        regime,
        k=config.k,
        m=config.m,
        max_classes=config.max_classes,
        rng=np.random.default_rng(episode_ss),
    )
    dropout_rng = np.random.default_rng(dropout_ss)
    normalizer = (
        normalize_features(corpus, split.all_train_essay_ids())
        if config.use_features
        else None
    )
    state = AdamState.zeros(head)
    chash = config_hash(config, regime, head)

    log: list[LogRow] = []
    touched: set[str] = set()
    best: Checkpoint | None = None
    tasks_seen = 0
    step = 0
    next_dev = config.dev_every if config.dev_every > 0 else None

    def run_dev() -> float | None:
        return evaluate_dev(corpus, split, params, head, normalizer)

    while tasks_seen < config.total_tasks:
        batch_n = min(config.batch_size, config.total_tasks - tasks_seen)
        step += 1
        losses = []
        grad_total: HeadParams | None = None
        for _ in range(batch_n):
            episode = sampler.sample()
            touched.update(episode.all_essay_ids())
            shots = make_shot_batch(corpus, episode, head, normalizer)
            try:
                loss, grads = episode_grads(params, head, shots, dropout_rng)
            except ValueError as exc:
                if "non-finite" in str(exc):
                    raise TrainingDiverged(step, f"{exc} at step {step}") from exc
                raise
            losses.append(loss)
            grad_total = _accumulate(grad_total, grads)
        assert grad_total is not None
        _scale(grad_total, 1.0 / batch_n)
        batch_loss = float(np.mean(losses))
        if not np.isfinite(batch_loss):
            raise TrainingDiverged(step, f"non-finite batch loss at step {step}")
        if config.grad_clip is not None:
            norm = global_norm(grad_total)
            if norm > config.grad_clip:
                _scale(grad_total, config.grad_clip / norm)
        adam_step(params, grad_total, state, config.learning_rate,
                  config.beta1, config.beta2, config.eps)
        tasks_seen += batch_n

        dev_value: float | None = None
        if next_dev is not None and tasks_seen >= next_dev:
            dev_value = run_dev()
            while next_dev <= tasks_seen:
                next_dev += config.dev_every
        if tasks_seen >= config.total_tasks and dev_value is None:
            dev_value = run_dev()
        if dev_value is not None and (best is None or dev_value > best.dev_qwk):
            best = Checkpoint(params.copy(), dev_value, tasks_seen, chash)
        log.append(LogRow(step, tasks_seen, batch_loss, dev_value))

    if best is None:
        best = Checkpoint(params.copy(), None, tasks_seen, chash)
    return TrainResult(
        best=best,
        final_params=params,
        head_config=head,
        log=log,
        episode_essay_ids=touched,
        normalizer=normalizer,
    )


def write_log_csv(path: str | Path, log: list[LogRow]) -> None:
    with open(path, "w") as fh:
        fh.write("step,tasks_seen,batch_loss,dev_qwk_avg\n")
        for row in log:
            dev = "" if row.dev_qwk is None else repr(row.dev_qwk)
            fh.write(f"{row.step},{row.tasks_seen},{row.batch_loss!r},{dev}\n")
