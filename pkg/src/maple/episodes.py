"""Meta-task generation.

Meta-training episodes come in four regimes: {binary, multiclass} x
{one_prompt, multi_prompt}. Every episode is cross-prompt: the query prompt is
drawn first, support shots then come only from other prompts (a single one
under one_prompt, the pooled rest under multi_prompt). A level is usable only
if its pools can supply k support and m query shots on their respective sides.

Meta-testing is N-way classification over a held-out prompt, with the entire
training pool of each level acting as that level's support set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .corpus import Corpus, ScoreScale, Split


class EpisodeUnavailable(RuntimeError):
    """No task can be formed under the requested regime and shot counts."""


@dataclass(frozen=True)
class Regime:
    classification: str  # "binary" | "multiclass"
    support: str  # "one_prompt" | "multi_prompt"

    def __post_init__(self) -> None:
        if self.classification not in ("binary", "multiclass"):
            raise ValueError(f"unknown classification '{self.classification}'")
        if self.support not in ("one_prompt", "multi_prompt"):
            raise ValueError(f"unknown support mode '{self.support}'")

    @property
    def one_prompt(self) -> bool:
        return self.support == "one_prompt"

    def tag(self) -> str:
        kind = "binary" if self.classification == "binary" else "multiclass"
        return f"{kind}-{'1P' if self.one_prompt else 'mP'}"


@dataclass(frozen=True)
class ClassSpec:
    """Levels a class pools together: one level normally, the complement set
    for a binary episode's negative class."""

    levels: tuple[int, ...]


@dataclass(frozen=True)
class Episode:
    regime: Regime
    trait_id: str
    query_prompt_id: str
    classes: tuple[ClassSpec, ...]
    support: tuple[tuple[str, ...], ...]  # per class, k essay ids
    query: tuple[tuple[str, ...], ...]  # per class, m essay ids

    @property
    def class_count(self) -> int:
        return len(self.classes)

    def all_essay_ids(self) -> list[str]:
        out: list[str] = []
        for ids in self.support:
            out.extend(ids)
        for ids in self.query:
            out.extend(ids)
        return out

    def to_json_dict(self) -> dict:
        return {
            "regime": self.regime.tag(),
            "trait": self.trait_id,
            "query_prompt": self.query_prompt_id,
            "classes": [list(c.levels) for c in self.classes],
            "support": [list(ids) for ids in self.support],
            "query": [list(ids) for ids in self.query],
        }


@dataclass(frozen=True)
class MetaTestTask:
    trait_id: str
    test_prompt_id: str
    scale: ScoreScale
    class_levels: tuple[int, ...]  # levels that have support
    support: tuple[tuple[str, ...], ...]  # per class level, full training pool
    query: tuple[str, ...]


class EpisodeSampler:
    """Draws meta-training episodes from the training side of a split.

    Holds a private random stream; one sampler must not be shared across
    threads, but several samplers with distinct streams may run against the
    same corpus.
    """

    def __init__(
        self,
        corpus: Corpus,
        split: Split,
        regime: Regime,
        k: int = 5,
        m: int = 5,
        max_classes: int = 5,
        rng: np.random.Generator | None = None,
    ) -> None:
        if k < 1 or m < 1:
            raise ValueError("k and m must be >= 1")
        if max_classes < 2:
            raise ValueError("max_classes must be >= 2")
        self.corpus = corpus
        self.split = split
        self.regime = regime
        self.k = k
        self.m = m
        self.max_classes = max_classes
        self.rng = rng if rng is not None else np.random.default_rng()
        self._samplable_cache: list[str] | None = None

        # pools[trait][prompt][level] -> training essay ids, corpus order
        self._pools: dict[str, dict[str, list[list[str]]]] = {}
        train_sets = {p: set(ids) for p, ids in split.train_essays.items()}
        for trait_id in corpus.traits:
            per_prompt: dict[str, list[list[str]]] = {}
            for prompt_id in split.train_prompts:
                scale = corpus.traits[trait_id].scales.get(prompt_id)
                if scale is None:
                    continue
                levels: list[list[str]] = [[] for _ in range(scale.n_levels)]
                any_essay = False
                for essay_id in corpus.prompts[prompt_id].essay_ids:
                    if essay_id not in train_sets[prompt_id]:
                        continue
                    level = corpus.essays[essay_id].levels.get(trait_id)
                    if level is None:
                        continue
                    levels[level].append(essay_id)
                    any_essay = True
                if any_essay:
                    per_prompt[prompt_id] = levels
            if per_prompt:
                self._pools[trait_id] = per_prompt

    # -- pool accessors ----------------------------------------------------

    def _level_pool(self, trait_id: str, prompt_id: str, level: int) -> list[str]:
        levels = self._pools.get(trait_id, {}).get(prompt_id)
        if levels is None or level >= len(levels):
            return []
        return levels[level]

    def _other_prompts(self, trait_id: str, query_prompt: str) -> list[str]:
        return [p for p in self._pools.get(trait_id, {}) if p != query_prompt]

    def _union_pool(self, trait_id: str, prompts: list[str], level: int) -> list[str]:
        out: list[str] = []
        for p in prompts:
            out.extend(self._level_pool(trait_id, p, level))
        return out

    def _complement_pool(self, trait_id: str, prompts: list[str], level: int) -> list[str]:
        """All essays of the given prompts at any level other than `level`."""
        out: list[str] = []
        for p in prompts:
            levels = self._pools[trait_id][p]
            for l, ids in enumerate(levels):
                if l != level:
                    out.extend(ids)
        return out

    # -- eligibility -------------------------------------------------------

    def eligible_levels(self, trait_id: str, query_prompt: str) -> list[int]:
        """Levels whose query-prompt pool can supply m shots and whose support
        source can supply k. Under one_prompt a single non-query prompt must
        supply all k on its own."""
        scale = self.corpus.traits[trait_id].scales.get(query_prompt)
        if scale is None:
            return []
        others = self._other_prompts(trait_id, query_prompt)
        out = []
        for level in range(scale.n_levels):
            if len(self._level_pool(trait_id, query_prompt, level)) < self.m:
                continue
            if self.regime.one_prompt:
                if any(len(self._level_pool(trait_id, p, level)) >= self.k for p in others):
                    out.append(level)
            else:
                if len(self._union_pool(trait_id, others, level)) >= self.k:
                    out.append(level)
        return out

    def _binary_support_prompts(self, trait_id: str, query_prompt: str, level: int) -> list[str]:
        """Non-query prompts that can alone supply k positive and k negative shots."""
        out = []
        for p in self._other_prompts(trait_id, query_prompt):
            if len(self._level_pool(trait_id, p, level)) < self.k:
                continue
            if len(self._complement_pool(trait_id, [p], level)) >= self.k:
                out.append(p)
        return out

    def _binary_positive_levels(self, trait_id: str, query_prompt: str) -> list[int]:
        scale = self.corpus.traits[trait_id].scales.get(query_prompt)
        if scale is None:
            return []
        others = self._other_prompts(trait_id, query_prompt)
        out = []
        for level in range(scale.n_levels):
            if len(self._level_pool(trait_id, query_prompt, level)) < self.m:
                continue
            if len(self._complement_pool(trait_id, [query_prompt], level)) < self.m:
                continue
            if self.regime.one_prompt:
                if not self._binary_support_prompts(trait_id, query_prompt, level):
                    continue
            else:
                if len(self._union_pool(trait_id, others, level)) < self.k:
                    continue
                if len(self._complement_pool(trait_id, others, level)) < self.k:
                    continue
            out.append(level)
        return out

    def _multiclass_joint_levels(
        self, trait_id: str, query_prompt: str, support_prompts: list[str]
    ) -> list[int]:
        scale = self.corpus.traits[trait_id].scales.get(query_prompt)
        if scale is None:
            return []
        out = []
        for level in range(scale.n_levels):
            if len(self._level_pool(trait_id, query_prompt, level)) < self.m:
                continue
            if len(self._union_pool(trait_id, support_prompts, level)) < self.k:
                continue
            out.append(level)
        return out

    # -- sampling ----------------------------------------------------------

    def _draw(self, pool: list[str], n: int) -> tuple[str, ...]:
        idx = self.rng.choice(len(pool), size=n, replace=False)
        return tuple(pool[i] for i in idx)

    def _choose(self, items: list) -> object:
        return items[int(self.rng.integers(len(items)))]

    def sample_binary(self, trait_id: str) -> Episode:
        """One positive level against the pooled complement of all others."""
        candidates = []
        for qp in self._pools.get(trait_id, {}):
            levels = self._binary_positive_levels(trait_id, qp)
            if levels:
                candidates.append((qp, levels))
        if not candidates:
            raise EpisodeUnavailable(
                f"no (prompt, level) admits a binary episode for trait '{trait_id}'"
            )
        qp, levels = candidates[int(self.rng.integers(len(candidates)))]
        pos_level = levels[int(self.rng.integers(len(levels)))]
        if self.regime.one_prompt:
            sp = self._choose(self._binary_support_prompts(trait_id, qp, pos_level))
            support_prompts = [sp]
        else:
            support_prompts = self._other_prompts(trait_id, qp)
        support_pos = self._draw(self._union_pool(trait_id, support_prompts, pos_level), self.k)
        support_neg = self._draw(
            self._complement_pool(trait_id, support_prompts, pos_level), self.k
        )
        query_pos = self._draw(self._level_pool(trait_id, qp, pos_level), self.m)
        query_neg = self._draw(self._complement_pool(trait_id, [qp], pos_level), self.m)
        scale = self.corpus.scale_for(trait_id, qp)
        neg_levels = tuple(l for l in range(scale.n_levels) if l != pos_level)
        return Episode(
            regime=self.regime,
            trait_id=trait_id,
            query_prompt_id=qp,
            classes=(ClassSpec((pos_level,)), ClassSpec(neg_levels)),
            support=(support_pos, support_neg),
            query=(query_pos, query_neg),
        )

    def sample_multiclass(self, trait_id: str) -> Episode:
        """One class per eligible level, capped at max_classes by a uniform
        subset; under one_prompt the class set is what a single support prompt
        can jointly cover."""
        one_prompt = self.regime.one_prompt
        candidates = []
        for qp in self._pools.get(trait_id, {}):
            if one_prompt:
                sps = [
                    sp
                    for sp in self._other_prompts(trait_id, qp)
                    if len(self._multiclass_joint_levels(trait_id, qp, [sp])) >= 2
                ]
                if sps:
                    candidates.append((qp, sps))
            else:
                others = self._other_prompts(trait_id, qp)
                if len(self._multiclass_joint_levels(trait_id, qp, others)) >= 2:
                    candidates.append((qp, others))
        if not candidates:
            raise EpisodeUnavailable(
                f"fewer than 2 eligible levels anywhere for trait '{trait_id}'"
            )
        qp, sps = candidates[int(self.rng.integers(len(candidates)))]
        if one_prompt:
            support_prompts = [sps[int(self.rng.integers(len(sps)))]]
        else:
            support_prompts = sps
        levels = self._multiclass_joint_levels(trait_id, qp, support_prompts)
        if len(levels) > self.max_classes:
            idx = self.rng.choice(len(levels), size=self.max_classes, replace=False)
            levels = sorted(levels[i] for i in idx)
        support = []
        query = []
        for level in levels:
            support.append(self._draw(self._union_pool(trait_id, support_prompts, level), self.k))
            query.append(self._draw(self._level_pool(trait_id, qp, level), self.m))
        return Episode(
            regime=self.regime,
            trait_id=trait_id,
            query_prompt_id=qp,
            classes=tuple(ClassSpec((l,)) for l in levels),
            support=tuple(support),
            query=tuple(query),
        )

    def sample(self, trait_id: str | None = None) -> Episode:
        """Draw one episode; the trait is drawn uniformly over traits that can
        form at least one episode when not given."""
        if trait_id is None:
            trait_id = self._choose(self._samplable_traits())
        if self.regime.classification == "binary":
            return self.sample_binary(trait_id)
        return self.sample_multiclass(trait_id)

    def _samplable_traits(self) -> list[str]:
        if self._samplable_cache is None:
            out = []
            for trait_id in self._pools:
                if self.regime.classification == "binary":
                    ok = any(
                        self._binary_positive_levels(trait_id, qp)
                        for qp in self._pools[trait_id]
                    )
                else:
                    ok = False
                    for qp in self._pools[trait_id]:
                        if self.regime.one_prompt:
                            ok = any(
                                len(self._multiclass_joint_levels(trait_id, qp, [sp])) >= 2
                                for sp in self._other_prompts(trait_id, qp)
                            )
                        else:
                            others = self._other_prompts(trait_id, qp)
                            ok = len(self._multiclass_joint_levels(trait_id, qp, others)) >= 2
                        if ok:
                            break
                if ok:
                    out.append(trait_id)
            if not out:
                raise EpisodeUnavailable(
                    f"no trait admits a {self.regime.tag()} episode on this split"
                )
            self._samplable_cache = out
        return self._samplable_cache

    def stream(self, count: int) -> Iterator[Episode]:
        for _ in range(count):
            yield self.sample()


def build_meta_test(
    corpus: Corpus,
    trait_id: str,
    test_prompt: str,
    support_essay_ids: list[str] | set[str],
) -> MetaTestTask:
    """N-way meta-test task for one (trait, held-out prompt).

    Support pools take every given essay whose level lies on the test prompt's
    scale; levels with empty training pools yield no class, so predictions can
    never emit an unseen level. Essays of the test prompt itself are excluded
    from support regardless of the given ids.
    """
    scale = corpus.scale_for(trait_id, test_prompt)
    query = tuple(
        e
        for e in corpus.prompts[test_prompt].essay_ids
        if trait_id in corpus.essays[e].levels
    )
    if not query:
        raise EpisodeUnavailable(
            f"trait '{trait_id}' is not annotated on test prompt '{test_prompt}'"
        )
    wanted = set(support_essay_ids)
    pools: list[list[str]] = [[] for _ in range(scale.n_levels)]
    for essay_id in corpus.essays:
        if essay_id not in wanted:
            continue
        essay = corpus.essays[essay_id]
        if essay.prompt_id == test_prompt:
            continue
        level = essay.levels.get(trait_id)
        if level is None or level >= scale.n_levels:
            continue
        pools[level].append(essay_id)
    class_levels = tuple(l for l in range(scale.n_levels) if pools[l])
    if not class_levels:
        raise EpisodeUnavailable(
            f"no annotated training essays for trait '{trait_id}'"
        )
    return MetaTestTask(
        trait_id=trait_id,
        test_prompt_id=test_prompt,
        scale=scale,
        class_levels=class_levels,
        support=tuple(tuple(pools[l]) for l in class_levels),
        query=query,
    )
