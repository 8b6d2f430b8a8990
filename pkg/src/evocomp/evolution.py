"""Elitist evolutionary search over structured one-hot-per-group masks.

One search call owns a single seeded generator; child generation consumes
randomness in a fixed candidate order, and losses attach to candidates by
index, so concurrent fitness evaluation cannot perturb the result.

Internally candidates live as per-active-group choice tuples (the unique
decomposition of a valid mask), which makes the generate-reject loop cheap;
masks are composed only when a child is accepted for evaluation.
"""

from __future__ import annotations

import logging
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

from evocomp.core import (
    DataError,
    GroupPartition,
    LabelRecord,
    Mask,
    Sample,
    compose_mask,
    decompose_mask,
    validate_partition,
)
from evocomp.scorers import Scorer, ScorerError

log = logging.getLogger(__name__)

# Called after each evaluated generation with (iteration, best_parent_loss,
# total_evaluations); iteration 0 is the initial population.
IterationHook = Callable[[int, float, int], None]


@dataclass(frozen=True)
class EvoConfig:
    population_size: int = 48
    parent_count: int = 12
    iterations: int = 10
    crossover_prob: float = 0.9
    mutation_prob: float = 0.2
    seed: int = 0
    # Retry budget per generation for rejecting already-seen children; once
    # spent (or once the whole space has been seen) duplicates are accepted,
    # so a nearly exhausted search space cannot livelock.
    max_dedup_attempts: int | None = None  # defaults to 100 * population_size

    def __post_init__(self) -> None:
        if not 1 <= self.parent_count <= self.population_size:
            raise DataError("need 1 <= parent_count <= population_size")
        if self.iterations < 0:
            raise DataError("iterations must be >= 0")
        for name in ("crossover_prob", "mutation_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{name} must lie in [0, 1]")
        if self.max_dedup_attempts is not None and self.max_dedup_attempts < 1:
            raise DataError("max_dedup_attempts must be positive")

    @property
    def dedup_attempts(self) -> int:
        return self.max_dedup_attempts or 100 * self.population_size


@dataclass
class Population:
    """Evaluated candidates plus the global set of every digest ever seen."""

    candidates: list[Mask] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    seen: set[bytes] = field(default_factory=set)


def _active_sizes(part: GroupPartition) -> list[int]:
    return [len(g.members) for g in part.active_groups()]


def _cross_choices(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    half = len(a) // 2
    return a[:half] + b[half:]


def _mutate_choices(
    choices: tuple[int, ...], sizes: list[int], prob: float, rng: random.Random
) -> tuple[int, ...]:
    out = list(choices)
    for k, size in enumerate(sizes):
        if rng.random() >= prob:
            continue
        if size == 1:
            continue
        c = out[k]
        if c == 0:
            c = 1
        elif c == size - 1:
            c -= 1
        else:
            c += 1 if rng.randrange(2) else -1
        out[k] = c
    return tuple(out)


def init_population(part: GroupPartition, q: int, rng: random.Random) -> list[Mask]:
    """q masks with one uniformly random choice per active group; duplicates
    are permitted at initialization."""
    if q < 1:
        raise DataError("population size must be >= 1")
    sizes = _active_sizes(part)
    return [
        compose_mask(part, tuple(rng.randrange(s) for s in sizes))
        for _ in range(q)
    ]


def crossover(a: Mask, b: Mask, part: GroupPartition) -> Mask:
    """Child takes the first floor(s'/2) active-group sub-masks from ``a`` and
    the remainder from ``b`` (groups in canonical order)."""
    return compose_mask(part, _cross_choices(decompose_mask(a, part), decompose_mask(b, part)))


def mutate(mask: Mask, part: GroupPartition, prob: float, rng: random.Random) -> Mask:
    """Independently per active group with probability ``prob``, shift the
    group's 1 one position left or right in its member list. Interior choices
    pick a direction uniformly; boundaries take the only valid direction;
    size-1 groups never change."""
    choices = _mutate_choices(decompose_mask(mask, part), _active_sizes(part), prob, rng)
    return compose_mask(part, choices)


def select_parents(candidates: list[Mask], losses: list[float], p: int) -> list[Mask]:
    """The p masks with smallest loss; ties break toward the earlier position."""
    if not candidates:
        raise DataError("empty candidate list")
    if len(candidates) != len(losses):
        raise DataError("candidates and losses must have equal length")
    if p < 1:
        raise DataError("parent count must be >= 1")
    order = sorted(range(len(candidates)), key=lambda i: (losses[i], i))
    return [candidates[i] for i in order[:p]]


def evaluate_masks(
    scorer: Scorer,
    sample: Sample,
    part: GroupPartition,
    masks: list[Mask],
    workers: int = 1,
) -> list[float]:
    """Score every mask; results are returned in candidate order regardless of
    completion order. Serialized scorers are always evaluated sequentially."""

    def score_one(index: int) -> float:
        mask = masks[index]
        try:
            loss = scorer.score(sample, part, mask)
        except ScorerError:
            raise
        except Exception as exc:
            raise ScorerError(
                f"scorer {scorer.scorer_id} failed on sample {sample.id!r} candidate {index}: {exc}"
            ) from exc
        if not math.isfinite(loss):
            raise ScorerError(
                f"scorer {scorer.scorer_id} returned non-finite loss for sample {sample.id!r}"
            )
        return loss

    if workers > 1 and scorer.concurrent_safe and len(masks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(score_one, range(len(masks))))
    return [score_one(i) for i in range(len(masks))]


def _make_child(
    parents: list[tuple[int, ...]],
    sizes: list[int],
    cfg: EvoConfig,
    rng: random.Random,
) -> tuple[int, ...]:
    parent = parents[rng.randrange(len(parents))]
    if rng.random() < cfg.crossover_prob:
        other = parents[rng.randrange(len(parents))]
        child = _cross_choices(parent, other)
    else:
        child = parent  # no-trigger path: copy of the sampled parent
    return _mutate_choices(child, sizes, cfg.mutation_prob, rng)


def search(
    sample: Sample,
    part: GroupPartition,
    scorer: Scorer,
    cfg: EvoConfig,
    eval_workers: int = 1,
    on_iteration: IterationHook | None = None,
) -> LabelRecord:
    """Run the full elitist search and return the best mask found.

    Per iteration, q children are generated by parent sampling, probabilistic
    crossover, and mutation; children whose choices were already produced are
    rejected and regenerated, up to the per-generation retry budget, after
    which duplicates are accepted so a nearly exhausted space cannot
    livelock. Once the seen set provably covers the whole space, rejection is
    skipped outright. The next parents are the top-p of the previous parents
    united with the children.
    """
    validate_partition(part)
    rng = random.Random(cfg.seed)
    q, p = cfg.population_size, cfg.parent_count
    sizes = _active_sizes(part)
    space_size = math.prod(sizes)

    population = Population()
    candidates = [tuple(rng.randrange(s) for s in sizes) for _ in range(q)]
    population.candidates = [compose_mask(part, c) for c in candidates]
    population.losses = evaluate_masks(scorer, sample, part, population.candidates, eval_workers)
    population.seen = {m.digest() for m in population.candidates}
    seen = set(candidates)
    evaluations = q

    order = sorted(range(q), key=lambda i: (population.losses[i], i))[:p]
    parents = [candidates[i] for i in order]
    parent_losses = [population.losses[i] for i in order]
    if on_iteration:
        on_iteration(0, min(parent_losses), evaluations)
    log.debug("sample=%s iter=0 best=%.6g evals=%d", sample.id, min(parent_losses), evaluations)

    for iteration in range(1, cfg.iterations + 1):
        children: list[tuple[int, ...]] = []
        budget = cfg.dedup_attempts
        while len(children) < q:
            child = _make_child(parents, sizes, cfg, rng)
            while child in seen and budget > 0 and len(seen) < space_size:
                budget -= 1
                child = _make_child(parents, sizes, cfg, rng)
            seen.add(child)
            children.append(child)
        child_masks = [compose_mask(part, c) for c in children]
        child_losses = evaluate_masks(scorer, sample, part, child_masks, eval_workers)
        population.candidates.extend(child_masks)
        population.losses.extend(child_losses)
        population.seen.update(m.digest() for m in child_masks)
        evaluations += q

        pool_choices = parents + children
        pool_losses = parent_losses + child_losses
        order = sorted(range(len(pool_choices)), key=lambda i: (pool_losses[i], i))[:p]
        parents = [pool_choices[i] for i in order]
        parent_losses = [pool_losses[i] for i in order]
        if on_iteration:
            on_iteration(iteration, min(parent_losses), evaluations)
        log.debug(
            "sample=%s iter=%d best=%.6g evals=%d",
            sample.id, iteration, min(parent_losses), evaluations,
        )

    best = min(range(len(parents)), key=lambda i: (parent_losses[i], i))
    return LabelRecord(
        sample_id=sample.id,
        mask=compose_mask(part, parents[best]),
        loss=parent_losses[best],
        partition_digest=part.digest(),
        scorer_id=scorer.scorer_id,
        seed=cfg.seed,
    )
