"""Query strategy registry.

A strategy turns the round context (embeddings, predictions, budgets) into a
per-sample ScoreVector; the orchestrator then applies the shared batch
selection, so swapping strategies changes nothing but the scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Protocol, Sequence

from .baselines import baseline_scores
from .errors import DomainError
from .query import QueryScores, ScoreVector, asd_at_temperature, dkd, pakd, pd_scores, query_criterion, temperature
from .types import EmbeddingVec, ProbVolume


class RoundView(Protocol):
    """What a strategy may ask of the orchestrator for the current round."""

    round_index: int
    max_rounds: int
    n_b: int
    seed: int
    fixed_tau: float | None

    def unlabeled_ids(self) -> Sequence[str]: ...

    def initial_embeddings(self) -> Mapping[str, EmbeddingVec]: ...

    def current_embeddings(self) -> Mapping[str, EmbeddingVec]: ...

    def prob_volumes(self) -> Mapping[str, ProbVolume]: ...

    def labeled_embeddings(self) -> Sequence[EmbeddingVec]: ...


@dataclass(frozen=True)
class StrategyScores:
    scores: ScoreVector
    table: QueryScores | None = None


ScoreFn = Callable[[RoundView], StrategyScores]


@dataclass(frozen=True)
class Strategy:
    name: str
    score: ScoreFn


def _round_tau(ctx: RoundView) -> float:
    if ctx.fixed_tau is not None:
        return ctx.fixed_tau
    return temperature(ctx.round_index, ctx.max_rounds)


def _dkd_scores(ctx: RoundView) -> ScoreVector:
    initial = ctx.initial_embeddings()
    current = ctx.current_embeddings()
    pakd_vec = ScoreVector.from_pairs(
        (sid, pakd(initial[sid], current[sid])) for sid in ctx.unlabeled_ids()
    )
    pd_vec = pd_scores(list(current.values()), pakd_vec)
    return dkd(pakd_vec, pd_vec)


def _asd_scores(ctx: RoundView) -> ScoreVector:
    tau = _round_tau(ctx)
    probs = ctx.prob_volumes()
    return ScoreVector.from_pairs(
        (sid, asd_at_temperature(probs[sid], tau)) for sid in ctx.unlabeled_ids()
    )


def _combined(ctx: RoundView) -> StrategyScores:
    initial = ctx.initial_embeddings()
    current = ctx.current_embeddings()
    pakd_vec = ScoreVector.from_pairs(
        (sid, pakd(initial[sid], current[sid])) for sid in ctx.unlabeled_ids()
    )
    pd_vec = pd_scores(list(current.values()), pakd_vec)
    dkd_vec = dkd(pakd_vec, pd_vec)
    asd_vec = _asd_scores(ctx)
    table = query_criterion(
        dkd_vec,
        asd_vec,
        pakd_scores=pakd_vec,
        pd_vals=pd_vec,
        round_index=ctx.round_index,
    )
    return StrategyScores(scores=table.q_scores(), table=table)


def _negate(vec: ScoreVector) -> ScoreVector:
    return vec.with_values(-vec.values)


def _baseline(name: str) -> ScoreFn:
    def score(ctx: RoundView) -> StrategyScores:
        kwargs = dict(seed=ctx.seed, round_index=ctx.round_index, n_b=ctx.n_b)
        if name == "RAND":
            vec = baseline_scores(name, ids=list(ctx.unlabeled_ids()), **kwargs)
        elif name == "CORESET":
            vec = baseline_scores(
                name,
                embeddings=ctx.current_embeddings(),
                labeled_embeddings=ctx.labeled_embeddings(),
                **kwargs,
            )
        else:
            vec = baseline_scores(name, probs=ctx.prob_volumes(), **kwargs)
        return StrategyScores(scores=vec)

    return score


def _make_registry() -> dict[str, Strategy]:
    registry: dict[str, Strategy] = {}

    def add(name: str, fn: ScoreFn) -> None:
        registry[name] = Strategy(name=name, score=fn)

    add("DKD+ASD", _combined)
    # ASFDA = the same query criterion; the run config turns on the
    # semi-supervised stage
    add("ASFDA", _combined)
    for base in ("RAND", "ENPY", "LCON", "MMAR", "CORESET"):
        add(base, _baseline(base))
    add("HIGH-DKD", lambda ctx: StrategyScores(scores=_dkd_scores(ctx)))
    add("LOW-DKD", lambda ctx: StrategyScores(scores=_negate(_dkd_scores(ctx))))
    add("HIGH-ASD", lambda ctx: StrategyScores(scores=_asd_scores(ctx)))
    add("LOW-ASD", lambda ctx: StrategyScores(scores=_negate(_asd_scores(ctx))))
    return registry


_REGISTRY = _make_registry()


def strategy_names() -> list[str]:
    return sorted(_REGISTRY)


def get_strategy(name: str) -> Strategy:
    strat = _REGISTRY.get(name.upper())
    if strat is None:
        raise DomainError(
            f"unknown strategy {name!r}; registered: {', '.join(strategy_names())}"
        )
    return strat


def register_strategy(name: str, score: ScoreFn) -> None:
    """Extension hook: add a custom scorer under a new name."""
    key = name.upper()
    if key in _REGISTRY:
        raise DomainError(f"strategy {name!r} already registered")
    _REGISTRY[key] = Strategy(name=key, score=score)
