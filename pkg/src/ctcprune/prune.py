"""Run-time depth reduction without retraining.

Two strategies produce a depth schedule (one row per depth, best subset
first at the full depth, walking down to the target):

* contiguous: keep the bottom d layers, the depths the tapped training
  objective optimizes directly.  One evaluation pass scores every depth,
  because the state after layer d is also the state of the depth-d prefix.
* iterative: greedy backward elimination.  From the current subset of size
  k, score every subset missing one element plus the contiguous subset of
  size k-1, and keep the best by token error rate (ties: mean loss, then
  lexicographic subset order).

Scores are cached per subset and the cache is write-once: re-deriving a
subset's score through a different evaluation path must reproduce it bit for
bit, otherwise the forward pass broke prefix stability and we fail loudly.
Selection never mutates the model; that is asserted on every run.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ctc import ctc_loss, edit_distance, greedy_decode
from .encoder import (
    EncoderModel,
    forward,
    induce_submodel,
    param_hash,
    project_to_vocab,
    save_checkpoint,
)
from .errors import DataError, NumericError
from .train import Utterance

__all__ = [
    "CandidateScore",
    "EvalCache",
    "candidate_subsets",
    "evaluate_with_prefixes",
    "export_submodel",
    "load_schedule",
    "run_contiguous_prune",
    "run_iterative_prune",
    "save_schedule",
    "schedule_json",
]


@dataclass(frozen=True)
class CandidateScore:
    subset: tuple[int, ...]
    ter: float
    mean_loss: float

    @property
    def depth(self) -> int:
        return len(self.subset)

    def sort_key(self):
        return (self.ter, self.mean_loss, self.subset)


class EvalCache:
    """Subset -> score map where second writes must agree exactly."""

    def __init__(self):
        self._scores: dict[tuple[int, ...], CandidateScore] = {}

    def __contains__(self, subset) -> bool:
        return tuple(subset) in self._scores

    def get(self, subset) -> CandidateScore:
        return self._scores[tuple(subset)]

    def put(self, score: CandidateScore) -> None:
        old = self._scores.get(score.subset)
        if old is None:
            self._scores[score.subset] = score
        elif old.ter != score.ter or old.mean_loss != score.mean_loss:
            raise NumericError(
                f"subset {score.subset} scored differently on re-evaluation: "
                f"({old.ter}, {old.mean_loss}) vs ({score.ter}, {score.mean_loss}); "
                "the forward pass is not prefix-stable"
            )

    def merge(self, scores: list[CandidateScore]) -> None:
        for s in scores:
            self.put(s)


def evaluate_with_prefixes(
    model: EncoderModel, utts: list[Utterance], subset
) -> list[CandidateScore]:
    """Score `subset` and every prefix of it in a single pass over the corpus.

    Skipped layers are identities, so the state after the j-th retained layer
    equals the final state of the prefix subset of size j; one forward per
    utterance therefore yields logits for all depths 1..k.
    """
    subset = tuple(int(s) for s in subset)
    if not subset:
        raise ValueError("cannot score an empty subset")
    if not utts:
        raise DataError("pruning needs at least one evaluation utterance")
    k = len(subset)
    edits = np.zeros(k, dtype=np.int64)
    losses = np.zeros(k)
    tokens = 0
    for utt in utts:
        trace = forward(model, utt.feats, subset=subset)
        tokens += len(utt.labels)
        for j in range(k):
            logits = project_to_vocab(model, trace.outputs[subset[j]], trace.tape).value
            loss, _ = ctc_loss(logits, utt.labels)
            losses[j] += loss
            edits[j] += edit_distance(greedy_decode(logits), utt.labels)
    if tokens == 0:
        raise DataError("reference corpus has no tokens")
    return [
        CandidateScore(subset=subset[: j + 1], ter=float(edits[j] / tokens),
                       mean_loss=float(losses[j] / len(utts)))
        for j in range(k)
    ]


def candidate_subsets(current) -> list[tuple[int, ...]]:
    """Every one-element removal of `current`, plus the contiguous subset of the
    same reduced size; deduplicated, in lexicographic order."""
    current = tuple(current)
    if len(current) <= 1:
        raise ValueError("cannot prune below depth 1")
    cands = {current[:i] + current[i + 1 :] for i in range(len(current))}
    cands.add(tuple(range(1, len(current))))
    return sorted(cands)


def _score_missing(model, utts, cache: EvalCache, missing: list[tuple[int, ...]], jobs: int):
    if jobs > 1 and len(missing) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            all_rows = list(ex.map(lambda c: evaluate_with_prefixes(model, utts, c), missing))
    else:
        all_rows = [evaluate_with_prefixes(model, utts, c) for c in missing]
    # merge in submission order so failures are reproducible
    for rows in all_rows:
        cache.merge(rows)


def run_iterative_prune(
    model: EncoderModel,
    utts: list[Utterance],
    target_depth: int,
    jobs: int = 1,
) -> list[CandidateScore]:
    """Greedy backward elimination from full depth down to `target_depth`."""
    layers = model.config.layers
    if not (1 <= target_depth <= layers):
        raise ValueError(f"target depth must lie in 1..{layers}, got {target_depth}")
    hash_before = param_hash(model)
    cache = EvalCache()
    current = tuple(range(1, layers + 1))
    cache.merge(evaluate_with_prefixes(model, utts, current))
    schedule = [cache.get(current)]
    while len(current) > target_depth:
        cands = candidate_subsets(current)
        _score_missing(model, utts, cache, [c for c in cands if c not in cache], jobs)
        best = min((cache.get(c) for c in cands), key=CandidateScore.sort_key)
        contiguous = cache.get(tuple(range(1, len(current))))
        if best.sort_key() > contiguous.sort_key():
            raise NumericError(
                f"selected subset {best.subset} scores worse than the contiguous "
                f"candidate {contiguous.subset}; selection is broken"
            )
        current = best.subset
        schedule.append(best)
    if param_hash(model) != hash_before:
        raise NumericError("pruning mutated the model parameters")
    return schedule


def run_contiguous_prune(
    model: EncoderModel, utts: list[Utterance], target_depth: int
) -> list[CandidateScore]:
    """Depth schedule for bottom-d subsets; a single pass scores every depth."""
    layers = model.config.layers
    if not (1 <= target_depth <= layers):
        raise ValueError(f"target depth must lie in 1..{layers}, got {target_depth}")
    hash_before = param_hash(model)
    rows = evaluate_with_prefixes(model, utts, tuple(range(1, layers + 1)))
    if param_hash(model) != hash_before:
        raise NumericError("pruning mutated the model parameters")
    return [rows[d - 1] for d in range(layers, target_depth - 1, -1)]


def export_submodel(model: EncoderModel, subset, path) -> EncoderModel:
    """Materialize the subset as a standalone checkpoint; returns the submodel."""
    sub = induce_submodel(model, subset)
    save_checkpoint(path, sub)
    return sub


def schedule_json(schedule: list[CandidateScore]) -> str:
    depths = [s.depth for s in schedule]
    if depths != sorted(depths, reverse=True) or len(set(depths)) != len(depths):
        raise ValueError(f"schedule depths must strictly descend, got {depths}")
    rows = [
        {"depth": s.depth, "subset": list(s.subset), "ter": s.ter, "loss": s.mean_loss}
        for s in schedule
    ]
    return json.dumps(rows, sort_keys=True, separators=(",", ":")) + "\n"


def save_schedule(path, schedule: list[CandidateScore]) -> None:
    Path(path).write_text(schedule_json(schedule))


def load_schedule(path) -> list[CandidateScore]:
    try:
        rows = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"no schedule file at {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"unreadable schedule: {e}") from e
    if not isinstance(rows, list):
        raise DataError("schedule must be a list of depth rows")
    out = []
    prev_depth = None
    for row in rows:
        try:
            score = CandidateScore(
                subset=tuple(int(s) for s in row["subset"]),
                ter=float(row["ter"]),
                mean_loss=float(row["loss"]),
            )
            depth = int(row["depth"])
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"malformed schedule row {row!r}: {e}") from e
        if depth != score.depth:
            raise DataError(f"schedule row depth {depth} does not match subset {score.subset}")
        if prev_depth is not None and depth >= prev_depth:
            raise DataError("schedule depths must strictly descend")
        prev_depth = depth
        out.append(score)
    return out
