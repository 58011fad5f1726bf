"""Candidate generation, prefix-pass scoring, the greedy search, and exports."""

import numpy as np
import pytest

from ctcprune.encoder import (
    EncoderConfig,
    EncoderModel,
    encode_logits,
    load_checkpoint,
    param_hash,
)
from ctcprune.errors import DataError, NumericError
from ctcprune.prune import (
    CandidateScore,
    EvalCache,
    candidate_subsets,
    evaluate_with_prefixes,
    export_submodel,
    load_schedule,
    run_contiguous_prune,
    run_iterative_prune,
    save_schedule,
    schedule_json,
)
from ctcprune.train import SyntheticTaskSpec, evaluate, generate_split

SPEC = SyntheticTaskSpec(vocab=5, d_in=4, min_labels=2, max_labels=4, max_repeats=2, noise=0.05)


def model_and_utts(layers=4, n=6):
    model = EncoderModel(EncoderConfig(
        layers=layers, d_model=8, d_ff=12, heads=2, vocab=5, d_in=4,
        branch_positions=(max(1, layers // 2),), inter_weight=0.3, seed=13,
    ))
    return model, generate_split(SPEC, n, 77, "val")


def test_candidate_subsets_match_worked_example():
    assert candidate_subsets((2, 3, 4)) == [(1, 2), (2, 3), (2, 4), (3, 4)]
    assert candidate_subsets((1, 2)) == [(1,), (2,)]
    assert candidate_subsets((1, 2, 3)) == [(1, 2), (1, 3), (2, 3)]
    with pytest.raises(ValueError, match="below depth 1"):
        candidate_subsets((3,))


def test_prefix_pass_matches_individual_evaluations():
    model, utts = model_and_utts()
    subset = (1, 3, 4)
    rows = evaluate_with_prefixes(model, utts, subset)
    assert [r.subset for r in rows] == [(1,), (1, 3), (1, 3, 4)]
    for row in rows:
        direct = evaluate(model, utts, subset=row.subset)
        assert row.ter == direct.ter
        assert row.mean_loss == direct.mean_loss


def test_cache_tolerates_identical_rewrites_and_rejects_drift():
    model, utts = model_and_utts()
    cache = EvalCache()
    cache.merge(evaluate_with_prefixes(model, utts, (1, 2)))
    cache.merge(evaluate_with_prefixes(model, utts, (1, 3)))  # re-derives (1,)
    assert (1,) in cache and (1, 2) in cache and (1, 3) in cache
    good = cache.get((1,))
    with pytest.raises(NumericError, match="prefix-stable"):
        cache.put(CandidateScore(subset=(1,), ter=good.ter + 0.5, mean_loss=good.mean_loss))


def test_iterative_schedule_walks_down_and_leaves_params_alone():
    model, utts = model_and_utts(layers=4)
    h0 = param_hash(model)
    schedule = run_iterative_prune(model, utts, target_depth=1)
    assert param_hash(model) == h0
    assert [s.depth for s in schedule] == [4, 3, 2, 1]
    assert schedule[0].subset == (1, 2, 3, 4)
    for step, nxt in zip(schedule, schedule[1:]):
        removed = set(step.subset) - set(nxt.subset)
        # either drop one element or jump to the contiguous subset
        assert len(removed) == 1 or nxt.subset == tuple(range(1, nxt.depth + 1))


def test_iterative_choice_dominates_contiguous_candidate():
    model, utts = model_and_utts(layers=4)
    schedule = run_iterative_prune(model, utts, target_depth=1)
    for row in schedule[1:]:
        contiguous = evaluate(model, utts, subset=tuple(range(1, row.depth + 1)))
        assert (row.ter, row.mean_loss) <= (contiguous.ter, contiguous.mean_loss)


def test_iterative_jobs_do_not_change_the_result():
    model, utts = model_and_utts(layers=4)
    a = run_iterative_prune(model, utts, target_depth=1, jobs=1)
    b = run_iterative_prune(model, utts, target_depth=1, jobs=3)
    assert schedule_json(a) == schedule_json(b)


def test_contiguous_schedule_is_one_pass_over_prefixes():
    model, utts = model_and_utts(layers=4)
    schedule = run_contiguous_prune(model, utts, target_depth=2)
    assert [s.depth for s in schedule] == [4, 3, 2]
    assert [s.subset for s in schedule] == [(1, 2, 3, 4), (1, 2, 3), (1, 2)]
    for row in schedule:
        direct = evaluate(model, utts, subset=row.subset)
        assert row.ter == direct.ter and row.mean_loss == direct.mean_loss


def test_target_depth_validation():
    model, utts = model_and_utts(layers=3)
    with pytest.raises(ValueError, match="target depth"):
        run_iterative_prune(model, utts, target_depth=0)
    with pytest.raises(ValueError, match="target depth"):
        run_contiguous_prune(model, utts, target_depth=4)


def test_export_matches_masked_evaluation(tmp_path):
    model, utts = model_and_utts(layers=4)
    subset = (2, 4)
    path = tmp_path / "d2.pctc"
    sub = export_submodel(model, subset, path)
    reloaded = load_checkpoint(path)
    for utt in utts:
        masked = encode_logits(model, utt.feats, subset=subset)
        assert masked.tobytes() == encode_logits(sub, utt.feats).tobytes()
        assert masked.tobytes() == encode_logits(reloaded, utt.feats).tobytes()
    assert evaluate(reloaded, utts).ter == evaluate(model, utts, subset=subset).ter


def test_schedule_json_round_trip(tmp_path):
    rows = [
        CandidateScore(subset=(1, 2, 3), ter=0.25, mean_loss=1.5),
        CandidateScore(subset=(1, 3), ter=0.3, mean_loss=1.75),
        CandidateScore(subset=(3,), ter=0.5, mean_loss=2.25),
    ]
    path = tmp_path / "s.json"
    save_schedule(path, rows)
    assert load_schedule(path) == rows
    save_schedule(tmp_path / "s2.json", rows)
    assert (tmp_path / "s.json").read_bytes() == (tmp_path / "s2.json").read_bytes()

    with pytest.raises(ValueError, match="descend"):
        schedule_json(list(reversed(rows)))
    (path).write_text('[{"depth":2,"subset":[1],"ter":0.1,"loss":1.0}]')
    with pytest.raises(DataError, match="does not match subset"):
        load_schedule(path)
    path.write_text("not json")
    with pytest.raises(DataError, match="unreadable schedule"):
        load_schedule(path)
    with pytest.raises(DataError, match="no schedule file"):
        load_schedule(tmp_path / "missing.json")
