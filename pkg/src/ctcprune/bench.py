"""Wall-clock inference timing across depths.

Each depth is materialized as a standalone submodel before any clock starts.
Timing then proceeds in rounds that visit every depth once, alternating the
visit order between rounds, with the cyclic garbage collector paused; after
`warmup` discarded rounds, each depth keeps the median of its `reps` timed
corpus encodings.  Speedups are relative to the deepest row, so the first row
of a descending sweep reads 1.0.
"""

from __future__ import annotations

import gc
import time
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderModel, encode_logits, induce_submodel
from .errors import DataError, NumericError
from .train import Utterance


@dataclass
class BenchRow:
    depth: int
    median_ms: float
    fps: float
    speedup: float


BENCH_HEADER = "depth,median_ms,fps,speedup"


def benchmark_depths(
    model: EncoderModel,
    utts: list[Utterance],
    depths: list[int] | None = None,
    reps: int = 5,
    warmup: int = 2,
) -> list[BenchRow]:
    """Median corpus-encoding time per depth, deepest first."""
    if reps < 3:
        raise ValueError(f"need at least 3 timed repetitions for a median, got {reps}")
    if warmup < 0:
        raise ValueError(f"warmup must be >= 0, got {warmup}")
    if not utts:
        raise DataError("benchmarking needs at least one utterance")
    layers = model.config.layers
    if depths is None:
        depths = list(range(layers, 0, -1))
    if sorted(depths, reverse=True) != depths or len(set(depths)) != len(depths):
        raise ValueError(f"depths must strictly descend, got {depths}")
    if not all(1 <= d <= layers for d in depths):
        raise ValueError(f"depths must lie in 1..{layers}, got {depths}")

    subs = {d: induce_submodel(model, tuple(range(1, d + 1))) for d in depths}
    total_frames = sum(u.feats.shape[0] for u in utts)
    for d in depths:
        out = encode_logits(subs[d], utts[0].feats)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"depth {d} produced non-finite logits")

    # depths are interleaved within each round, and the rounds alternate
    # direction, so clock-speed drift over the sweep lands on every depth
    # alike instead of skewing the ratios; collector pauses would otherwise
    # land on whichever depth happens to trip the allocation threshold
    times: dict[int, list[float]] = {d: [] for d in depths}
    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        for rnd in range(warmup + reps):
            order = depths if rnd % 2 == 0 else depths[::-1]
            for d in order:
                sub = subs[d]
                start = time.perf_counter()
                for utt in utts:
                    encode_logits(sub, utt.feats)
                times[d].append(time.perf_counter() - start)
    finally:
        if gc_was_enabled:
            gc.enable()
    medians = {d: float(np.median(ts[warmup:])) for d, ts in times.items()}

    base = medians[depths[0]]
    return [
        BenchRow(
            depth=d,
            median_ms=medians[d] * 1e3,
            fps=total_frames / medians[d],
            speedup=base / medians[d],
        )
        for d in depths
    ]


def bench_csv(rows: list[BenchRow]) -> str:
    out = [BENCH_HEADER]
    for r in rows:
        out.append(f"{r.depth},{r.median_ms!r},{r.fps!r},{r.speedup!r}")
    return "\n".join(out) + "\n"
