"""Subspace similarity between layer activations (SVCCA).

Each layer's activations over a corpus form an (examples, features) matrix.
A reduction keeps the top singular directions holding 99 percent of the
squared singular mass, which strips low-energy noise directions; the
similarity of two layers is then the mean canonical correlation between
their reduced subspaces.  The score is 1.0 for representations equal up to
any invertible affine map and near zero for unrelated ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import EncoderModel, forward
from .errors import DataError
from .linalg import Matrix, load_matrix, matrix_bytes, rng_fork, svd
from .train import Utterance

MASS_FRACTION = 0.99
WHITEN_EPS = 1e-10


@dataclass
class ActivationDump:
    """Rows of one layer's states, aligned across layers by construction."""

    layer: int
    data: Matrix
    stride: int
    offset: int


def collect_activations(
    model: EncoderModel,
    utts: list[Utterance],
    max_rows: int = 2000,
    seed: int = 0,
) -> list[ActivationDump]:
    """Evaluation-mode states of every layer (position 0 is the projected input).

    All utterances are concatenated along the frame axis, then one uniform
    stride with a random offset subsamples down to at most `max_rows` rows;
    the identical row selection applies to every layer, so dumps stay
    frame-aligned.  The cap never goes below five rows per model dimension.
    """
    if not utts:
        raise DataError("activation collection needs at least one utterance")
    cfg = model.config
    per_layer = [[] for _ in range(cfg.layers + 1)]
    for utt in utts:
        trace = forward(model, utt.feats)
        for l, node in enumerate(trace.outputs):
            per_layer[l].append(node.value)
    stacked = [np.concatenate(rows, axis=0) for rows in per_layer]
    total = stacked[0].shape[0]
    cap = max(int(max_rows), 5 * cfg.d_model)
    stride = 1
    offset = 0
    if total > cap:
        stride = -(-total // cap)  # ceil division
        offset = int(rng_fork(seed, "svcca/offset").integers(0, stride))
    take = np.arange(offset, total, stride)
    return [
        ActivationDump(layer=l, data=np.ascontiguousarray(m[take]), stride=stride, offset=offset)
        for l, m in enumerate(stacked)
    ]


def _reduce(x: Matrix) -> Matrix:
    """Column-orthonormal basis of the directions holding 99 percent of the energy."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n <= d:
        raise DataError(
            f"need more examples ({n}) than features ({d}); "
            "collect more activations or raise the row cap"
        )
    centered = x - x.mean(axis=0, keepdims=True)
    r = svd(centered)
    total = float(np.sum(r.s**2))
    if total == 0.0:
        raise DataError("activations are constant, similarity is undefined")
    mass = np.cumsum(r.s**2) / total
    k = int(np.searchsorted(mass, MASS_FRACTION) + 1)
    factors = r.s[:k] / (r.s[:k] + WHITEN_EPS)
    return r.u[:, :k] * factors


def svcca_similarity(x: Matrix, y: Matrix) -> float:
    """Mean canonical correlation between the reduced subspaces of x and y."""
    return _similarity_of_reduced(_reduce(x), _reduce(y))


def _similarity_of_reduced(bx: Matrix, by: Matrix) -> float:
    corr = svd(bx.T @ by).s
    corr = np.clip(corr, 0.0, 1.0)
    k = min(bx.shape[1], by.shape[1])
    return float(np.sum(corr[:k]) / k)


def similarity_matrix(layers_data: list[Matrix]) -> Matrix:
    """All-pairs similarity; each layer is reduced once and reused."""
    reduced = [_reduce(m) for m in layers_data]
    n = len(reduced)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            s = _similarity_of_reduced(reduced[i], reduced[j])
            out[i, j] = s
            out[j, i] = s
    return out


def similarity_csv(matrix: Matrix) -> str:
    """Delimited table with layer indices on both axes."""
    n = matrix.shape[0]
    lines = ["layer," + ",".join(str(j) for j in range(n))]
    for i in range(n):
        lines.append(str(i) + "," + ",".join(repr(float(v)) for v in matrix[i]))
    return "\n".join(lines) + "\n"


def save_dumps(out_dir, dumps: list[ActivationDump]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "layers": len(dumps),
        "rows": int(dumps[0].data.shape[0]),
        "features": int(dumps[0].data.shape[1]),
        "stride": dumps[0].stride,
        "offset": dumps[0].offset,
    }
    (out / "dumps.json").write_text(json.dumps(meta, sort_keys=True, separators=(",", ":")) + "\n")
    for d in dumps:
        with open(out / f"layer{d.layer}.pmat", "wb") as fh:
            fh.write(matrix_bytes(d.data))


def load_dumps(in_dir) -> list[ActivationDump]:
    src = Path(in_dir)
    try:
        meta = json.loads((src / "dumps.json").read_text())
    except FileNotFoundError:
        raise DataError(f"no activation dumps in {src}") from None
    dumps = []
    for l in range(meta["layers"]):
        path = src / f"layer{l}.pmat"
        if not path.exists():
            raise DataError(f"missing activation dump {path}")
        dumps.append(
            ActivationDump(layer=l, data=load_matrix(path), stride=meta["stride"], offset=meta["offset"])
        )
    return dumps
