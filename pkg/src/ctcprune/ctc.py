"""CTC loss over frame-wise label distributions.

The loss marginalizes over all frame alignments that collapse (merge repeats,
then drop blanks) to the target labels, via a forward/backward dynamic program
over the blank-augmented state sequence, entirely in log space.  The gradient
with respect to the logits has the closed form softmax(logits) minus the
state-occupancy posterior, which is what `ctc_loss` returns alongside the
loss; `ctc_loss_node` wires that pair into the autodiff tape.

Blank is label id 0 throughout.  A target that needs more frames than
provided (each label plus one mandatory blank between adjacent duplicates)
raises InfeasibleTargetError instead of returning an infinite loss.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .autodiff import Node, Tape, attach_scalar
from .errors import InfeasibleTargetError, NumericError
from .linalg import log_softmax

BLANK = 0

NEG_INF = -np.inf


def collapse(path, blank: int = BLANK) -> tuple[int, ...]:
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(int(p))
        prev = p
    return tuple(out)


def min_frames(labels) -> int:
    """Fewest frames that can emit `labels`: one per label plus one separator per adjacent repeat."""
    reps = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + reps


def _validate(logits: np.ndarray, labels) -> tuple[np.ndarray, tuple[int, ...]]:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError(f"logits must be (frames, vocab), got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise NumericError("logits contain non-finite entries")
    t, v = logits.shape
    if t < 1 or v < 2:
        raise ValueError(f"need at least 1 frame and 2 labels, got shape {logits.shape}")
    labels = tuple(int(u) for u in labels)
    if any(u < 1 or u >= v for u in labels):
        raise ValueError(f"labels must lie in 1..{v - 1} (0 is blank), got {labels}")
    need = min_frames(labels)
    if t < need:
        raise InfeasibleTargetError(
            f"target of {len(labels)} labels needs at least {need} frames, got {t}"
        )
    return logits, labels


def ctc_loss(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Negative log-probability of `labels` and its gradient with respect to `logits`.

    Returns (loss, grad) with grad.shape == logits.shape.
    """
    logits, labels = _validate(logits, labels)
    t_len, vocab = logits.shape
    lp = log_softmax(logits, axis=-1)

    ext = [BLANK]
    for u in labels:
        ext.extend((u, BLANK))
    s_len = len(ext)
    ext_arr = np.array(ext)
    # state s can also come from s-2 when that skips neither a blank nor a repeat
    can_skip = np.zeros(s_len, dtype=bool)
    can_skip[2:] = (ext_arr[2:] != BLANK) & (ext_arr[2:] != ext_arr[:-2])

    emit = lp[:, ext_arr]  # (T, S)

    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        stay = alpha[t - 1]
        prev = np.full(s_len, NEG_INF)
        prev[1:] = alpha[t - 1, :-1]
        acc = np.logaddexp(stay, prev)
        skip = np.full(s_len, NEG_INF)
        skip[2:] = alpha[t - 1, :-2]
        acc = np.where(can_skip, np.logaddexp(acc, skip), acc)
        alpha[t] = acc + emit[t]

    tail = alpha[t_len - 1, s_len - 1]
    if s_len > 1:
        tail = np.logaddexp(tail, alpha[t_len - 1, s_len - 2])
    log_z = tail
    if not np.isfinite(log_z):
        # feasibility was pre-checked, so this cannot be triggered by shape
        raise InfeasibleTargetError("no alignment has non-zero probability")

    beta = np.full((t_len, s_len), NEG_INF)
    beta[t_len - 1, s_len - 1] = emit[t_len - 1, s_len - 1]
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = emit[t_len - 1, s_len - 2]
    for t in range(t_len - 2, -1, -1):
        stay = beta[t + 1]
        nxt = np.full(s_len, NEG_INF)
        nxt[:-1] = beta[t + 1, 1:]
        acc = np.logaddexp(stay, nxt)
        skip = np.full(s_len, NEG_INF)
        skip[:-2] = np.where(can_skip[2:], beta[t + 1, 2:], NEG_INF)
        acc = np.logaddexp(acc, skip)
        beta[t] = acc + emit[t]

    # occupancy: alpha and beta both count the emission at t, remove one copy
    log_gamma = alpha + beta - emit - log_z
    occ = np.zeros((t_len, vocab))
    np.add.at(occ.T, ext_arr, np.exp(log_gamma).T)

    grad = np.exp(lp) - occ
    return float(-log_z), grad


def ctc_loss_node(tape: Tape, logits: Node, labels) -> Node:
    """CTC loss as a tape node chaining its closed-form gradient through `logits`."""
    loss, grad = ctc_loss(logits.value, labels)
    return attach_scalar(tape, logits, loss, grad)


def ctc_brute_force(logits: np.ndarray, labels, budget: int = 1_000_000) -> float:
    """Reference loss by summing over every alignment path explicitly.

    Exponential in the number of frames; refuses when vocab**frames exceeds
    `budget`.
    """
    logits, labels = _validate(logits, labels)
    t_len, vocab = logits.shape
    if vocab ** t_len > budget:
        raise ValueError(
            f"brute force needs {vocab}^{t_len} path evaluations, over the {budget} budget"
        )
    lp = log_softmax(logits, axis=-1)
    total = NEG_INF
    for path in itertools.product(range(vocab), repeat=t_len):
        if collapse(path) != labels:
            continue
        total = np.logaddexp(total, sum(lp[t, k] for t, k in enumerate(path)))
    if not np.isfinite(total):
        raise InfeasibleTargetError("no alignment path collapses to the target")
    return float(-total)


def greedy_decode(logits: np.ndarray) -> tuple[int, ...]:
    """Frame-wise argmax then collapse; argmax ties resolve to the smaller label id."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError(f"logits must be (frames, vocab), got shape {logits.shape}")
    return collapse(np.argmax(logits, axis=-1))


def edit_distance(a, b) -> int:
    """Levenshtein distance between two label sequences."""
    a, b = tuple(a), tuple(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ai in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, bj in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ai != bj))
        prev = cur
    return prev[len(b)]
