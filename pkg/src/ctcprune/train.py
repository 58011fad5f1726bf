"""Synthetic sequence task, combined-objective training loop, and evaluation.

The task maps noisy one-hot frame sequences to label sequences.  Each label
is emitted as one to `max_repeats` consecutive frames of its indicator
pattern plus Gaussian noise; adjacent duplicate labels get a zero separator
frame in between, which keeps every utterance long enough for its target.

Training minimizes (1 - w) * final-layer loss + w * mean over the tapped
intermediate layers, all through the shared output head.  The loop is
sequential and all randomness comes from per-epoch forked streams, so a run
is a pure function of (data, config); interrupting at an epoch boundary and
resuming from the saved state reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Node, Tape, backward, weighted_sum
from .ctc import ctc_loss, ctc_loss_node, edit_distance, greedy_decode
from .encoder import (
    EncoderModel,
    encode_logits,
    forward,
    load_checkpoint,
    project_to_vocab,
    save_checkpoint,
)
from .errors import ConfigError, DataError, NumericError
from .linalg import Matrix, load_matrix, matrix_bytes, rng_fork

TRAIN_STATE_MAGIC = b"PTRN"
TRAIN_STATE_VERSION = 1


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Distribution of the frame-labeling task."""

    vocab: int = 17
    d_in: int = 16
    min_labels: int = 3
    max_labels: int = 10
    max_repeats: int = 3
    noise: float = 0.1

    def __post_init__(self):
        if self.vocab < 2:
            raise ConfigError(f"vocab must be >= 2, got {self.vocab}")
        if self.vocab - 1 > self.d_in:
            raise ConfigError(
                f"need d_in >= {self.vocab - 1} for one indicator dimension per label"
            )
        if not (1 <= self.min_labels <= self.max_labels):
            raise ConfigError(
                f"label count range [{self.min_labels}, {self.max_labels}] is invalid"
            )
        if self.max_repeats < 1:
            raise ConfigError(f"max_repeats must be >= 1, got {self.max_repeats}")
        if self.noise < 0.0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")


@dataclass
class Utterance:
    uid: str
    feats: Matrix
    labels: tuple[int, ...]


def generate_utterance(spec: SyntheticTaskSpec, rng: np.random.Generator, uid: str) -> Utterance:
    n_labels = int(rng.integers(spec.min_labels, spec.max_labels + 1))
    labels = tuple(int(u) for u in rng.integers(1, spec.vocab, size=n_labels))
    rows = []
    prev = None
    for u in labels:
        if u == prev:
            rows.append(np.zeros(spec.d_in))  # separator keeps the repeat decodable
        pattern = np.zeros(spec.d_in)
        pattern[u - 1] = 1.0
        rows.extend([pattern] * int(rng.integers(1, spec.max_repeats + 1)))
        prev = u
    feats = np.stack(rows) + rng.normal(0.0, spec.noise, size=(len(rows), spec.d_in))
    return Utterance(uid=uid, feats=feats, labels=labels)


def generate_split(spec: SyntheticTaskSpec, n: int, seed: int, name: str) -> list[Utterance]:
    rng = rng_fork(seed, f"data/{name}")
    return [generate_utterance(spec, rng, f"{name}{i:05d}") for i in range(n)]


def save_dataset(out_dir, utts: list[Utterance]) -> None:
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    ids = [u.uid for u in utts]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate utterance ids")
    d_in = utts[0].feats.shape[1] if utts else 0
    manifest = {"d_in": d_in, "ids": ids}
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n"
    )
    with open(out / "labels.txt", "w") as fh:
        for u in utts:
            fh.write(" ".join([u.uid] + [str(t) for t in u.labels]) + "\n")
    for u in utts:
        with open(out / "feats" / f"{u.uid}.pmat", "wb") as fh:
            fh.write(matrix_bytes(u.feats))


def load_dataset(in_dir) -> list[Utterance]:
    src = Path(in_dir)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
    except FileNotFoundError:
        raise DataError(f"no dataset manifest in {src}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"unreadable dataset manifest: {e}") from e
    labels: dict[str, tuple[int, ...]] = {}
    try:
        for line in (src / "labels.txt").read_text().splitlines():
            parts = line.split()
            if not parts:
                continue
            labels[parts[0]] = tuple(int(t) for t in parts[1:])
    except FileNotFoundError:
        raise DataError(f"no labels file in {src}") from None
    except ValueError as e:
        raise DataError(f"unreadable labels line: {e}") from e
    utts = []
    for uid in manifest["ids"]:
        if uid not in labels:
            raise DataError(f"utterance {uid!r} missing from labels.txt")
        path = src / "feats" / f"{uid}.pmat"
        if not path.exists():
            raise DataError(f"missing feature matrix {path}")
        feats = load_matrix(path)
        if feats.shape[1] != manifest["d_in"]:
            raise DataError(
                f"utterance {uid!r} has {feats.shape[1]} feature dims, manifest says {manifest['d_in']}"
            )
        utts.append(Utterance(uid=uid, feats=feats, labels=labels[uid]))
    return utts


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    peak_lr: float
    warmup_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.warmup_steps < 1:
            raise ConfigError("epochs, batch_size, and warmup_steps must be >= 1")
        if self.peak_lr <= 0.0 or self.clip_norm <= 0.0 or self.eps <= 0.0:
            raise ConfigError("peak_lr, clip_norm, and eps must be > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")


def learning_rate(config: TrainConfig, step: int) -> float:
    """Linear warmup to peak_lr at warmup_steps, then inverse square-root decay."""
    return config.peak_lr * min(step / config.warmup_steps, (config.warmup_steps / step) ** 0.5)


@dataclass
class LossParts:
    node: Node
    final_mean: float
    inter_mean: float


def combined_loss(model: EncoderModel, utts: list[Utterance], tape: Tape, rng=None) -> LossParts:
    """Mean over utterances of (1 - w) * final + w * (mean over taps).

    The degenerate weights skip the irrelevant side entirely: w = 0 never
    touches the taps and w = 1 never touches the final head, so those losses
    are exactly the single-term ones.
    """
    cfg = model.config
    w = cfg.inter_weight
    per_utt = []
    final_total = 0.0
    inter_total = 0.0
    for utt in utts:
        trace = forward(model, utt.feats, tape=tape, rng=rng)
        terms = []
        weights = []
        if w < 1.0:
            final = ctc_loss_node(tape, project_to_vocab(model, trace.outputs[-1], tape), utt.labels)
            final_total += float(final.value)
            terms.append(final)
            weights.append(1.0 - w)
        if w > 0.0:
            taps = [
                ctc_loss_node(tape, project_to_vocab(model, trace.outputs[pos], tape), utt.labels)
                for pos in cfg.branch_positions
            ]
            inter = taps[0] if len(taps) == 1 else weighted_sum(tape, taps, [1.0 / len(taps)] * len(taps))
            inter_total += float(inter.value)
            terms.append(inter)
            weights.append(w)
        per_utt.append(terms[0] if len(terms) == 1 else weighted_sum(tape, terms, weights))
    n = len(utts)
    total = per_utt[0] if n == 1 else weighted_sum(tape, per_utt, [1.0 / n] * n)
    return LossParts(node=total, final_mean=final_total / n, inter_mean=inter_total / n)


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def fresh(cls, model: EncoderModel) -> "AdamState":
        return cls(
            step=0,
            m={p.name: np.zeros_like(p.value) for p in model.parameters()},
            v={p.name: np.zeros_like(p.value) for p in model.parameters()},
        )


def global_grad_norm(model: EncoderModel) -> float:
    total = 0.0
    for p in model.parameters():
        total += float(np.sum(p.grad * p.grad))
    return total ** 0.5


def adam_step(model: EncoderModel, state: AdamState, config: TrainConfig) -> float:
    """Clip by global norm, then apply one Adam update; returns the lr used."""
    norm = global_grad_norm(model)
    if norm > config.clip_norm:
        factor = config.clip_norm / norm
        for p in model.parameters():
            p.grad *= factor
    state.step += 1
    lr = learning_rate(config, state.step)
    b1c = 1.0 - config.beta1 ** state.step
    b2c = 1.0 - config.beta2 ** state.step
    for p in model.parameters():
        m = state.m[p.name]
        v = state.v[p.name]
        m *= config.beta1
        m += (1.0 - config.beta1) * p.grad
        v *= config.beta2
        v += (1.0 - config.beta2) * p.grad * p.grad
        p.value -= lr * (m / b1c) / (np.sqrt(v / b2c) + config.eps)
    return lr


@dataclass
class CurveRow:
    step: int
    lr: float
    loss: float
    inter_loss: float
    final_loss: float


CURVE_HEADER = "step,lr,loss,inter_loss,final_loss"


def format_curve_rows(rows: list[CurveRow]) -> str:
    out = [CURVE_HEADER]
    for r in rows:
        out.append(f"{r.step},{r.lr!r},{r.loss!r},{r.inter_loss!r},{r.final_loss!r}")
    return "\n".join(out) + "\n"


def load_curve_rows(path) -> list[CurveRow]:
    lines = Path(path).read_text().strip().split("\n")
    if not lines or lines[0] != CURVE_HEADER:
        raise DataError(f"{path} is not a loss-curve file")
    rows = []
    for line in lines[1:]:
        try:
            step, lr, loss, inter, final = line.split(",")
            rows.append(CurveRow(int(step), float(lr), float(loss), float(inter), float(final)))
        except ValueError as e:
            raise DataError(f"unreadable loss-curve line {line!r}: {e}") from e
    return rows


def save_train_state(path, model: EncoderModel, state: AdamState, next_epoch: int) -> None:
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(TRAIN_STATE_MAGIC)
        fh.write(struct.pack("<IQI", TRAIN_STATE_VERSION, state.step, next_epoch))
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode()
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(matrix_bytes(state.m[p.name]))
            fh.write(matrix_bytes(state.v[p.name]))


def load_train_state(path, model: EncoderModel) -> tuple[AdamState, int]:
    try:
        fh_ctx = open(path, "rb")
    except FileNotFoundError:
        raise DataError(f"no train state at {path}; was the run started without --out?") from None
    with fh_ctx as fh:
        if fh.read(4) != TRAIN_STATE_MAGIC:
            raise DataError(f"{path} is not a train-state file")
        version, step, next_epoch = struct.unpack("<IQI", fh.read(16))
        if version != TRAIN_STATE_VERSION:
            raise DataError(f"unsupported train-state version {version}")
        (count,) = struct.unpack("<I", fh.read(4))
        params = model.parameters()
        if count != len(params):
            raise DataError(f"train state has {count} parameters, model needs {len(params)}")
        state = AdamState(step=step, m={}, v={})
        for p in params:
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode()
            if name != p.name:
                raise DataError(f"train-state order mismatch: got {name!r}, expected {p.name!r}")
            state.m[name] = load_matrix(fh)
            state.v[name] = load_matrix(fh)
        if fh.read(1) != b"":
            raise DataError("trailing bytes in train state")
    return state, next_epoch


@dataclass
class TrainResult:
    model: EncoderModel
    rows: list[CurveRow] = field(default_factory=list)
    epochs_run: int = 0


def train(
    model: EncoderModel,
    utts: list[Utterance],
    config: TrainConfig,
    out_dir=None,
    resume: bool = False,
    stop_after_epoch: int | None = None,
    log=None,
) -> TrainResult:
    """Run (or resume) the training loop; see the module docstring for the contract.

    With `out_dir`, each finished epoch persists last.pctc, train_state.ptrn,
    and the appended rows of loss_curve.csv, which together define the resume
    point.
    """
    if not utts:
        raise DataError("training needs at least one utterance")
    out = Path(out_dir) if out_dir is not None else None
    state = AdamState.fresh(model)
    start_epoch = 1
    if resume:
        if out is None:
            raise ConfigError("resume requires an output directory")
        state, start_epoch = load_train_state(out / "train_state.ptrn", model)
        # parameters come from the paired checkpoint written at the same boundary
        restored = _load_params_from_checkpoint(out / "last.pctc", model)
        if not restored:
            raise DataError(f"no checkpoint next to {out / 'train_state.ptrn'}")

    result = TrainResult(model=model, epochs_run=start_epoch - 1)
    n = len(utts)
    last_epoch = config.epochs if stop_after_epoch is None else min(config.epochs, stop_after_epoch)
    for epoch in range(start_epoch, last_epoch + 1):
        order = rng_fork(config.seed, f"epoch{epoch}/shuffle").permutation(n)
        drop_rng = rng_fork(config.seed, f"epoch{epoch}/drop")
        epoch_rows = []
        for lo in range(0, n, config.batch_size):
            batch = [utts[i] for i in order[lo : lo + config.batch_size]]
            model.zero_grads()
            tape = Tape()
            try:
                parts = combined_loss(model, batch, tape, rng=drop_rng)
            except NumericError as e:
                raise NumericError(
                    f"at training step {state.step + 1} "
                    f"(lr {learning_rate(config, state.step + 1)}): {e}"
                ) from e
            loss = float(parts.node.value)
            backward(tape, parts.node)
            norm = global_grad_norm(model)
            if not (np.isfinite(loss) and np.isfinite(norm)):
                raise NumericError(
                    f"non-finite training signal at step {state.step + 1}: "
                    f"loss={loss}, grad_norm={norm}, lr={learning_rate(config, state.step + 1)}"
                )
            lr = adam_step(model, state, config)
            epoch_rows.append(
                CurveRow(step=state.step, lr=lr, loss=loss,
                         inter_loss=parts.inter_mean, final_loss=parts.final_mean)
            )
        result.rows.extend(epoch_rows)
        result.epochs_run = epoch
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            save_checkpoint(out / "last.pctc", model)
            save_train_state(out / "train_state.ptrn", model, state, epoch + 1)
            curve = out / "loss_curve.csv"
            if epoch == start_epoch and not (resume and curve.exists()):
                curve.write_text(format_curve_rows(epoch_rows))
            else:
                with open(curve, "a") as fh:
                    fh.write(format_curve_rows(epoch_rows).split("\n", 1)[1])
        if log is not None:
            log(f"epoch {epoch}/{config.epochs}: loss {epoch_rows[-1].loss:.4f}")
    return result


def _load_params_from_checkpoint(path, model: EncoderModel) -> bool:
    if not Path(path).exists():
        return False
    loaded = load_checkpoint(path)
    if loaded.config != model.config:
        raise DataError(
            f"checkpoint config {loaded.config} does not match the model being resumed"
        )
    for dst, src in zip(model.parameters(), loaded.parameters()):
        dst.value = src.value
        dst.grad = np.zeros_like(src.value)
    return True


@dataclass
class EvalReport:
    ter: float
    mean_loss: float
    n_utterances: int
    total_edits: int
    total_tokens: int


def evaluate(model: EncoderModel, utts: list[Utterance], subset=None) -> EvalReport:
    """Greedy-decode token error rate and mean final-head loss over a corpus.

    TER is corpus-level: summed edit distance over summed reference length.
    """
    if not utts:
        raise DataError("evaluation needs at least one utterance")
    edits = 0
    tokens = 0
    loss_total = 0.0
    for utt in utts:
        logits = encode_logits(model, utt.feats, subset=subset)
        loss, _ = ctc_loss(logits, utt.labels)
        loss_total += loss
        edits += edit_distance(greedy_decode(logits), utt.labels)
        tokens += len(utt.labels)
    if tokens == 0:
        raise DataError("reference corpus has no tokens")
    return EvalReport(
        ter=edits / tokens,
        mean_loss=loss_total / len(utts),
        n_utterances=len(utts),
        total_edits=edits,
        total_tokens=tokens,
    )
