"""Pre-norm transformer encoder with layer-level skipping and depth-indexed taps.

The model is a stack of identical residual layers.  During training each
layer is kept with probability `keep_prob` (one Bernoulli draw per layer per
utterance, shared by the layer's attention and feed-forward branches) and the
surviving branches are scaled by 1/keep_prob; at evaluation every executed
layer runs unscaled.  A skipped layer contributes nothing, so evaluation can
run any subset of layers and the result is bit-identical to a standalone
model built from just those layers (`induce_submodel`).

All depths share one output head: a final layer norm plus a linear map to the
vocabulary (`project_to_vocab`), applied both to the last layer's state and to
any intermediate tap.
"""

from __future__ import annotations

import functools
import hashlib
import struct
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Node, ParamTensor, Tape, add, constant, scale
from .errors import CheckpointError, ConfigError, MatrixFormatError
from .linalg import Matrix, load_matrix, matrix_bytes, rng_fork
from .nn import (
    LayerParams,
    feed_forward_forward,
    init_layer_params,
    layer_norm_forward,
    linear_forward,
    self_attention_forward,
    xavier_uniform,
)

CHECKPOINT_MAGIC = b"PCTC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    layers: int
    d_model: int
    d_ff: int
    heads: int
    vocab: int
    d_in: int
    keep_prob: float = 1.0
    branch_positions: tuple[int, ...] = ()
    inter_weight: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.d_model < 2:
            raise ConfigError(f"d_model must be >= 2, got {self.d_model}")
        if self.heads < 1 or self.d_model % self.heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} must divide into heads {self.heads}"
            )
        if self.d_ff < 1:
            raise ConfigError(f"d_ff must be >= 1, got {self.d_ff}")
        if self.vocab < 2:
            raise ConfigError(f"vocab must be >= 2 (blank plus one label), got {self.vocab}")
        if self.d_in < 1:
            raise ConfigError(f"d_in must be >= 1, got {self.d_in}")
        if not (0.0 < self.keep_prob <= 1.0):
            raise ConfigError(f"keep_prob must lie in (0, 1], got {self.keep_prob}")
        if not (0.0 <= self.inter_weight <= 1.0):
            raise ConfigError(f"inter_weight must lie in [0, 1], got {self.inter_weight}")
        taps = tuple(int(p) for p in self.branch_positions)
        object.__setattr__(self, "branch_positions", taps)
        if sorted(set(taps)) != list(taps):
            raise ConfigError(f"branch positions must be sorted and unique, got {taps}")
        if taps and not (1 <= taps[0] and taps[-1] < self.layers):
            raise ConfigError(
                f"branch positions must lie in 1..{self.layers - 1}, got {taps}"
            )
        if self.inter_weight > 0.0 and not taps:
            raise ConfigError("inter_weight > 0 requires at least one branch position")


class EncoderModel:
    """Parameter container; all computation lives in the free functions below."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        seed = config.seed
        self.input_w = ParamTensor(
            "input.w", xavier_uniform(rng_fork(seed, "init/input.w"), (config.d_in, config.d_model))
        )
        self.input_b = ParamTensor("input.b", np.zeros((1, config.d_model)))
        self.layers = [
            init_layer_params(config.d_model, config.d_ff, seed, f"layer{l}")
            for l in range(1, config.layers + 1)
        ]
        self.final_g = ParamTensor("final_norm.g", np.ones((1, config.d_model)))
        self.final_b = ParamTensor("final_norm.b", np.zeros((1, config.d_model)))
        self.ctc_w = ParamTensor(
            "ctc.w", xavier_uniform(rng_fork(seed, "init/ctc.w"), (config.d_model, config.vocab))
        )
        self.ctc_b = ParamTensor("ctc.b", np.zeros((1, config.vocab)))

    def parameters(self) -> list[ParamTensor]:
        """Every trainable tensor, in the fixed checkpoint manifest order."""
        out = [self.input_w, self.input_b]
        for lp in self.layers:
            out.extend(lp.all_params())
        out.extend((self.final_g, self.final_b, self.ctc_w, self.ctc_b))
        return out

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()


@functools.lru_cache(maxsize=None)
def positional_encoding(t_len: int, d_model: int) -> Matrix:
    """Fixed sine/cosine position table; cached and returned read-only."""
    pos = np.arange(t_len)[:, None]
    i = np.arange((d_model + 1) // 2)[None, :]
    angles = pos / np.power(10000.0, (2.0 * i) / d_model)
    pe = np.zeros((t_len, d_model))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : d_model // 2])
    pe.flags.writeable = False
    return pe


@dataclass
class ForwardTrace:
    """Post-layer states: outputs[l] is the encoder state after layer l.

    A skipped layer reuses the previous Node, so outputs[i] *is*
    outputs[i-1] there (no copy, no extra op); drops[l-1] records the layer's
    keep draw in training mode and is None for layers outside the subset.
    """

    outputs: list[Node]
    drops: list[float | None]
    tape: Tape


def normalize_subset(subset, layers: int) -> tuple[int, ...]:
    got = tuple(int(s) for s in subset)
    if sorted(set(got)) != list(got) or (got and not (1 <= got[0] and got[-1] <= layers)):
        raise ValueError(f"subset must be sorted unique positions in 1..{layers}, got {got}")
    return got


def forward(
    model: EncoderModel,
    feats: Matrix,
    subset=None,
    tape: Tape | None = None,
    rng=None,
) -> ForwardTrace:
    """Run the encoder stack over one utterance of shape (frames, d_in).

    `subset` restricts execution to those layer positions (1-based; None means
    all).  Passing `rng` turns on training mode: each executed layer draws
    keep ~ Bernoulli(keep_prob) and scales its branches by keep/keep_prob.
    Without `rng` every executed layer runs with factor one.
    """
    cfg = model.config
    if tape is None:
        tape = Tape(recording=False)
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != cfg.d_in:
        raise ValueError(f"expected features of shape (frames, {cfg.d_in}), got {feats.shape}")
    active = set(range(1, cfg.layers + 1) if subset is None else normalize_subset(subset, cfg.layers))

    x = linear_forward(tape, constant(tape, feats), model.input_w, model.input_b)
    x = add(tape, x, constant(tape, positional_encoding(feats.shape[0], cfg.d_model)))

    outputs = [x]
    drops: list[float | None] = []
    for pos in range(1, cfg.layers + 1):
        if pos not in active:
            drops.append(None)
            outputs.append(x)
            continue
        keep = 1.0
        factor = 1.0
        if rng is not None:
            keep = 1.0 if rng.random() < cfg.keep_prob else 0.0
            factor = keep / cfg.keep_prob
        drops.append(keep)
        if keep == 0.0:
            outputs.append(x)
            continue
        lp = model.layers[pos - 1]
        att = self_attention_forward(
            tape, layer_norm_forward(tape, x, lp.g_att, lp.b_att), lp, cfg.heads
        )
        if factor != 1.0:
            att = scale(tape, att, factor)
        x = add(tape, x, att)
        ff = feed_forward_forward(tape, layer_norm_forward(tape, x, lp.g_ff, lp.b_ff), lp)
        if factor != 1.0:
            ff = scale(tape, ff, factor)
        x = add(tape, x, ff)
        outputs.append(x)
    return ForwardTrace(outputs=outputs, drops=drops, tape=tape)


def project_to_vocab(model: EncoderModel, state: Node, tape: Tape) -> Node:
    """Shared output head: final layer norm, then the linear map to label logits."""
    normed = layer_norm_forward(tape, state, model.final_g, model.final_b)
    return linear_forward(tape, normed, model.ctc_w, model.ctc_b)


def encode_logits(model: EncoderModel, feats: Matrix, subset=None) -> Matrix:
    """Evaluation-mode logits (frames, vocab) for one utterance."""
    tape = Tape(recording=False)
    trace = forward(model, feats, subset=subset, tape=tape)
    return project_to_vocab(model, trace.outputs[-1], tape).value


def induce_submodel(model: EncoderModel, subset) -> EncoderModel:
    """Standalone model of depth len(subset) copying the retained layers in order.

    Taps that survive move to their new positions; a tap landing on the new
    final layer is dropped (it would coincide with the output head), and the
    intermediate weight is zeroed when no taps remain.
    """
    cfg = model.config
    kept = normalize_subset(subset, cfg.layers)
    if not kept:
        raise ValueError("cannot induce a submodel from an empty subset")
    new_taps = tuple(
        kept.index(p) + 1 for p in cfg.branch_positions if p in kept and kept.index(p) + 1 < len(kept)
    )
    new_cfg = replace(
        cfg,
        layers=len(kept),
        branch_positions=new_taps,
        inter_weight=cfg.inter_weight if new_taps else 0.0,
    )
    sub = EncoderModel(new_cfg)
    _copy_param(sub.input_w, model.input_w)
    _copy_param(sub.input_b, model.input_b)
    for new_idx, pos in enumerate(kept):
        src = model.layers[pos - 1]
        dst = sub.layers[new_idx]
        for d, s in zip(dst.all_params(), src.all_params()):
            _copy_param(d, s)
    _copy_param(sub.final_g, model.final_g)
    _copy_param(sub.final_b, model.final_b)
    _copy_param(sub.ctc_w, model.ctc_w)
    _copy_param(sub.ctc_b, model.ctc_b)
    return sub


def _copy_param(dst: ParamTensor, src: ParamTensor) -> None:
    if dst.value.shape != src.value.shape:
        raise ValueError(f"shape mismatch copying {src.name}: {src.value.shape} -> {dst.value.shape}")
    dst.value = src.value.copy()
    dst.grad = np.zeros_like(dst.value)


def param_hash(model: EncoderModel) -> str:
    """SHA-256 over every parameter's name and exact bytes, in manifest order."""
    h = hashlib.sha256()
    for p in model.parameters():
        h.update(p.name.encode())
        h.update(matrix_bytes(p.value))
    return h.hexdigest()


def _config_text(cfg: EncoderConfig) -> str:
    items = {
        "branch_positions": ",".join(str(p) for p in cfg.branch_positions),
        "d_ff": str(cfg.d_ff),
        "d_in": str(cfg.d_in),
        "d_model": str(cfg.d_model),
        "heads": str(cfg.heads),
        "inter_weight": repr(cfg.inter_weight),
        "keep_prob": repr(cfg.keep_prob),
        "layers": str(cfg.layers),
        "seed": str(cfg.seed),
        "vocab": str(cfg.vocab),
    }
    return "".join(f"{k}={v}\n" for k, v in sorted(items.items()))


def _config_from_text(text: str) -> EncoderConfig:
    fields: dict[str, str] = {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise CheckpointError(f"malformed config line {line!r}")
        k, v = line.split("=", 1)
        fields[k] = v
    try:
        taps = tuple(int(p) for p in fields["branch_positions"].split(",") if p)
        return EncoderConfig(
            layers=int(fields["layers"]),
            d_model=int(fields["d_model"]),
            d_ff=int(fields["d_ff"]),
            heads=int(fields["heads"]),
            vocab=int(fields["vocab"]),
            d_in=int(fields["d_in"]),
            keep_prob=float(fields["keep_prob"]),
            branch_positions=taps,
            inter_weight=float(fields["inter_weight"]),
            seed=int(fields["seed"]),
        )
    except (KeyError, ValueError, ConfigError) as e:
        raise CheckpointError(f"bad checkpoint config: {e}") from e


def save_checkpoint(path, model: EncoderModel) -> None:
    """Write config plus all parameters; the byte stream is a pure function of both."""
    cfg_blob = _config_text(model.config).encode()
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode()
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(matrix_bytes(p.value))


def load_checkpoint(path) -> EncoderModel:
    try:
        fh_ctx = open(path, "rb")
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint at {path}") from None
    with fh_ctx as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        head = fh.read(8)
        if len(head) != 8:
            raise CheckpointError("truncated checkpoint header")
        version, cfg_len = struct.unpack("<II", head)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )
        cfg_blob = fh.read(cfg_len)
        if len(cfg_blob) != cfg_len:
            raise CheckpointError("truncated checkpoint config")
        model = EncoderModel(_config_from_text(cfg_blob.decode()))
        params = model.parameters()
        count_raw = fh.read(4)
        if len(count_raw) != 4:
            raise CheckpointError("truncated checkpoint parameter count")
        (count,) = struct.unpack("<I", count_raw)
        if count != len(params):
            raise CheckpointError(
                f"checkpoint has {count} parameters, model needs {len(params)}"
            )
        for p in params:
            nlen_raw = fh.read(2)
            if len(nlen_raw) != 2:
                raise CheckpointError(f"truncated checkpoint before parameter {p.name!r}")
            (nlen,) = struct.unpack("<H", nlen_raw)
            name = fh.read(nlen).decode()
            if name != p.name:
                raise CheckpointError(f"parameter order mismatch: got {name!r}, expected {p.name!r}")
            try:
                value = load_matrix(fh)
            except MatrixFormatError as e:
                raise CheckpointError(f"parameter {name!r}: {e}") from e
            if value.shape != p.value.shape:
                raise CheckpointError(
                    f"parameter {name!r} has shape {value.shape}, expected {p.value.shape}"
                )
            p.value = value
            p.grad = np.zeros_like(value)
        if fh.read(1) != b"":
            raise CheckpointError("trailing bytes after last parameter")
    return model
