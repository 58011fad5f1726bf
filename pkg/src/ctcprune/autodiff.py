"""Minimal reverse-mode autodiff over a tape of numpy arrays.

A Tape records nodes in creation order, which is a topological order of the
forward DAG, so walking the list once in reverse propagates gradients
correctly.  Ops are free functions: they compute the forward value eagerly
and, when the tape is recording, push a closure that scatters the output
gradient into the inputs.

Evaluation-only callers pass Tape(recording=False): the identical forward
expressions run, nothing is retained, and backward() is unavailable.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class ParamTensor:
    """A named trainable value with an accumulating gradient of the same shape."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:  # pragma: no cover
        return f"ParamTensor({self.name!r}, shape={self.value.shape})"


class Node:
    """One tape entry: a forward value plus the closure that back-propagates into its inputs."""

    __slots__ = ("value", "grad", "backward_fn")

    def __init__(self, value: np.ndarray, backward_fn: Callable | None):
        self.value = value
        self.grad = None
        self.backward_fn = backward_fn


class Tape:
    def __init__(self, recording: bool = True):
        self.recording = recording
        self.nodes: list[Node] = []

    def emit(self, value: np.ndarray, backward_fn: Callable | None = None) -> Node:
        node = Node(value, backward_fn if self.recording else None)
        if self.recording:
            self.nodes.append(node)
        return node


def _accum(node: Node, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64)
    else:
        node.grad += g


def backward(tape: Tape, loss: Node, seed: float = 1.0) -> None:
    """Accumulate d(loss)/d(param) into every ParamTensor reached by the tape.

    Visits each recorded node exactly once, in reverse creation order.
    """
    if not tape.recording:
        raise RuntimeError("backward() requires a recording tape")
    if np.ndim(loss.value) != 0:
        raise ValueError("loss must be scalar")
    _accum(loss, np.asarray(seed, dtype=np.float64))
    for node in reversed(tape.nodes):
        if node.grad is not None and node.backward_fn is not None:
            node.backward_fn(node.grad)


def constant(tape: Tape, value) -> Node:
    """Leaf with no gradient flow (inputs, positional tables)."""
    return tape.emit(np.asarray(value, dtype=np.float64))


def param(tape: Tape, p: ParamTensor) -> Node:
    return tape.emit(p.value, lambda g: np.add(p.grad, g, out=p.grad))


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(tape: Tape, a: Node, b: Node) -> Node:
    out = a.value @ b.value

    def bwd(g):
        _accum(a, g @ _swap(b.value))
        _accum(b, _swap(a.value) @ g)

    return tape.emit(out, bwd)


def add(tape: Tape, a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ValueError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    out = a.value + b.value

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return tape.emit(out, bwd)


def add_bias(tape: Tape, x: Node, b: Node) -> Node:
    """(T, D) + (1, D) row bias."""
    out = x.value + b.value

    def bwd(g):
        _accum(x, g)
        _accum(b, g.sum(axis=0, keepdims=True))

    return tape.emit(out, bwd)


def scale(tape: Tape, a: Node, factor: float) -> Node:
    out = factor * a.value
    return tape.emit(out, lambda g: _accum(a, factor * g))


def relu(tape: Tape, a: Node) -> Node:
    mask = a.value > 0.0
    out = np.where(mask, a.value, 0.0)
    return tape.emit(out, lambda g: _accum(a, np.where(mask, g, 0.0)))


def reshape(tape: Tape, a: Node, shape: tuple[int, ...]) -> Node:
    orig = a.value.shape
    out = a.value.reshape(shape)
    return tape.emit(out, lambda g: _accum(a, g.reshape(orig)))


def transpose(tape: Tape, a: Node, axes: tuple[int, ...]) -> Node:
    inverse = tuple(np.argsort(axes))
    out = a.value.transpose(axes)
    return tape.emit(out, lambda g: _accum(a, g.transpose(inverse)))


def softmax_last(tape: Tape, a: Node) -> Node:
    """Softmax over the last axis, max-shifted for stability."""
    shifted = a.value - np.max(a.value, axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        _accum(a, p * (g - np.sum(g * p, axis=-1, keepdims=True)))

    return tape.emit(p, bwd)


def attach_scalar(tape: Tape, source: Node, value: float, grad_wrt_source: np.ndarray) -> Node:
    """Wrap an externally computed scalar whose input-gradient is already known.

    Used for loss terms whose gradient has a closed form (CTC): the scalar
    becomes an ordinary tape node and chains through `source`.
    """
    out = np.float64(value)
    return tape.emit(out, lambda g: _accum(source, float(g) * grad_wrt_source))


def weighted_sum(tape: Tape, terms: list[Node], weights: list[float]) -> Node:
    if len(terms) != len(weights) or not terms:
        raise ValueError("weighted_sum needs matching, non-empty terms and weights")
    out = np.float64(sum(w * float(t.value) for t, w in zip(terms, weights)))

    def bwd(g):
        for t, w in zip(terms, weights):
            _accum(t, w * g)

    return tape.emit(out, bwd)
