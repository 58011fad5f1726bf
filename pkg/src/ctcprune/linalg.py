"""Dense float64 numerics: matmul, SVD, log-softmax, seeded RNG streams, matrix I/O.

Matrices are plain 2-D C-contiguous float64 numpy arrays (row-major); rank-3
batches, where they occur, are (batch, rows, cols) float64 arrays.  Everything
here is a pure function of its inputs, so values can be shared freely across
threads.

The on-disk matrix format ("PMAT") is little-endian:
magic "PMAT" | format version u32 | rows u64 | cols u64 | rows*cols float64.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import MatrixFormatError, SvdConvergenceError

Matrix = np.ndarray
Tensor3 = np.ndarray

MATRIX_MAGIC = b"PMAT"
MATRIX_VERSION = 1


def as_matrix(a) -> Matrix:
    """Coerce to a 2-D float64 array, rejecting other ranks."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: {a.shape} x {b.shape}"
        )
    return a @ b


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Log-probabilities along `axis`, computed with max-subtraction."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def rng_fork(seed: int, stream_label: str) -> np.random.Generator:
    """Deterministic, label-separated random stream.

    The (seed, label) pair is hashed into the entropy pool, so identical
    pairs reproduce the identical stream while distinct labels behave as
    independent generators.
    """
    digest = hashlib.sha256(f"{seed}:{stream_label}".encode()).digest()
    words = struct.unpack("<8I", digest)
    return np.random.default_rng(np.random.SeedSequence(list(words)))


@dataclass
class SvdResult:
    """Thin SVD: u (m x k) column-orthonormal, s non-increasing >= 0, vt (k x n)."""

    u: Matrix
    s: np.ndarray
    vt: Matrix


def svd(a: Matrix, max_sweeps: int = 60, tol: float = 1e-12) -> SvdResult:
    """Thin SVD by one-sided Jacobi rotations.

    Column pairs are rotated until every pair is mutually orthogonal to
    within `tol` relative to the column norms.  Raises SvdConvergenceError
    if that has not happened after `max_sweeps` sweeps.
    """
    a = as_matrix(a)
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"svd needs a non-empty matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("svd input contains non-finite entries")

    transposed = a.shape[0] < a.shape[1]
    work = (a.T if transposed else a).copy()
    m, n = work.shape
    v = np.eye(n)

    for _ in range(max_sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                ci = work[:, i]
                cj = work[:, j]
                aii = ci @ ci
                ajj = cj @ cj
                aij = ci @ cj
                denom = math.sqrt(aii * ajj)
                if denom == 0.0:
                    continue
                rel = abs(aij) / denom
                if rel > off:
                    off = rel
                if rel <= tol:
                    continue
                zeta = (ajj - aii) / (2.0 * aij)
                t = 1.0 / (abs(zeta) + math.hypot(1.0, zeta))
                if zeta < 0.0:
                    t = -t
                c = 1.0 / math.hypot(1.0, t)
                s = c * t
                new_i = c * ci - s * cj
                new_j = s * ci + c * cj
                work[:, i] = new_i
                work[:, j] = new_j
                vi = v[:, i].copy()
                v[:, i] = c * vi - s * v[:, j]
                v[:, j] = s * vi + c * v[:, j]
        if off <= tol:
            break
    else:
        raise SvdConvergenceError(
            f"one-sided Jacobi SVD did not converge within {max_sweeps} sweeps"
        )

    norms = np.linalg.norm(work, axis=0)
    order = np.argsort(-norms, kind="stable")
    s_vals = norms[order]
    u = np.zeros((m, n))
    nonzero = s_vals > 0.0
    u[:, nonzero] = work[:, order[nonzero]] / s_vals[nonzero]
    if not nonzero.all():
        _complete_orthonormal(u, int(np.count_nonzero(nonzero)))
    vt = v[:, order].T

    if transposed:
        return SvdResult(u=vt.T, s=s_vals, vt=u.T)
    return SvdResult(u=u, s=s_vals, vt=vt)


def _complete_orthonormal(u: Matrix, filled: int) -> None:
    """Fill columns filled..n-1 of u with unit vectors orthogonal to the rest."""
    m, n = u.shape
    col = filled
    for k in range(m):
        if col >= n:
            return
        cand = np.zeros(m)
        cand[k] = 1.0
        cand -= u[:, :col] @ (u[:, :col].T @ cand)
        norm = np.linalg.norm(cand)
        if norm > 1e-10:
            u[:, col] = cand / norm
            col += 1
    if col < n:  # unreachable for m >= n, kept as a guard
        raise RuntimeError("failed to complete orthonormal basis")


def save_matrix(path_or_file, m: Matrix) -> None:
    m = as_matrix(m)
    header = MATRIX_MAGIC + struct.pack("<IQQ", MATRIX_VERSION, m.shape[0], m.shape[1])
    payload = np.ascontiguousarray(m, dtype="<f8").tobytes()
    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        with open(path_or_file, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    else:
        path_or_file.write(header)
        path_or_file.write(payload)


def load_matrix(path_or_file) -> Matrix:
    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        with open(path_or_file, "rb") as fh:
            return load_matrix(fh)
    fh = path_or_file
    magic = fh.read(4)
    if magic != MATRIX_MAGIC:
        raise MatrixFormatError(f"bad magic {magic!r}, expected {MATRIX_MAGIC!r}")
    head = fh.read(20)
    if len(head) != 20:
        raise MatrixFormatError("truncated matrix header")
    version, rows, cols = struct.unpack("<IQQ", head)
    if version != MATRIX_VERSION:
        raise MatrixFormatError(
            f"unsupported matrix format version {version}, expected {MATRIX_VERSION}"
        )
    nbytes = rows * cols * 8
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise MatrixFormatError(
            f"truncated matrix payload: wanted {nbytes} bytes, got {len(payload)}"
        )
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, cols)


def matrix_bytes(m: Matrix) -> bytes:
    buf = io.BytesIO()
    save_matrix(buf, m)
    return buf.getvalue()
