"""Weight quantizers: round-to-nearest groups, greedy error compensation, codebook VQ.

All three schemes produce a :class:`QuantizedTensor`. Grid schemes (``rtn`` and
``greedy``) split the row-major flattened tensor into consecutive groups of
``group_size`` weights, each with its own asymmetric min/max grid of ``2**n``
levels. Scales and offsets are held at float16 so that the in-memory tensor and
the serialized one dequantize identically, and so the bit accounting is honest.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.linalg

from ._linalg import CholeskyFailure, damped_cholesky

SCHEMES = ("rtn", "greedy", "vq")
GRID_BITS = range(2, 9)
PARAM_BITS = 16  # storage width of scales, offsets and codebook entries

KMEANS_MAX_ITER = 25
GREEDY_DAMPING = 0.01  # of the mean Gram diagonal
KMEANS_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Codebook:
    entries: np.ndarray  # (2**(n_bits*vec_dim), vec_dim) float16
    n_bits: int
    vec_dim: int

    def __post_init__(self):
        if self.entries.shape != (2 ** (self.n_bits * self.vec_dim), self.vec_dim):
            raise ValueError(
                f"codebook must have {2 ** (self.n_bits * self.vec_dim)} x {self.vec_dim} entries, "
                f"got {self.entries.shape}"
            )

    @property
    def size(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """A quantized weight matrix.

    ``indices`` is the flat index stream (grid level per weight, or codebook row
    per ``group_size``-vector for VQ). ``scales``/``zeros`` hold one float16
    step and offset per group for grid schemes; ``zeros`` is the value of level
    0, not an integer zero point.
    """

    scheme: str
    n_bits: int
    group_size: int
    shape: tuple
    indices: np.ndarray
    scales: np.ndarray | None = None
    zeros: np.ndarray | None = None
    codebook: Codebook | None = None

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape))

    @property
    def n_groups(self) -> int:
        return -(-self.numel // self.group_size)

    @property
    def index_width(self) -> int:
        """Bits stored per index."""
        if self.scheme == "vq":
            return self.n_bits * self.group_size
        return self.n_bits


# --------------------------------------------------------------------------- grids


def _f16_floor(x: np.ndarray) -> np.ndarray:
    f = np.asarray(x, dtype=np.float64).astype(np.float16)
    over = f.astype(np.float64) > x
    f[over] = np.nextafter(f[over], np.float16(-np.inf))
    return f


def _f16_ceil(x: np.ndarray) -> np.ndarray:
    f = np.asarray(x, dtype=np.float64).astype(np.float16)
    under = f.astype(np.float64) < x
    f[under] = np.nextafter(f[under], np.float16(np.inf))
    return f


def _grid_params(lo: np.ndarray, hi: np.ndarray, n_bits: int):
    """float16 (scale, offset) pairs whose grids cover [lo, hi] group-wise."""
    if np.any(np.abs(lo) > 6e4) or np.any(np.abs(hi) > 6e4):
        raise ValueError("weights exceed float16 range")
    levels = 2**n_bits - 1
    zeros = _f16_floor(lo)
    # a constant group whose value is exact in float16 gets a zero step
    scales = _f16_ceil((hi - zeros.astype(np.float64)) / levels)
    return scales, zeros


def _grid_round(vals, scales, zeros, n_bits):
    s = scales.astype(np.float64)
    z = zeros.astype(np.float64)
    safe = np.where(s > 0, s, 1.0)
    q = np.rint((vals - z) / safe)
    q = np.where(s > 0, q, 0.0)
    return np.clip(q, 0, 2**n_bits - 1).astype(np.uint32)


def _check_grid_args(w, n_bits, group_size):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"expected a 2-D weight matrix, got shape {w.shape}")
    if n_bits not in GRID_BITS:
        raise ValueError(f"n_bits must be in 2..8, got {n_bits}")
    if group_size < 1:
        raise ValueError("group_size must be positive")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    return w


def quantize_rtn(w, n_bits: int, group_size: int = 128) -> QuantizedTensor:
    """Round every weight to the nearest level of its group's min/max grid."""
    w = _check_grid_args(w, n_bits, group_size)
    flat = w.ravel()
    n_groups = -(-flat.size // group_size)
    padded = np.full(n_groups * group_size, np.nan)
    padded[: flat.size] = flat
    groups = padded.reshape(n_groups, group_size)
    scales, zeros = _grid_params(np.nanmin(groups, axis=1), np.nanmax(groups, axis=1), n_bits)
    gid = np.arange(flat.size) // group_size
    idx = _grid_round(flat, scales[gid], zeros[gid], n_bits)
    return QuantizedTensor("rtn", n_bits, group_size, w.shape, idx, scales, zeros)


def _as_rows(acts) -> np.ndarray:
    x = getattr(acts, "x", acts)
    return np.asarray(x, dtype=np.float64)


def quantize_greedy(w, acts, n_bits: int, group_size: int = 128) -> QuantizedTensor:
    """Row-sequential quantization with error feedback through the input Gram matrix.

    ``w`` maps inputs to outputs as ``x @ w``; rows of ``w`` are input features.
    Each row is rounded onto its groups' grids and the rounding error is spread
    over the rows not yet quantized, weighted by the upper Cholesky factor of
    the inverse damped Gram matrix ``(X^T X + delta I)^-1``, ``delta`` being
    ``GREEDY_DAMPING`` of the mean diagonal. Group grids are fixed when
    the first row touching the group is reached, from the compensated values.
    """
    w = _check_grid_args(w, n_bits, group_size)
    x = _as_rows(acts)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != w.shape[0]:
        raise ValueError(f"activations of shape {x.shape} do not match weight rows {w.shape[0]}")
    gram = x.T @ x
    if not np.any(gram) or np.trace(gram) <= 0:
        raise ValueError("degenerate calibration: activations are all zero")
    mean_diag = float(np.trace(gram)) / gram.shape[0]
    try:
        chol, _ = damped_cholesky(gram, [GREEDY_DAMPING * mean_diag, 10 * GREEDY_DAMPING * mean_diag])
    except CholeskyFailure as exc:
        raise ValueError(f"singular Gram matrix after damping: {exc}") from exc
    d_in, d_out = w.shape
    eye = np.eye(d_in)
    chol_inv = scipy.linalg.solve_triangular(chol, eye, lower=True)
    hinv = chol_inv.T @ chol_inv
    upper = np.linalg.cholesky(hinv).T

    work = w.copy()
    numel = w.size
    n_groups = -(-numel // group_size)
    scales = np.zeros(n_groups, dtype=np.float16)
    zeros = np.zeros(n_groups, dtype=np.float16)
    ready = np.zeros(n_groups, dtype=bool)
    idx = np.zeros(numel, dtype=np.uint32)
    flat = work.reshape(-1)  # view
    for j in range(d_in):
        start, stop = j * d_out, (j + 1) * d_out
        g0, g1 = start // group_size, (stop - 1) // group_size
        for g in range(g0, g1 + 1):
            if not ready[g]:
                seg = flat[g * group_size : min((g + 1) * group_size, numel)]
                s, z = _grid_params(np.array([seg.min()]), np.array([seg.max()]), n_bits)
                scales[g], zeros[g] = s[0], z[0]
                ready[g] = True
        gid = np.arange(start, stop) // group_size
        row = work[j].copy()
        q = _grid_round(row, scales[gid], zeros[gid], n_bits)
        idx[start:stop] = q
        deq = zeros[gid].astype(np.float64) + q * scales[gid].astype(np.float64)
        err = (row - deq) / upper[j, j]
        if j + 1 < d_in:
            work[j + 1 :] -= np.outer(upper[j, j + 1 :], err)
    return QuantizedTensor("greedy", n_bits, group_size, w.shape, idx, scales, zeros)


# --------------------------------------------------------------------------- VQ


def _nearest(vectors: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(vectors**2, axis=1)[:, None]
        - 2.0 * vectors @ centers.T
        + np.sum(centers**2, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)


def _kmeans(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = data.shape[0]
    centers = np.empty((k, data.shape[1]))
    centers[0] = data[rng.integers(m)]
    closest = np.sum((data - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            pick = int(rng.integers(m))
        else:
            pick = int(rng.choice(m, p=closest / total))
        centers[c] = data[pick]
        closest = np.minimum(closest, np.sum((data - centers[c]) ** 2, axis=1))

    for _ in range(KMEANS_MAX_ITER):
        assign = _nearest(data, centers)
        new = np.zeros_like(centers)
        counts = np.bincount(assign, minlength=k)
        np.add.at(new, assign, data)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        for c in np.flatnonzero(~nonempty):
            # split the largest cluster: move the empty center onto its worst-fit member
            big = int(np.argmax(counts))
            members = np.flatnonzero(assign == big)
            far = members[np.argmax(np.sum((data[members] - new[big]) ** 2, axis=1))]
            new[c] = data[far]
            assign[far] = c
            counts[big] -= 1
            counts[c] = 1
        shift = np.linalg.norm(new - centers)
        scale = max(np.linalg.norm(centers), 1e-30)
        centers = new
        if shift / scale <= KMEANS_TOL:
            break
    return centers


def quantize_vq(w, n_bits: int, vec_dim: int, seed: int = 0) -> QuantizedTensor:
    """Map each ``vec_dim``-vector of the flattened tensor to a learned codebook row.

    The codebook has ``2**(n_bits*vec_dim)`` entries. When the tensor has no
    more distinct vectors than that, the codebook is the distinct vectors padded
    with duplicates; otherwise it comes from seeded k-means++ / Lloyd iterations.
    The tensor is zero-padded to a whole number of vectors.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"expected a 2-D weight matrix, got shape {w.shape}")
    if n_bits < 1 or vec_dim < 1 or n_bits * vec_dim > 16:
        raise ValueError("vq requires n_bits * vec_dim <= 16")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    k = 2 ** (n_bits * vec_dim)
    flat = w.ravel()
    m = -(-flat.size // vec_dim)
    padded = np.zeros(m * vec_dim)
    padded[: flat.size] = flat
    vectors = padded.reshape(m, vec_dim)

    distinct = np.unique(vectors.astype(np.float16), axis=0)
    if distinct.shape[0] <= k:
        entries = np.concatenate(
            [distinct, np.repeat(distinct[:1], k - distinct.shape[0], axis=0)]
        ).astype(np.float16)
    else:
        rng = np.random.default_rng(seed)
        entries = _kmeans(vectors, k, rng).astype(np.float16)
    idx = _nearest(vectors, entries.astype(np.float64)).astype(np.uint32)
    book = Codebook(entries, n_bits, vec_dim)
    return QuantizedTensor("vq", n_bits, vec_dim, w.shape, idx, codebook=book)


# --------------------------------------------------------------------------- decode / accounting


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    idx = np.asarray(qt.indices)
    if qt.scheme == "vq":
        m = -(-qt.numel // qt.group_size)
        if idx.size != m or (idx.size and idx.max() >= qt.codebook.size):
            raise ValueError("corrupt index stream")
        vecs = qt.codebook.entries.astype(np.float64)[idx]
        return vecs.ravel()[: qt.numel].reshape(qt.shape)
    if qt.scheme not in ("rtn", "greedy"):
        raise ValueError(f"unknown scheme {qt.scheme!r}")
    if idx.size != qt.numel or (idx.size and idx.max() >= 2**qt.n_bits):
        raise ValueError("corrupt index stream")
    gid = np.arange(qt.numel) // qt.group_size
    vals = qt.zeros.astype(np.float64)[gid] + idx * qt.scales.astype(np.float64)[gid]
    return vals.reshape(qt.shape)


@dataclass(frozen=True)
class BitBreakdown:
    index_bits: int
    overhead_bits: int
    n_weights: int
    codebook_larger_than_tensor: bool

    @property
    def total_bits(self) -> int:
        return self.index_bits + self.overhead_bits

    @property
    def bits_per_weight(self) -> Fraction:
        return Fraction(self.index_bits + self.overhead_bits, self.n_weights)


def bit_breakdown(qt: QuantizedTensor, include_overhead: bool = True) -> BitBreakdown:
    if qt.scheme == "vq":
        n_vec = -(-qt.numel // qt.group_size)
        index_bits = n_vec * qt.index_width
        overhead = qt.codebook.size * qt.group_size * PARAM_BITS
    else:
        index_bits = qt.numel * qt.n_bits
        overhead = qt.n_groups * 2 * PARAM_BITS
    return BitBreakdown(
        index_bits,
        overhead if include_overhead else 0,
        qt.numel,
        qt.scheme == "vq" and overhead > qt.numel * PARAM_BITS,
    )


def effective_bits(qt: QuantizedTensor, include_overhead: bool = True) -> float:
    """Stored bits per weight, index stream plus amortized parameters."""
    return float(bit_breakdown(qt, include_overhead).bits_per_weight)


def quantize(w, scheme: str, n_bits: int, group_size: int = 128, acts=None, seed: int = 0):
    """Dispatch to one of the three schemes."""
    if scheme == "rtn":
        return quantize_rtn(w, n_bits, group_size)
    if scheme == "greedy":
        if acts is None:
            raise ValueError("greedy quantization needs calibration activations")
        return quantize_greedy(w, acts, n_bits, group_size)
    if scheme == "vq":
        return quantize_vq(w, n_bits, group_size, seed=seed)
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


# --------------------------------------------------------------------------- packing


def pack_indices(indices: np.ndarray, width: int) -> bytes:
    """Little-endian bit packing, ``width`` bits per index."""
    idx = np.asarray(indices, dtype=np.uint64)
    bits = ((idx[:, None] >> np.arange(width, dtype=np.uint64)) & 1).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def unpack_indices(buf: bytes, count: int, width: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    if bits.size < count * width:
        raise ValueError("corrupt index stream: too short")
    bits = bits[: count * width].reshape(count, width).astype(np.uint64)
    return (bits << np.arange(width, dtype=np.uint64)).sum(axis=1).astype(np.uint32)
