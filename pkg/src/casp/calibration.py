"""Calibration token sets: the ``.casptok`` file format and a synthetic generator.

File layout (little-endian): ``u32 count``, ``u32 seq_len``, then
``count * seq_len`` ``u32`` token ids, sequence-major.

The synthetic "language" mixes three sources. Each sequence opens with a
block of vision tokens drawn from a reserved id range at the top of the
vocabulary: a header token naming one of several "images", then patch tokens
that repeat the header's favourite patch id with probability ``patch_focus``
and are otherwise uniform over the patch ids. Text tokens after the block come
from a per-sequence topic (Zipf-distributed over a topic-specific permutation)
or, with probability ``copy_prob``, from a fixed permutation of the text token
two positions back. Text prediction needs positional attention; patch
prediction needs only a look back at the header.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import TEXT, VISION

_HEADER = struct.Struct("<II")


def _vision_ids(vocab_size: int):
    """Header ids (lower half of the vision range, at least one) and patch ids (the rest)."""
    ids = np.arange(vision_start(vocab_size), vocab_size)
    n_head = max(1, ids.size // 2)
    if ids.size < 2:
        return ids, ids
    return ids[:n_head], ids[n_head:]


def vision_start(vocab_size: int) -> int:
    """First vision token id; the top eighth of the vocabulary (at least one id) is vision."""
    return vocab_size - max(1, vocab_size // 8)


@dataclass(frozen=True, eq=False)
class CalibrationSet:
    sequences: np.ndarray  # (count, seq_len) uint32
    token_kinds: np.ndarray | None = None  # (count, seq_len) uint8, TEXT / VISION

    def __post_init__(self):
        seqs = np.asarray(self.sequences)
        if seqs.ndim != 2:
            raise ValueError("sequences must be a (count, seq_len) array")
        object.__setattr__(self, "sequences", seqs.astype(np.uint32))

    @property
    def seq_len(self) -> int:
        return self.sequences.shape[1]

    @property
    def sample_count(self) -> int:
        return self.sequences.shape[0]

    def check_vocab(self, vocab_size: int) -> None:
        if self.sequences.size and int(self.sequences.max()) >= vocab_size:
            raise ValueError("token id out of vocabulary")

    def with_kinds(self, vocab_size: int) -> "CalibrationSet":
        kinds = (self.sequences >= vision_start(vocab_size)).astype(np.uint8)
        return CalibrationSet(self.sequences, kinds)

    def split(self, n: int) -> tuple:
        kinds = self.token_kinds
        head = CalibrationSet(self.sequences[:n], None if kinds is None else kinds[:n])
        tail = CalibrationSet(self.sequences[n:], None if kinds is None else kinds[n:])
        return head, tail


def save_calibration(calib: CalibrationSet, path) -> None:
    seqs = np.ascontiguousarray(calib.sequences, dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*seqs.shape))
        fh.write(seqs.tobytes())


def load_calibration(path, vocab_size: int | None = None) -> CalibrationSet:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError("truncated calibration file")
    count, seq_len = _HEADER.unpack_from(data)
    body = data[_HEADER.size :]
    if len(body) != 4 * count * seq_len:
        raise ValueError(
            f"calibration payload is {len(body)} bytes, header declares {4 * count * seq_len}"
        )
    seqs = np.frombuffer(body, dtype="<u4").reshape(count, seq_len).astype(np.uint32)
    calib = CalibrationSet(seqs)
    if vocab_size is not None:
        calib.check_vocab(vocab_size)
        calib = calib.with_kinds(vocab_size)
    return calib


@dataclass(frozen=True)
class SyntheticLanguage:
    vocab_size: int = 64
    n_topics: int = 4
    zipf_exponent: float = 1.1
    copy_prob: float = 0.5
    patch_focus: float = 0.5
    language_seed: int = 0

    def tables(self):
        n_text = vision_start(self.vocab_size)
        rng = np.random.default_rng(self.language_seed)
        ranks = np.arange(1, n_text + 1, dtype=np.float64) ** -self.zipf_exponent
        topic_probs = np.empty((self.n_topics, n_text))
        for k in range(self.n_topics):
            topic_probs[k, rng.permutation(n_text)] = ranks / ranks.sum()
        copy_map = rng.permutation(n_text)
        return n_text, topic_probs, copy_map


def synthetic_calibration(
    count: int,
    seq_len: int,
    vision_ratio=0.0,
    seed: int = 0,
    language: SyntheticLanguage | None = None,
) -> CalibrationSet:
    """Seeded token sequences; ``vision_ratio`` may be a float or one value per sequence."""
    language = language or SyntheticLanguage()
    if count < 1 or seq_len < 1:
        raise ValueError("count and seq_len must be positive")
    ratios = np.broadcast_to(np.asarray(vision_ratio, dtype=np.float64), (count,))
    if np.any(ratios < 0) or np.any(ratios >= 1):
        raise ValueError("vision ratio must lie in [0, 1)")
    n_text, topic_probs, copy_map = language.tables()
    headers, patches = _vision_ids(language.vocab_size)
    rng = np.random.default_rng(seed)
    seqs = np.empty((count, seq_len), dtype=np.uint32)
    kinds = np.empty((count, seq_len), dtype=np.uint8)
    cdf = np.cumsum(topic_probs, axis=1)
    for s in range(count):
        n_vis = int(round(ratios[s] * seq_len))
        topic = rng.integers(language.n_topics)
        u = rng.random(seq_len)
        u2 = rng.random(seq_len)
        image = rng.integers(headers.size)
        patch_draw = rng.integers(patches.size, size=seq_len)
        for t in range(seq_len):
            if t < n_vis:
                if t == 0:
                    seqs[s, t] = headers[image]
                elif u[t] < language.patch_focus:
                    seqs[s, t] = patches[image % patches.size]
                else:
                    seqs[s, t] = patches[patch_draw[t]]
                kinds[s, t] = VISION
                continue
            kinds[s, t] = TEXT
            if t - 2 >= n_vis and u[t] < language.copy_prob:
                seqs[s, t] = copy_map[seqs[s, t - 2]]
            else:
                seqs[s, t] = min(int(np.searchsorted(cdf[topic], u2[t], side="right")), n_text - 1)
    return CalibrationSet(seqs, kinds)


def training_batches(
    batch: int,
    seq_len: int,
    ratios=(0.0, 0.25, 0.5, 0.75),
    seed: int = 0,
    language: SyntheticLanguage | None = None,
):
    """Callable ``step -> tokens`` drawing a fresh mixed-ratio batch per step."""
    ratios = np.asarray(ratios, dtype=np.float64)

    def draw(step: int) -> np.ndarray:
        rng = np.random.default_rng([seed, step])
        r = ratios[rng.integers(len(ratios), size=batch)]
        return synthetic_calibration(
            batch, seq_len, r, seed=int(rng.integers(2**31)), language=language
        ).sequences.astype(np.int64)

    return draw
