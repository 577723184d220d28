"""Datasets: container, binary file format, folding, subsets and cycling.

File format (little-endian, magic "LDRSEQ1"):

    7s   magic, "LDRSEQ" + one version digit
    u32  class count, then per class: u16 length + utf-8 name
    u32  metadata JSON length + bytes (feature-pipeline parameters)
    u32  feature width
    u32  example count
    per example:
        u16 id length + utf-8 id
        u32 frame count T
        u8  has_labels; if 1: u32 label count + u32 label indices
        T * width float32 features, row-major
    8 bytes: first half of SHA-256 over everything before it

The folding-table text format is one "source target" (or "source DROP") pair
per line, '#' starts a comment. The table content ships as configuration;
the code only enforces totality and, where the caller asks, the expected
number of target classes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ChecksumError, DataError, SubsetInfeasibleError, VersionError
from .tensor import Rng

MAGIC_PREFIX = b"LDRSEQ"
VERSION = 1
DROP = "DROP"


@dataclass
class SequenceExample:
    features: np.ndarray       # [T, D] float32
    labels: list | None = None  # class indices; None for unlabeled
    id: str = ""

    def __post_init__(self):
        if self.labels is not None and len(self.labels) == 0:
            raise DataError(f"example {self.id!r}: empty label sequence "
                            "(use None for unlabeled)")


@dataclass
class Dataset:
    examples: list
    class_names: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        k = len(self.class_names)
        widths = {ex.features.shape[1] for ex in self.examples}
        if len(widths) > 1:
            raise DataError(f"inconsistent feature widths {sorted(widths)}")
        for ex in self.examples:
            for s in ex.labels or []:
                if not 0 <= s < k:
                    raise DataError(
                        f"example {ex.id!r}: label {s} out of range [0, {k})")

    def __len__(self):
        return len(self.examples)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def feature_dim(self) -> int:
        if not self.examples:
            raise DataError("empty dataset has no feature width")
        return int(self.examples[0].features.shape[1])

    def labeled(self) -> "Dataset":
        return Dataset([ex for ex in self.examples if ex.labels is not None],
                       self.class_names, dict(self.metadata))


# -- phoneme folding ------------------------------------------------------------


@dataclass
class FoldingTable:
    """Maps source symbols to target class symbols; None marks dropped."""

    mapping: dict

    @property
    def targets(self) -> list:
        return sorted({t for t in self.mapping.values() if t is not None})

    @classmethod
    def load(cls, path, expected_targets: int | None = None) -> "FoldingTable":
        mapping = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise DataError(
                        f"{path}:{lineno}: expected 'source target' or "
                        f"'source DROP', got {raw.rstrip()!r}")
                source, target = parts
                if source in mapping:
                    raise DataError(f"{path}:{lineno}: duplicate source "
                                    f"{source!r}")
                mapping[source] = None if target == DROP else target
        table = cls(mapping=mapping)
        if expected_targets is not None and \
                len(table.targets) != expected_targets:
            raise DataError(
                f"{path}: folding table yields {len(table.targets)} target "
                f"classes, expected {expected_targets}")
        return table


def fold_symbols(symbols, table: FoldingTable) -> list:
    """Map each source symbol through the table; dropped symbols vanish."""
    out = []
    for s in symbols:
        if s not in table.mapping:
            raise DataError(f"unknown phone symbol {s!r} (not in folding table)")
        target = table.mapping[s]
        if target is not None:
            out.append(target)
    return out


# -- semi-supervised subset construction ----------------------------------------


def _class_counts(examples, k: int) -> np.ndarray:
    counts = np.zeros(k, dtype=np.int64)
    for ex in examples:
        for s in ex.labels:
            counts[s] += 1
    return counts


def make_supervised_subset(d: Dataset, fraction: float, min_count: int,
                           rng: Rng, max_retries: int = 1000) -> Dataset:
    """Uniform sample of round(fraction * N) examples covering every class.

    Draws are redrawn (bounded) until every class appears at least
    ``min_count`` times in the drawn labels; infeasibility (the full dataset
    itself lacks coverage) is an error. Deterministic given the rng.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if min_count < 0:
        raise ValueError(f"min_count must be >= 0, got {min_count}")
    for ex in d.examples:
        if ex.labels is None:
            raise DataError(f"example {ex.id!r} is unlabeled; the supervised "
                            "subset needs labels")
    full_counts = _class_counts(d.examples, d.n_classes)
    if np.any(full_counts < min_count):
        short = [d.class_names[i] for i in np.nonzero(full_counts < min_count)[0]]
        raise SubsetInfeasibleError(
            f"classes {short} occur fewer than {min_count} times in the "
            "full dataset")
    n = len(d.examples)
    target = int(round(fraction * n))
    target = max(1, target)
    for _ in range(max_retries):
        order = rng.permutation(n)
        chosen = [d.examples[i] for i in order[:target]]
        if np.all(_class_counts(chosen, d.n_classes) >= min_count):
            return Dataset(chosen, d.class_names, dict(d.metadata))
    raise SubsetInfeasibleError(
        f"could not cover every class >= {min_count} times with "
        f"{target}/{n} examples after {max_retries} draws")


class PairCycler:
    """Pairs one shuffled pass over the unlabeled set with a cycled labeled set.

    Each epoch yields ceil(|U| / batch_size) steps; every step carries one
    unlabeled batch (a slice of the shuffled pass) and an equally sized
    labeled batch taken from an endless shuffled repetition of the labeled
    set (reshuffled at every wrap, cycling state persists across epochs).
    """

    def __init__(self, supervised: Dataset, unsupervised: Dataset,
                 batch_size: int, rng: Rng):
        if len(supervised) == 0 or len(unsupervised) == 0:
            raise DataError("cycling needs non-empty labeled and unlabeled sets")
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        self.sup = supervised.examples
        self.unsup = unsupervised.examples
        self.batch_size = batch_size
        self.rng = rng
        self._sup_order = []
        self._sup_pos = 0

    def _next_labeled(self, count: int) -> list:
        out = []
        while len(out) < count:
            if self._sup_pos >= len(self._sup_order):
                self._sup_order = list(self.rng.permutation(len(self.sup)))
                self._sup_pos = 0
            out.append(self.sup[self._sup_order[self._sup_pos]])
            self._sup_pos += 1
        return out

    def steps_per_epoch(self) -> int:
        return -(-len(self.unsup) // self.batch_size)

    def epoch(self):
        """Yields (labeled batch, unlabeled batch) pairs for one epoch."""
        order = self.rng.permutation(len(self.unsup))
        for lo in range(0, len(order), self.batch_size):
            unl = [self.unsup[i] for i in order[lo: lo + self.batch_size]]
            yield self._next_labeled(len(unl)), unl


# -- synthetic corpus ------------------------------------------------------------


def synth_dataset(k_classes: int, n_sequences: int, len_range=(20, 40),
                  proto_dim: int = 39, noise_level: float = 0.3,
                  seed: int = 0) -> Dataset:
    """Deterministic toy corpus: class prototypes rendered as frame runs.

    Each sequence draws a target frame count from len_range, then emits
    symbols (never repeating the previous one) as runs of 3-8 frames of the
    class prototype plus feature noise. Fully labeled.
    """
    if k_classes < 2:
        raise ValueError(f"need at least 2 classes, got {k_classes}")
    if n_sequences < 1:
        raise ValueError(f"need at least 1 sequence, got {n_sequences}")
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad frame-length range {len_range}")
    rng = Rng(seed)
    protos = rng.normal((k_classes, proto_dim), 1.0)
    examples = []
    for i in range(n_sequences):
        target = rng.integers(lo, hi + 1)
        labels = []
        frames = []
        prev = -1
        while len(frames) < target:
            sym = rng.integers(0, k_classes)
            while sym == prev:
                sym = rng.integers(0, k_classes)
            run = min(rng.integers(3, 9), target - len(frames))
            labels.append(sym)
            prev = sym
            for _ in range(run):
                frame = protos[sym]
                if noise_level > 0:
                    frame = frame + rng.normal((proto_dim,), noise_level)
                frames.append(frame)
        features = np.asarray(frames, dtype=np.float32)
        examples.append(SequenceExample(features=features, labels=labels,
                                        id=f"synth-{i:05d}"))
    metadata = {"generator": "synthetic-prototypes", "seed": seed,
                "k_classes": k_classes, "noise_level": noise_level,
                "len_range": [lo, hi]}
    return Dataset(examples, [f"c{i}" for i in range(k_classes)], metadata)


def synth_prototypes(k_classes: int, proto_dim: int, seed: int) -> np.ndarray:
    """The prototype matrix a synth_dataset call with this seed would use."""
    return Rng(seed).normal((k_classes, proto_dim), 1.0)


# -- binary serialization ---------------------------------------------------------


def _checksum(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()[:8]


def save_dataset(d: Dataset, path):
    parts = [MAGIC_PREFIX + str(VERSION).encode()]

    def put(fmt, *vals):
        parts.append(struct.pack("<" + fmt, *vals))

    def put_str(s, short=False):
        b = s.encode("utf-8")
        put("H" if short else "I", len(b))
        parts.append(b)

    put("I", len(d.class_names))
    for name in d.class_names:
        put_str(name, short=True)
    meta = json.dumps(d.metadata, sort_keys=True).encode("utf-8")
    put("I", len(meta))
    parts.append(meta)
    width = d.feature_dim if d.examples else 0
    put("I", width)
    put("I", len(d.examples))
    for ex in d.examples:
        put_str(ex.id, short=True)
        feats = np.ascontiguousarray(ex.features, dtype="<f4")
        put("I", feats.shape[0])
        if ex.labels is None:
            put("B", 0)
        else:
            put("B", 1)
            put("I", len(ex.labels))
            parts.append(np.asarray(ex.labels, dtype="<u4").tobytes())
        parts.append(feats.tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(_checksum(payload))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 15:
        raise DataError(f"{path}: too short to be a dataset file")
    payload, stored = blob[:-8], blob[-8:]
    if payload[:6] != MAGIC_PREFIX:
        raise DataError(f"{path}: bad magic bytes, not a dataset file")
    version = payload[6:7].decode(errors="replace")
    if version != str(VERSION):
        raise VersionError(f"{path}: unsupported dataset version {version!r}")
    if _checksum(payload) != stored:
        raise ChecksumError(f"{path}: checksum mismatch (corrupt or truncated)")

    pos = 7

    def take(fmt):
        nonlocal pos
        size = struct.calcsize("<" + fmt)
        vals = struct.unpack_from("<" + fmt, payload, pos)
        pos += size
        return vals[0]

    def take_bytes(n):
        nonlocal pos
        out = payload[pos: pos + n]
        pos += n
        return out

    n_classes = take("I")
    class_names = []
    for _ in range(n_classes):
        class_names.append(take_bytes(take("H")).decode("utf-8"))
    metadata = json.loads(take_bytes(take("I")).decode("utf-8"))
    width = take("I")
    n_examples = take("I")
    examples = []
    for _ in range(n_examples):
        ex_id = take_bytes(take("H")).decode("utf-8")
        t = take("I")
        labels = None
        if take("B"):
            n_labels = take("I")
            labels = np.frombuffer(take_bytes(4 * n_labels),
                                   dtype="<u4").astype(int).tolist()
        feats = np.frombuffer(take_bytes(4 * t * width), dtype="<f4")
        feats = feats.reshape(t, width).copy()
        examples.append(SequenceExample(features=feats, labels=labels,
                                        id=ex_id))
    return Dataset(examples, class_names, metadata)


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Bit-exact comparison, used by round-trip tests."""
    if a.class_names != b.class_names or a.metadata != b.metadata:
        return False
    if len(a) != len(b):
        return False
    for ex_a, ex_b in zip(a.examples, b.examples):
        if ex_a.id != ex_b.id or ex_a.labels != ex_b.labels:
            return False
        if ex_a.features.shape != ex_b.features.shape:
            return False
        if not np.array_equal(
                ex_a.features.astype("<f4"), ex_b.features.astype("<f4")):
            return False
    return True


def split_dataset(d: Dataset, valid_fraction: float, rng: Rng):
    """Deterministic shuffled split into (train, valid)."""
    if not 0 < valid_fraction < 1:
        raise ValueError(f"valid_fraction must be in (0, 1), got {valid_fraction}")
    order = rng.permutation(len(d.examples))
    n_valid = max(1, int(round(valid_fraction * len(d.examples))))
    if n_valid >= len(d.examples):
        raise DataError("validation split would consume the whole dataset")
    valid_idx = set(order[:n_valid].tolist())
    train = [d.examples[i] for i in order[n_valid:]]
    valid = [d.examples[i] for i in sorted(valid_idx)]
    return (Dataset(train, d.class_names, dict(d.metadata)),
            Dataset(valid, d.class_names, dict(d.metadata)))
