"""Training loop: Adam updates, early stopping, checkpoints, metrics CSV.

One seeded Rng drives everything (parameter init, batch shuffling, noise), so
a (config, seed, datasets) triple fully determines every logged number. Wall
time is the one exception; with ``deterministic_timing`` the seconds column
records 0.0 so two identical runs write bit-identical CSV files.

Checkpoint format (little-endian, magic "LDRCKPT1"): 8-byte magic whose last
byte is the version digit, u32 JSON header length, JSON header (model config,
Adam hyperparameters and step count, rng state, metadata, parameter
manifest), then per parameter in manifest order the raw value buffer followed
by the float64 Adam moment buffers, and a trailing 8-byte SHA-256 prefix.
Metrics CSV columns: epoch, c_sup, c_dae, total, valid_per, seconds.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ctc import best_path_decode, levenshtein, per
from .data import Dataset, PairCycler
from .errors import (ChecksumError, DataError, NumericError, ShapeError,
                     VersionError)
from .ladder import (LadderConfig, encode, init_model, pad_batch,
                     semi_supervised_loss, sequence_logit_nodes)
from .layers import NoiseScheme
from .tensor import Rng

CKPT_MAGIC_PREFIX = b"LDRCKPT"
CKPT_VERSION = 1
EVAL_BATCH = 32  # fixed: batch grouping must not vary between evaluations
CSV_COLUMNS = ("epoch", "c_sup", "c_dae", "total", "valid_per", "seconds")


@dataclass
class TrainSettings:
    lr: float = 0.002
    batch_size: int = 16
    min_epochs: int = 100
    max_epochs: int = 500
    patience: int = 10
    seed: int = 1
    grad_clip: float = 0.0  # 0 disables
    deterministic_timing: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.min_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, min_epochs and patience must be >= 1")
        if self.max_epochs < self.min_epochs:
            raise ValueError("max_epochs must be >= min_epochs")


@dataclass
class AdamState:
    """First/second moments per parameter; moments always held in float64."""

    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, params, lr: float = 0.002) -> "AdamState":
        state = cls(lr=lr)
        for name, p in params.items():
            state.m[name] = np.zeros(p.shape, dtype=np.float64)
            state.v[name] = np.zeros(p.shape, dtype=np.float64)
        return state

    def copy(self) -> "AdamState":
        out = AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                        eps=self.eps, t=self.t)
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        return out


def adam_step(params, grads, state: AdamState):
    """One in-place Adam update; raises on non-finite gradients."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} for parameter "
                             f"{name} of shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; "
                               "training halted")
        g64 = g.astype(np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g64
        v *= state.beta2
        v += (1.0 - state.beta2) * g64 * g64
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= update.astype(p.data.dtype)
    return params, state


def clip_gradients(grads, max_norm: float):
    """Scale the whole gradient set so its global L2 norm is <= max_norm.

    Returns fresh arrays; the inputs may be shared with graph internals.
    """
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = total ** 0.5
    if norm > max_norm > 0:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return grads


@dataclass
class Checkpoint:
    config: LadderConfig
    params: dict            # name -> np.ndarray
    adam: AdamState
    rng_state: dict
    metadata: dict = field(default_factory=dict)


def config_to_dict(config: LadderConfig) -> dict:
    return {
        "input_dim": config.input_dim,
        "hidden": config.hidden,
        "n_classes": config.n_classes,
        "decoder": config.decoder,
        "noise_variant": config.noise.variant,
        "sigma": config.noise.sigma,
        "lambdas": list(config.lambdas),
        "sigma_layers": (list(config.sigma_layers)
                         if config.sigma_layers is not None else None),
        "combinator_hidden": config.combinator_hidden,
        "dtype": config.dtype,
    }


def config_from_dict(d: dict) -> LadderConfig:
    return LadderConfig(
        input_dim=int(d["input_dim"]), hidden=int(d["hidden"]),
        n_classes=int(d["n_classes"]), decoder=d["decoder"],
        noise=NoiseScheme(d["noise_variant"], float(d["sigma"])),
        lambdas=tuple(float(x) for x in d["lambdas"]),
        sigma_layers=(tuple(float(x) for x in d["sigma_layers"])
                      if d.get("sigma_layers") is not None else None),
        combinator_hidden=int(d.get("combinator_hidden", 4)),
        dtype=d.get("dtype", "float32"),
    )


def save_checkpoint(ckpt: Checkpoint, path):
    import hashlib

    manifest = [{"name": name, "shape": list(arr.shape),
                 "dtype": str(arr.dtype)}
                for name, arr in ckpt.params.items()]
    header = {
        "config": config_to_dict(ckpt.config),
        "adam": {"lr": ckpt.adam.lr, "beta1": ckpt.adam.beta1,
                 "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps,
                 "t": ckpt.adam.t},
        "rng_state": ckpt.rng_state,
        "metadata": ckpt.metadata,
        "params": manifest,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC_PREFIX + str(CKPT_VERSION).encode(),
             struct.pack("<I", len(head)), head]
    for name, arr in ckpt.params.items():
        parts.append(np.ascontiguousarray(arr).astype(arr.dtype).tobytes())
        parts.append(ckpt.adam.m[name].astype("<f8").tobytes())
        parts.append(ckpt.adam.v[name].astype("<f8").tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(hashlib.sha256(payload).digest()[:8])


def load_checkpoint(path) -> Checkpoint:
    import hashlib

    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20:
        raise DataError(f"{path}: too short to be a checkpoint")
    payload, stored = blob[:-8], blob[-8:]
    if payload[:7] != CKPT_MAGIC_PREFIX:
        raise DataError(f"{path}: bad magic bytes, not a checkpoint")
    version = payload[7:8].decode(errors="replace")
    if version != str(CKPT_VERSION):
        raise VersionError(f"{path}: unsupported checkpoint version {version!r}")
    if hashlib.sha256(payload).digest()[:8] != stored:
        raise ChecksumError(f"{path}: checksum mismatch (corrupt or truncated)")
    head_len = struct.unpack_from("<I", payload, 8)[0]
    header = json.loads(payload[12: 12 + head_len].decode("utf-8"))
    pos = 12 + head_len
    params = {}
    adam = AdamState(lr=header["adam"]["lr"], beta1=header["adam"]["beta1"],
                     beta2=header["adam"]["beta2"], eps=header["adam"]["eps"],
                     t=int(header["adam"]["t"]))
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        dtype = np.dtype(entry["dtype"])
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(payload[pos: pos + nbytes], dtype=dtype)
        params[entry["name"]] = arr.reshape(shape).copy()
        pos += nbytes
        for store in (adam.m, adam.v):
            buf = np.frombuffer(payload[pos: pos + count * 8], dtype="<f8")
            store[entry["name"]] = buf.reshape(shape).copy()
            pos += count * 8
    return Checkpoint(config=config_from_dict(header["config"]), params=params,
                      adam=adam, rng_state=header["rng_state"],
                      metadata=header["metadata"])


def model_from_arrays(config: LadderConfig, arrays: dict):
    """Rebuild (graph, params) and load stored values into the parameters."""
    graph, params = init_model(config, Rng(0))
    current = graph.parameters()
    if set(current) != set(arrays):
        missing = set(current) ^ set(arrays)
        raise DataError(f"parameter names do not match config: {sorted(missing)}")
    for name, p in current.items():
        arr = np.asarray(arrays[name], dtype=p.data.dtype)
        if arr.shape != p.shape:
            raise DataError(f"parameter {name}: stored shape {arr.shape} "
                            f"!= expected {p.shape}")
        p.data[...] = arr
    return graph, params


def evaluate_model(params, config: LadderConfig, dataset: Dataset):
    """Clean-pass best-path decoding; returns (PER, per-sequence distances)."""
    refs, hyps, distances = [], [], []
    examples = dataset.examples
    for lo in range(0, len(examples), EVAL_BATCH):
        chunk = examples[lo: lo + EVAL_BATCH]
        for ex in chunk:
            if ex.labels is None:
                raise DataError(f"example {ex.id!r} is unlabeled; evaluation "
                                "needs references")
        feats, lengths = pad_batch([ex.features for ex in chunk],
                                   config.np_dtype)
        trace = encode(feats, lengths, params, config, rng=None)
        for node, ex in zip(sequence_logit_nodes(trace, noisy=False), chunk):
            hyp = best_path_decode(node.data)
            refs.append(list(ex.labels))
            hyps.append(hyp)
            distances.append(levenshtein(ex.labels, hyp))
    return per(refs, hyps), distances


def evaluate(ckpt: Checkpoint, dataset: Dataset):
    """Evaluate a stored checkpoint on a fully labeled dataset."""
    _, params = model_from_arrays(ckpt.config, ckpt.params)
    return evaluate_model(params, ckpt.config, dataset)


def _format_row(row: dict) -> str:
    return ",".join([str(row["epoch"])]
                    + [repr(float(row[c])) for c in CSV_COLUMNS[1:]])


def train(config: LadderConfig, settings: TrainSettings, train_sup: Dataset,
          train_unsup: Dataset, valid: Dataset, out_dir,
          header_lines=()) -> tuple:
    """Semi-supervised training with early stopping on validation PER.

    Stops once at least ``min_epochs`` epochs ran and the validation PER has
    not improved for ``patience`` consecutive epochs (or at ``max_epochs``).
    The best-PER checkpoint is written to <out_dir>/checkpoint.bin every time
    it improves; metrics stream to <out_dir>/metrics.csv. Returns
    (best Checkpoint, list of per-epoch metric dicts).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if train_sup.feature_dim != config.input_dim:
        raise DataError(f"dataset width {train_sup.feature_dim} != "
                        f"config input_dim {config.input_dim}")
    if train_sup.n_classes != config.n_classes:
        raise DataError(f"dataset has {train_sup.n_classes} classes, config "
                        f"says {config.n_classes}")

    rng = Rng(settings.seed)
    graph, params = init_model(config, rng)
    adam = AdamState.fresh(graph.parameters(), lr=settings.lr)
    cycler = PairCycler(train_sup, train_unsup, settings.batch_size, rng)

    ckpt_path = out_dir / "checkpoint.bin"
    metrics_path = out_dir / "metrics.csv"
    metrics = []
    best_per = float("inf")
    best_ckpt = None
    since_improve = 0

    with open(metrics_path, "w", encoding="utf-8") as csv:
        for line in header_lines:
            csv.write(f"# {line}\n")
        csv.write(",".join(CSV_COLUMNS) + "\n")
        csv.flush()

        for epoch in range(1, settings.max_epochs + 1):
            t0 = time.monotonic()
            sums = {"c_sup": 0.0, "c_dae": 0.0, "total": 0.0}
            steps = 0
            for lab, unl in cycler.epoch():
                loss, comps = semi_supervised_loss(lab, unl, params, config,
                                                   rng)
                if not np.isfinite(comps["total"]):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}; training halted")
                grads = graph.backward(loss)
                if settings.grad_clip > 0:
                    clip_gradients(grads, settings.grad_clip)
                adam_step(graph.parameters(), grads, adam)
                for key in sums:
                    sums[key] += comps[key]
                steps += 1

            valid_per, _ = evaluate_model(params, config, valid)
            seconds = (0.0 if settings.deterministic_timing
                       else time.monotonic() - t0)
            row = {"epoch": epoch,
                   "c_sup": sums["c_sup"] / steps,
                   "c_dae": sums["c_dae"] / steps,
                   "total": sums["total"] / steps,
                   "valid_per": valid_per,
                   "seconds": seconds}
            metrics.append(row)
            csv.write(_format_row(row) + "\n")
            csv.flush()

            if valid_per < best_per:
                best_per = valid_per
                since_improve = 0
                best_ckpt = Checkpoint(
                    config=config,
                    params={n: p.data.copy()
                            for n, p in graph.parameters().items()},
                    adam=adam.copy(),
                    rng_state=rng.get_state(),
                    metadata={"epoch": epoch, "best_valid_per": best_per,
                              "seed": settings.seed},
                )
                save_checkpoint(best_ckpt, ckpt_path)
            else:
                since_improve += 1

            if epoch >= settings.min_epochs and since_improve >= settings.patience:
                break

    return best_ckpt, metrics
