"""Connectionist temporal classification: loss, decoding and error metrics.

The loss marginalizes over every frame-level path that collapses (merge
repeats, then drop blanks) to the target label sequence, via the forward
algorithm on the blank-interleaved extended label in log space. The gradient
with respect to the logits is the fused softmax-minus-posterior form obtained
from the forward/backward lattice, so no per-frame probability ever gets
inverted. Blank is always the last class index. Infeasible alignments (too
few frames for the label) raise a typed error instead of returning infinity.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import CtcInfeasibleError, ShapeError
from .tensor import Tensor, _acc

NEG_INF = -np.inf


def _extended_label(labels, n_classes: int, blank: int):
    labels = [int(s) for s in labels]
    for s in labels:
        if not 0 <= s < blank:
            raise ValueError(
                f"label symbol {s} out of range [0, {blank}) (blank={blank})")
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.intp)
    ext[1::2] = labels
    return labels, ext


def min_frames(labels) -> int:
    """Smallest T that can emit the label: length plus one blank per repeat."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _log_softmax(u: np.ndarray) -> np.ndarray:
    shifted = u - u.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _lattice(log_probs: np.ndarray, ext: np.ndarray):
    """Forward/backward log recursions over the extended label."""
    T = log_probs.shape[0]
    S = ext.shape[0]
    # a position may skip the preceding blank when it is a label slot that
    # differs from the label two slots back (ext[0] is always the blank)
    skip = np.zeros(S, dtype=bool)
    for s in range(2, S):
        skip[s] = ext[s] != ext[0] and ext[s] != ext[s - 2]

    lp_ext = log_probs[:, ext]  # [T, S]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp_ext[0, 0]
    if S > 1:
        alpha[0, 1] = lp_ext[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        stay = prev
        step = np.full(S, NEG_INF)
        step[1:] = prev[:-1]
        acc = np.logaddexp(stay, step)
        jump = np.full(S, NEG_INF)
        jump[2:] = prev[:-2]
        acc = np.where(skip, np.logaddexp(acc, jump), acc)
        alpha[t] = acc + lp_ext[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + lp_ext[t + 1]
        stay = nxt
        step = np.full(S, NEG_INF)
        step[:-1] = nxt[1:]
        acc = np.logaddexp(stay, step)
        jump = np.full(S, NEG_INF)
        jump[:-2] = np.where(skip[2:], nxt[2:], NEG_INF)
        acc = np.logaddexp(acc, jump)
        beta[t] = acc

    if S > 1:
        log_p = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    else:
        log_p = alpha[T - 1, 0]
    return alpha, beta, log_p, lp_ext


def ctc_loss(logits, labels) -> Tensor:
    """Negative log-likelihood of the label sequence under the logits.

    ``logits`` is a [T, K+1] Tensor (or array, for a non-differentiable
    evaluation); class K is the blank. The lattice runs in float64 whatever
    the graph dtype; the loss node and gradient are cast back.
    """
    is_node = isinstance(logits, Tensor)
    u = logits.data if is_node else np.asarray(logits)
    if u.ndim != 2 or u.shape[1] < 2:
        raise ShapeError(f"logits must be [T, K+1] with K >= 1, got {u.shape}")
    T, C = u.shape
    blank = C - 1
    labels, ext = _extended_label(labels, C, blank)
    need = min_frames(labels)
    if T < need:
        raise CtcInfeasibleError(
            f"label of length {len(labels)} needs at least {need} frames, "
            f"got {T}")

    lsm = _log_softmax(u.astype(np.float64))
    alpha, beta, log_p, _ = _lattice(lsm, ext)
    loss_val = -log_p

    if not is_node:
        return Tensor(np.asarray(loss_val))

    # dL/du = softmax(u) - per-class posterior occupancy
    with np.errstate(invalid="ignore"):
        gamma = np.exp(alpha + beta - log_p)  # [T, S]
    occupancy = np.zeros((T, C))
    np.add.at(occupancy.T, ext, gamma.T)
    grad = (np.exp(lsm) - occupancy).astype(u.dtype)

    out = Tensor._result(np.asarray(loss_val, dtype=u.dtype), (logits,), None)

    def bwd():
        _acc(logits, grad * out.grad)

    out._backward = bwd
    return out


def collapse(path, blank: int):
    """CTC collapse: merge consecutive repeats, then remove blanks."""
    out = []
    prev = None
    for s in path:
        if s != prev:
            out.append(s)
        prev = s
    return [s for s in out if s != blank]


def ctc_brute_force(probs: np.ndarray, labels) -> float:
    """Label likelihood by explicit enumeration of all (K+1)^T paths.

    Exponential; refuses T > 10. Test oracle for ctc_loss.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ShapeError(f"probs must be [T, K+1], got {probs.shape}")
    T, C = probs.shape
    if T > 10:
        raise ValueError(f"brute force enumeration refused for T={T} > 10")
    blank = C - 1
    target = [int(s) for s in labels]
    total = 0.0
    for path in itertools.product(range(C), repeat=T):
        if collapse(path, blank) == target:
            p = 1.0
            for t, s in enumerate(path):
                p *= probs[t, s]
            total += p
    return total


def best_path_decode(logits):
    """Per-frame argmax then CTC collapse; ties break toward lower index."""
    u = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if u.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got {u.shape}")
    blank = u.shape[1] - 1
    return collapse(np.argmax(u, axis=1).tolist(), blank)


def levenshtein(a, b) -> int:
    """Minimal number of unit-cost insertions, deletions and substitutions."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, sa in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, sb in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1,            # delete
                         cur[j - 1] + 1,         # insert
                         prev[j - 1] + (sa != sb))  # substitute / match
        prev = cur
    return prev[len(b)]


def per(refs, hyps) -> float:
    """Total edit distance over total reference length; may exceed 1.0."""
    refs, hyps = list(refs), list(hyps)
    if len(refs) != len(hyps):
        raise ValueError(
            f"got {len(refs)} references but {len(hyps)} hypotheses")
    total_len = sum(len(r) for r in refs)
    if total_len == 0:
        raise ValueError("total reference length is zero")
    total_dist = sum(levenshtein(r, h) for r, h in zip(refs, hyps))
    return total_dist / total_len
