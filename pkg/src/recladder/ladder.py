"""The recurrent ladder model: dual encoder pass, decoders and objectives.

The encoder is input -> GRU (tanh) -> dense softmax. Every batch is encoded
twice with shared weights: a clean pass (no corruption anywhere), whose
preactivations are the reconstruction targets and whose output drives
evaluation, and a noisy pass, which feeds the supervised cost and the
shortcut connections. The input is always corrupted on the noisy pass;
whether the hidden (recurrent) and output layers add fresh noise is governed
by the NoiseScheme.

Decoders run top-down and, for the recurrent variant, forward in time:
    u[l,t]    = V[l] zhat[l+1,t] (+ O[l] zhat[l,t-1]),
    zhat[l,t] = g(z_noisy[l,t], u[l,t]),
with the top layer fed by the noisy softmax output. The combinator g is a
small per-unit MLP on (shortcut, top-down, product), weights shared across
units and time steps.

The reconstruction cost normalizes both the clean targets and the
reconstructions per unit with batch statistics of the clean pass (mean/std
over batch and time, std floored), averages the squared error over units and
valid frames and weights each layer by its lambda. Batch statistics are
graph nodes, so their dependence on the parameters is differentiated.

Layer indexing everywhere: 0 = input, 1 = hidden GRU, 2 = softmax output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ctc import ctc_loss
from .errors import ShapeError
from .layers import (DenseParams, GruParams, GruStepper, NoiseScheme,
                     dense_forward)
from .tensor import (Graph, Rng, Tensor, add_rowvec, concat_cols, concat_rows,
                     gather_rows, gaussian, mul_colvec, mul_rowvec)

DECODERS = ("ND", "RD", "FFD")
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class LadderConfig:
    """Architecture and objective description; see module docstring."""

    input_dim: int
    hidden: int
    n_classes: int
    decoder: str = "RD"
    noise: NoiseScheme = field(default_factory=lambda: NoiseScheme("FFN", 0.3))
    lambdas: tuple = (1000.0, 10.0, 0.1)
    sigma_layers: tuple | None = None  # per-site override (input, hidden, out)
    combinator_hidden: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        if self.decoder not in DECODERS:
            raise ValueError(f"unknown decoder {self.decoder!r}")
        if len(self.lambdas) != 3:
            raise ValueError(f"need 3 cost weights, got {len(self.lambdas)}")
        if self.decoder == "ND" and any(l != 0 for l in self.lambdas):
            raise ValueError("ND (no decoder) requires all-zero lambdas")
        if min(self.input_dim, self.hidden) < 1 or self.n_classes < 2:
            raise ValueError("layer sizes must be positive, n_classes >= 2")
        if self.sigma_layers is not None and len(self.sigma_layers) != 3:
            raise ValueError("sigma_layers needs one value per layer (3)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32/float64, got {self.dtype}")
        if self.combinator_hidden < 1:
            raise ValueError("combinator_hidden must be >= 1")

    @property
    def output_dim(self) -> int:
        return self.n_classes + 1  # blank appended

    @property
    def layer_dims(self) -> tuple:
        return (self.input_dim, self.hidden, self.output_dim)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def sigma_at(self, layer: int) -> float:
        if self.sigma_layers is not None:
            return float(self.sigma_layers[layer])
        return self.noise.sigma


@dataclass
class CombinatorParams:
    """Per-unit MLP on (shortcut, top-down, product); shared across units."""

    W1: Tensor  # [hidden_width, 3]
    b1: Tensor  # [hidden_width]
    w2: Tensor  # [1, hidden_width]
    b2: Tensor  # [1]


@dataclass
class DecoderLayerParams:
    V: Tensor          # [n_l, n_above]
    O: Tensor | None   # [n_l, n_l]; None for the feed-forward decoder
    comb: CombinatorParams


@dataclass
class LadderParams:
    gru: GruParams
    out: DenseParams
    dec: list | None  # DecoderLayerParams per layer 0..2; None for ND


@dataclass
class EncoderTrace:
    """Per-layer, per-timestep nodes from one dual encoder pass.

    z[l][t] and z_noisy[l][t] are [B, n_l]; layer 0 holds the (corrupted)
    input itself. y/y_noisy are the softmax outputs. mask[b, t] flags real
    (non-padding) frames.
    """

    z: list          # 3 lists of per-t Tensors
    z_noisy: list
    y: list
    y_noisy: list
    mask: np.ndarray
    lengths: list

    @property
    def batch_size(self) -> int:
        return self.mask.shape[0]

    @property
    def n_steps(self) -> int:
        return self.mask.shape[1]

    def flat_mask(self) -> np.ndarray:
        # concat_rows over t stacks [B, n] blocks, so flatten time-major
        return self.mask.T.reshape(-1)

    def valid_frames(self) -> float:
        return float(self.mask.sum())


@dataclass
class NormStats:
    """Per-layer, per-unit mean and (floored) std of the clean preactivations."""

    mu: list  # Tensor [n_l] per layer
    s: list   # Tensor [n_l] per layer


def pad_batch(features_list, dtype):
    """Zero-pad [T_i, D] arrays to a common length; returns (array, lengths)."""
    lengths = [int(f.shape[0]) for f in features_list]
    if not lengths:
        raise ValueError("empty batch")
    width = features_list[0].shape[1]
    t_max = max(lengths)
    out = np.zeros((len(features_list), t_max, width), dtype=dtype)
    for i, f in enumerate(features_list):
        if f.ndim != 2 or f.shape[1] != width:
            raise ShapeError(f"feature widths differ: {f.shape} vs width {width}")
        out[i, : f.shape[0]] = f
    return out, lengths


def _batch_mask(lengths, t_max) -> np.ndarray:
    mask = np.zeros((len(lengths), t_max))
    for i, n in enumerate(lengths):
        mask[i, :n] = 1.0
    return mask


def encode(features: np.ndarray, lengths, params: LadderParams,
           config: LadderConfig, rng: Rng | None) -> EncoderTrace:
    """Dual clean/noisy encoder pass over a padded [B, T, D] batch.

    With ``rng=None`` only the clean pass runs and the noisy entries alias
    the clean ones (evaluation path). Otherwise the noisy pass runs in full,
    drawing, per time step: input noise, hidden noise (RN only), output
    noise. Zero-sigma sites add nothing and stay bit-identical to clean.
    """
    if features.ndim != 3 or features.shape[2] != config.input_dim:
        raise ShapeError(
            f"features {features.shape} do not match input_dim={config.input_dim}")
    dtype = config.np_dtype
    b, t_max, _ = features.shape
    mask = _batch_mask(lengths, t_max)

    xs = [Tensor(np.ascontiguousarray(features[:, t, :], dtype=dtype))
          for t in range(t_max)]

    stepper = GruStepper(params.gru)

    # clean pass
    z1, hs = [], []
    h = stepper.init_state(b, dtype)
    for x_t in xs:
        zc, h = stepper.step(x_t, h)
        z1.append(zc)
        hs.append(h)
    z2, ys = [], []
    for h_t in hs:
        z_t, y_t = dense_forward(h_t, params.out)
        z2.append(z_t)
        ys.append(y_t)

    if rng is None:
        return EncoderTrace(z=[xs, z1, z2], z_noisy=[xs, z1, z2],
                            y=ys, y_noisy=ys, mask=mask, lengths=list(lengths))

    # noisy pass (shared weights)
    sig_in, sig_hid, sig_out = (config.sigma_at(0), config.sigma_at(1),
                                config.sigma_at(2))
    hidden_scheme = config.noise.with_sigma(sig_hid)
    xs_n, z1_n, hs_n, z2_n, ys_n = [], [], [], [], []
    carry = stepper.init_state(b, dtype)
    for x_t in xs:
        x_n = x_t + gaussian(x_t.shape, sig_in, rng, dtype) if sig_in > 0 else x_t
        xs_n.append(x_n)
        zc_n, h_n, carry = stepper.step_noisy(x_n, carry, hidden_scheme, rng)
        z1_n.append(zc_n)
        hs_n.append(h_n)
    for h_t in hs_n:
        z_t, y_t = dense_forward(h_t, params.out,
                                 noise=(sig_out, rng) if sig_out > 0 else None)
        z2_n.append(z_t)
        ys_n.append(y_t)

    return EncoderTrace(z=[xs, z1, z2], z_noisy=[xs_n, z1_n, z2_n],
                        y=ys, y_noisy=ys_n, mask=mask, lengths=list(lengths))


def _combinator_apply(z_tilde: Tensor, u: Tensor, w1t: Tensor, b1: Tensor,
                      w2t: Tensor, b2: Tensor) -> Tensor:
    if z_tilde.shape != u.shape:
        raise ShapeError(
            f"combinator inputs differ: {z_tilde.shape} vs {u.shape}")
    b, n = z_tilde.shape
    m = b * n
    feats = concat_cols([
        z_tilde.reshape((m, 1)),
        u.reshape((m, 1)),
        (z_tilde * u).reshape((m, 1)),
    ])
    hid = add_rowvec(feats @ w1t, b1).tanh()
    out = add_rowvec(hid @ w2t, b2)
    return out.reshape((b, n))


def combinator(z_tilde: Tensor, u: Tensor, p: CombinatorParams) -> Tensor:
    """Merge shortcut and top-down values; one shared map applied per unit."""
    return _combinator_apply(z_tilde, u, p.W1.T, p.b1, p.w2.T, p.b2)


def _decode(trace: EncoderTrace, dec, recurrent: bool):
    b = trace.batch_size
    above = trace.y_noisy
    recons = [None, None, None]
    for layer in (2, 1, 0):
        pl = dec[layer]
        vt = pl.V.T
        ot = pl.O.T if (recurrent and pl.O is not None) else None
        w1t, w2t = pl.comb.W1.T, pl.comb.w2.T
        dtype = pl.V.data.dtype
        prev = Tensor(np.zeros((b, pl.V.shape[0]), dtype=dtype))
        outs = []
        for t in range(trace.n_steps):
            u = above[t] @ vt
            if ot is not None:
                u = u + prev @ ot
            zhat = _combinator_apply(trace.z_noisy[layer][t], u, w1t,
                                     pl.comb.b1, w2t, pl.comb.b2)
            outs.append(zhat)
            prev = zhat
        recons[layer] = outs
        above = outs
    return recons


def decode_recurrent(trace: EncoderTrace, dec):
    """Top-down, forward-in-time reconstruction of every cost layer."""
    return _decode(trace, dec, recurrent=True)


def decode_feedforward(trace: EncoderTrace, dec):
    """Purely top-down reconstruction; time steps are independent."""
    return _decode(trace, dec, recurrent=False)


def compute_norm_stats(trace: EncoderTrace) -> NormStats:
    """Masked mean/std per unit of the clean preactivations, as graph nodes."""
    maskv = Tensor(trace.flat_mask().astype(trace.z[1][0].dtype))
    m = trace.valid_frames()
    mus, ss = [], []
    for layer in range(3):
        z = concat_rows(trace.z[layer])
        mu = mul_colvec(z, maskv).sum_axis0() * (1.0 / m)
        centered = add_rowvec(z, mu * -1.0)
        var = mul_colvec(centered.square(), maskv).sum_axis0() * (1.0 / m)
        s = (var + STD_FLOOR * STD_FLOOR).sqrt()
        mus.append(mu)
        ss.append(s)
    return NormStats(mu=mus, s=ss)


def denoising_cost(trace: EncoderTrace, recons, lambdas,
                   stats: NormStats) -> Tensor:
    """Lambda-weighted, normalized reconstruction error summed over layers.

    Both the clean targets and the reconstructions are normalized per unit
    with the given clean-pass statistics; the squared error is averaged over
    units and valid frames.
    """
    if len(lambdas) != len(trace.z):
        raise ValueError(
            f"{len(lambdas)} cost weights for {len(trace.z)} layers")
    dtype = trace.z[1][0].dtype
    maskv = Tensor(trace.flat_mask().astype(dtype))
    m = trace.valid_frames()
    total = None
    for layer, lam in enumerate(lambdas):
        if lam == 0:
            continue
        z = concat_rows(trace.z[layer])
        zhat = concat_rows(recons[layer])
        neg_mu = stats.mu[layer] * -1.0
        inv_s = stats.s[layer].reciprocal()
        zn = mul_rowvec(add_rowvec(z, neg_mu), inv_s)
        zhn = mul_rowvec(add_rowvec(zhat, neg_mu), inv_s)
        sq = mul_colvec((zn - zhn).square(), maskv)
        n_units = z.shape[1]
        term = sq.sum() * (float(lam) / (m * n_units))
        total = term if total is None else total + term
    if total is None:
        total = Tensor(np.zeros((), dtype=dtype))
    return total


def _dae_cost(trace: EncoderTrace, params: LadderParams,
              config: LadderConfig) -> Tensor:
    recons = (decode_recurrent(trace, params.dec)
              if config.decoder == "RD"
              else decode_feedforward(trace, params.dec))
    stats = compute_norm_stats(trace)
    return denoising_cost(trace, recons, config.lambdas, stats)


def sequence_logit_nodes(trace: EncoderTrace, noisy: bool):
    """Per-sequence [T_i, K+1] logit nodes sliced out of a padded batch."""
    source = trace.z_noisy[2] if noisy else trace.z[2]
    stacked = concat_rows(source)
    b = trace.batch_size
    nodes = []
    for i, n in enumerate(trace.lengths):
        idx = [t * b + i for t in range(n)]
        nodes.append(gather_rows(stacked, idx))
    return nodes


def semi_supervised_loss(labeled, unlabeled, params: LadderParams,
                         config: LadderConfig, rng: Rng | None):
    """Combined objective: CTC on noisy logits plus reconstruction cost.

    ``labeled`` is a sequence of objects with .features and .labels;
    ``unlabeled`` needs only .features. The reconstruction cost is computed
    on both streams and averaged (on whichever is present). Returns the
    scalar loss node plus a component dict whose float64 entries satisfy
    c_sup + c_dae == total exactly.
    """
    labeled = list(labeled or [])
    unlabeled = list(unlabeled or [])
    lam_zero = all(l == 0 for l in config.lambdas)
    if not labeled and lam_zero:
        raise ValueError("no objective: empty labeled batch and zero lambdas")

    dtype = config.np_dtype
    terms = []
    c_sup_val = 0.0
    c_dae_val = 0.0

    labeled_trace = None
    if labeled:
        feats, lengths = pad_batch([ex.features for ex in labeled], dtype)
        labeled_trace = encode(feats, lengths, params, config, rng)
        logit_nodes = sequence_logit_nodes(labeled_trace, noisy=True)
        c_sup = None
        for node, ex in zip(logit_nodes, labeled):
            term = ctc_loss(node, ex.labels)
            c_sup = term if c_sup is None else c_sup + term
        c_sup = c_sup * (1.0 / len(labeled))
        c_sup_val = float(c_sup.data)
        terms.append(c_sup)

    if not lam_zero:
        dae_terms = []
        if labeled_trace is not None:
            dae_terms.append(_dae_cost(labeled_trace, params, config))
        if unlabeled:
            feats, lengths = pad_batch([ex.features for ex in unlabeled], dtype)
            unl_trace = encode(feats, lengths, params, config, rng)
            dae_terms.append(_dae_cost(unl_trace, params, config))
        c_dae = dae_terms[0]
        for extra in dae_terms[1:]:
            c_dae = c_dae + extra
        if len(dae_terms) > 1:
            c_dae = c_dae * (1.0 / len(dae_terms))
        c_dae_val = float(c_dae.data)
        terms.append(c_dae)

    total = terms[0]
    for extra in terms[1:]:
        total = total + extra
    components = {"c_sup": c_sup_val, "c_dae": c_dae_val,
                  "total": c_sup_val + c_dae_val}
    return total, components


def init_model(config: LadderConfig, rng: Rng):
    """Fresh parameter set (Glorot-uniform weights, zero biases).

    Draw order is fixed and part of the reproducibility contract: GRU input
    weights, GRU recurrent weights, output layer, then decoder layers bottom
    up (V, O, combinator).
    """
    g = Graph(config.np_dtype)

    def glorot(name, fan_out, fan_in, shape=None):
        shape = shape or (fan_out, fan_in)
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return g.parameter(name, rng.uniform(shape, -limit, limit))

    def zeros(name, shape):
        return g.parameter(name, np.zeros(shape))

    d, h, out = config.layer_dims
    gru = GruParams(
        Wz=glorot("enc.gru.Wz", h, d), Wr=glorot("enc.gru.Wr", h, d),
        Wc=glorot("enc.gru.Wc", h, d),
        Uz=glorot("enc.gru.Uz", h, h), Ur=glorot("enc.gru.Ur", h, h),
        Uc=glorot("enc.gru.Uc", h, h),
        bz=zeros("enc.gru.bz", h), br=zeros("enc.gru.br", h),
        bc=zeros("enc.gru.bc", h),
    )
    dense = DenseParams(W=glorot("enc.out.W", out, h),
                        b=zeros("enc.out.b", out), activation="softmax")

    dec = None
    if config.decoder != "ND":
        dims = config.layer_dims
        dec = []
        for layer in range(3):
            n_l = dims[layer]
            n_above = dims[layer + 1] if layer < 2 else dims[2]
            v = glorot(f"dec.{layer}.V", n_l, n_above)
            o = (glorot(f"dec.{layer}.O", n_l, n_l)
                 if config.decoder == "RD" else None)
            cw = config.combinator_hidden
            comb = CombinatorParams(
                W1=glorot(f"dec.{layer}.comb.W1", cw, 3),
                b1=zeros(f"dec.{layer}.comb.b1", cw),
                w2=glorot(f"dec.{layer}.comb.w2", 1, cw),
                b2=zeros(f"dec.{layer}.comb.b2", 1),
            )
            dec.append(DecoderLayerParams(V=v, O=o, comb=comb))

    return g, LadderParams(gru=gru, out=dense, dec=dec)
