"""Slice-based attention kernels.

Four mechanisms over a shared parameter layout:

* ``physics_attention`` — the reference slice attention: per-head slice
  weights (softmax over the slice axis), weighted-average slice bank,
  self-attention across slices, then deslicing back to points.
* ``physics_attention_as_linear`` — the same computation rewritten as
  ``phi(Q) @ G(psi^T(K) @ V)`` with ``phi`` the slice weights, ``psi`` their
  column normalisation over points, and ``G`` the slice self-attention.
  Shares parameters with ``physics_attention`` and must agree with it to
  float64 round-off.
* ``linearno`` — the linear-attention operator: untied query/key
  projections (``generalization``), slice self-attention removed
  (``simplification``). Flags expose the intermediate ablation variants.
* ``cross_linearno`` — queries drawn from one point set, keys/values from
  another; used by the completion operator.

All kernels run in O(N * slices * dim) and never materialise an N x N
matrix in the forward path; materialisation exists only as an opt-in
analysis method on the returned ``SliceState``.

Heads split the feature dimension evenly. Each head owns independent
query/key projections of width ``slices`` and a value projection of width
``dim / heads``; head outputs are concatenated and passed through a
``dim x dim`` output projection. Slice self-attention is a standard
scaled-dot-product layer over the slice bank with scale
``1/sqrt(dim/heads)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericsError, ShapeError, Tensor, softmax

MECHANISMS = ("physics_attention", "physics_attention_as_linear", "linearno", "cross_linearno")
NORM_AXES = ("M", "N")

# Columns of the slice-weight matrix summing below this are degenerate:
# verification mode raises, training mode adds it to the denominator.
DEGENERATE_EPS = 1e-30


class DegenerateSliceError(NumericsError):
    """A slice received (numerically) zero total weight."""


class ConfigError(ValueError):
    """Invalid attention/operator configuration."""


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    slices: int
    heads: int = 4
    mechanism: str = "linearno"
    generalization: bool = True
    simplification: bool = True
    q_norm: str = "M"  # softmax axis for phi(Q): "M" (slices) or "N" (points)
    k_norm: str = "N"  # softmax axis for psi(K): "N" (points) or "M" (slices)

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"unknown mechanism {self.mechanism!r}")
        if self.dim < 1 or self.slices < 1 or self.heads < 1:
            raise ConfigError("dim, slices and heads must be positive")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim={self.dim} not divisible by heads={self.heads}")
        if self.q_norm not in NORM_AXES or self.k_norm not in NORM_AXES:
            raise ConfigError("q_norm/k_norm must be 'M' or 'N'")
        if self.mechanism in ("physics_attention", "physics_attention_as_linear"):
            # The reference mechanism ties Q/K and keeps slice attention.
            if self.generalization:
                raise ConfigError("physics_attention ties the key projection to the query "
                                  "projection (generalization must be False)")
            if self.simplification:
                raise ConfigError("physics_attention keeps slice self-attention "
                                  "(simplification must be False)")
            if self.q_norm != "M" or self.k_norm != "N":
                raise ConfigError("the reference mechanism uses the canonical (M, N) normalisation")
        if self.mechanism == "cross_linearno" and not (self.generalization and self.simplification):
            raise ConfigError("cross_linearno requires untied projections and no slice attention")

    @property
    def head_dim(self):
        return self.dim // self.heads

    @property
    def has_key_projection(self):
        return self.generalization

    @property
    def has_slice_attention(self):
        return not self.simplification

    def row_label(self):
        """Ablation row label in the generalization/simplification grid."""
        g = "on" if self.generalization else "off"
        s = "on" if self.simplification else "off"
        return f"gen={g},sim={s}"

    @staticmethod
    def linearno(dim, slices, heads=4, q_norm="M", k_norm="N"):
        return AttentionConfig(dim, slices, heads, "linearno", True, True, q_norm, k_norm)

    @staticmethod
    def physics(dim, slices, heads=4):
        return AttentionConfig(dim, slices, heads, "physics_attention", False, False)

    @staticmethod
    def ablation(dim, slices, generalization, simplification, heads=4):
        """Linear-family variant for one row of the ablation grid."""
        return AttentionConfig(dim, slices, heads, "linearno", generalization, simplification)


@dataclass
class AttentionParams:
    """Parameter group for one attention layer.

    Weight shapes (h = heads, dd = dim/heads, M = slices, d = dim):
    q_w [h, dd, M], k_w [h, dd, M] (generalization only), v_w [h, dd, dd],
    slice-attention sa_{q,k,v,o}_w [d, d] (when slice attention is kept),
    out_w [d, d]. Every projection carries a bias.
    """
    config: AttentionConfig
    tensors: dict = field(default_factory=dict)

    def named(self):
        return self.tensors.items()

    def __getattr__(self, name):
        try:
            return self.tensors[name]
        except KeyError:
            raise AttributeError(name) from None


def _trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) resampled until every draw lies within 2 std."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2 * std
    return out


def init_attention_params(config, rng, dtype=np.float64):
    h, dd, m, d = config.heads, config.head_dim, config.slices, config.dim
    p = {}

    def w(name, shape):
        p[name] = Tensor(_trunc_normal(rng, shape).astype(dtype, copy=False),
                         requires_grad=True, dtype=dtype)

    def b(name, shape):
        p[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, dtype=dtype)

    w("q_w", (h, dd, m)); b("q_b", (h, 1, m))
    if config.has_key_projection:
        w("k_w", (h, dd, m)); b("k_b", (h, 1, m))
    w("v_w", (h, dd, dd)); b("v_b", (h, 1, dd))
    if config.has_slice_attention:
        for nm in ("sa_q", "sa_k", "sa_v", "sa_o"):
            w(nm + "_w", (d, d)); b(nm + "_b", (d,))
    w("out_w", (d, d)); b("out_b", (d,))
    return AttentionParams(config, p)


@dataclass
class SliceState:
    """Per-layer attention internals captured for analysis.

    ``phi``/``psi`` are the point-to-slice weight maps [..., heads, N, M]
    (as numpy arrays, detached from the tape), ``values`` the per-head
    value vectors, ``slices`` the aggregated slice bank. The full N x N
    point-to-point matrix is never formed in the forward pass; call
    ``attention_matrix(materialize=True)`` to build it explicitly.
    """
    phi: np.ndarray
    psi: np.ndarray
    values: np.ndarray
    slices: np.ndarray
    config: AttentionConfig

    MATERIALIZE_CAP = 4096

    def attention_matrix(self, materialize=False):
        if not materialize:
            raise ValueError("N x N materialisation is analysis-only; pass materialize=True")
        n = self.phi.shape[-2]
        if n > self.MATERIALIZE_CAP:
            raise ValueError(f"refusing to materialise {n} x {n} attention matrix "
                             f"(cap {self.MATERIALIZE_CAP})")
        return self.phi @ np.swapaxes(self.psi, -1, -2)


# ---- shared pieces -------------------------------------------------------

def _split_heads(t, heads):
    shape = t.shape
    n, d = shape[-2], shape[-1]
    dd = d // heads
    return t.reshape(*shape[:-2], n, heads, dd).swapaxes(-3, -2)


def _merge_heads(t):
    y = t.swapaxes(-3, -2)
    shape = y.shape
    return y.reshape(*shape[:-2], shape[-2] * shape[-1])


def _check_input(H, config, name="H"):
    if H.ndim < 2:
        raise ShapeError(f"{name} must be [..., N, dim]")
    if H.shape[-1] != config.dim:
        raise ShapeError(f"{name} feature dim {H.shape[-1]} != config dim {config.dim}")


def _slice_self_attention(s_heads, params, config):
    """Scaled-dot-product self-attention across the slice bank."""
    heads, dd = config.heads, config.head_dim
    s = _merge_heads(s_heads)  # [..., M, d]
    q = _split_heads(s @ params.sa_q_w + params.sa_q_b, heads)
    k = _split_heads(s @ params.sa_k_w + params.sa_k_b, heads)
    v = _split_heads(s @ params.sa_v_w + params.sa_v_b, heads)
    attn = softmax(q @ k.transpose2() * (1.0 / np.sqrt(dd)), axis=-1)
    out = _merge_heads(attn @ v) @ params.sa_o_w + params.sa_o_b
    return _split_heads(out, heads)


def _slice_weights(H_heads, params, config):
    """Slice-assignment weights: softmax over slices of the query logits."""
    logits = H_heads @ params.q_w + params.q_b  # [..., h, N, M]
    return softmax(logits, axis=-1)


def _guard_denominator(den, strict):
    """Degenerate-slice policy for weighted-average denominators.

    ``strict`` (verification mode) raises; otherwise a tiny epsilon keeps
    training passes finite.
    """
    if float(den.data.min()) < DEGENERATE_EPS:
        if strict:
            raise DegenerateSliceError(
                f"slice weight column sums below {DEGENERATE_EPS:g}; "
                "a slice received no points")
        return den + DEGENERATE_EPS
    return den


# ---- mechanisms ----------------------------------------------------------

def physics_attention_forward(H, params, config, strict=False):
    """Reference slice attention.

    Per head: slice weights ``w = softmax_M(linear(H))``, values
    ``v = linear(H)``, slice bank ``s_j = sum_i w_ij v_i / sum_i w_ij``,
    self-attention over the bank, deslice ``h'_i = sum_j w_ij s'_j``,
    concatenate heads, output projection.

    Returns ``(output, SliceState)``.
    """
    _check_input(H, config)
    Hh = _split_heads(H, config.heads)
    w = _slice_weights(Hh, params, config)          # [..., h, N, M]
    v = Hh @ params.v_w + params.v_b                # [..., h, N, dd]
    wT = w.transpose2()                             # [..., h, M, N]
    den = wT.sum(axis=-1, keepdims=True)            # [..., h, M, 1]
    den = _guard_denominator(den, strict)
    bank = (wT @ v) / den                           # [..., h, M, dd]
    refined = _slice_self_attention(bank, params, config)
    out = _merge_heads(w @ refined) @ params.out_w + params.out_b
    out.check_finite("physics_attention")
    col = w.data.sum(axis=-2, keepdims=True)
    if col.min() < DEGENERATE_EPS:
        col = col + DEGENERATE_EPS
    state = SliceState(phi=w.data, psi=w.data / col,
                       values=v.data, slices=bank.data, config=config)
    return out, state


def physics_attention_as_linear_forward(H, params, config, strict=False):
    """Reference attention rewritten in the linear form phi(Q) G(psi^T(K) V).

    phi is the slice-weight matrix itself; psi normalises each of its
    columns over the points so that ``psi^T @ V`` reproduces the slice
    bank; G is the slice self-attention. Uses the same parameters as
    ``physics_attention_forward`` and agrees with it to round-off.
    """
    _check_input(H, config)
    Hh = _split_heads(H, config.heads)
    w = _slice_weights(Hh, params, config)
    col = w.sum(axis=-2, keepdims=True)             # [..., h, 1, M]
    col = _guard_denominator(col, strict)
    psi = w / col                                   # [..., h, N, M]
    v = Hh @ params.v_w + params.v_b
    bank = psi.transpose2() @ v                     # [..., h, M, dd]
    refined = _slice_self_attention(bank, params, config)
    out = _merge_heads(w @ refined) @ params.out_w + params.out_b
    out.check_finite("physics_attention_as_linear")
    state = SliceState(phi=w.data, psi=psi.data, values=v.data,
                       slices=bank.data, config=config)
    return out, state


def linearno_forward(H, params, config, strict=False):
    """Linear-attention operator: phi(Q) (psi^T(K) V).

    ``generalization`` untangles the key projection from the query
    projection; with it off the key map reuses the query logits, softmaxed
    over points. ``simplification`` removes slice self-attention; with it
    off the slice bank passes through the self-attention step. Default
    normalisation: phi over slices, psi over points ((M, N) in the
    normalisation grid); alternatives via ``q_norm``/``k_norm``.
    """
    _check_input(H, config)
    Hh = _split_heads(H, config.heads)
    q_logits = Hh @ params.q_w + params.q_b
    phi = softmax(q_logits, axis=-1 if config.q_norm == "M" else -2)
    if config.generalization:
        k_logits = Hh @ params.k_w + params.k_b
    else:
        k_logits = q_logits
    psiT = softmax(k_logits.transpose2(), axis=-1 if config.k_norm == "N" else -2)
    v = Hh @ params.v_w + params.v_b
    bank = psiT @ v                                 # [..., h, M, dd]
    if config.has_slice_attention:
        bank = _slice_self_attention(bank, params, config)
    out = _merge_heads(phi @ bank) @ params.out_w + params.out_b
    out.check_finite("linearno")
    state = SliceState(phi=phi.data, psi=np.swapaxes(psiT.data, -1, -2),
                       values=v.data, slices=bank.data, config=config)
    return out, state


def cross_linearno_forward(H_query, H_source, params, config, strict=False):
    """Cross form: queries from one point set, keys/values from another.

    ``phi(Q)`` comes from the query features (softmax over slices);
    ``psi^T(K)`` and ``V`` come from the source features, with psi
    softmaxed over the source points.
    """
    if config.mechanism != "cross_linearno":
        raise ConfigError("cross_linearno_forward requires a cross_linearno config")
    _check_input(H_query, config, "H_query")
    _check_input(H_source, config, "H_source")
    Qh = _split_heads(H_query, config.heads)
    Sh = _split_heads(H_source, config.heads)
    phi = softmax(Qh @ params.q_w + params.q_b, axis=-1 if config.q_norm == "M" else -2)
    k_logits = Sh @ params.k_w + params.k_b
    psiT = softmax(k_logits.transpose2(), axis=-1 if config.k_norm == "N" else -2)
    v = Sh @ params.v_w + params.v_b
    bank = psiT @ v
    out = _merge_heads(phi @ bank) @ params.out_w + params.out_b
    out.check_finite("cross_linearno")
    state = SliceState(phi=phi.data, psi=np.swapaxes(psiT.data, -1, -2),
                       values=v.data, slices=bank.data, config=config)
    return out, state


def attention_forward(H, params, config, strict=False):
    """Dispatch on ``config.mechanism`` (single-input mechanisms)."""
    if config.mechanism == "physics_attention":
        return physics_attention_forward(H, params, config, strict)
    if config.mechanism == "physics_attention_as_linear":
        return physics_attention_as_linear_forward(H, params, config, strict)
    if config.mechanism == "linearno":
        return linearno_forward(H, params, config, strict)
    raise ConfigError(f"{config.mechanism} is not a single-input mechanism")


# ---- closed-form accounting ----------------------------------------------

def count_params(config):
    """Exact parameter count of one attention layer (weights + biases)."""
    d, h, m = config.dim, config.heads, config.slices
    dd = config.head_dim
    qk = h * (dd * m + m)          # one slice-logit projection (all heads)
    v = h * (dd * dd + dd)
    out = d * d + d
    sa = 4 * (d * d + d)
    total = qk + v + out
    if config.has_key_projection:
        total += qk
    if config.has_slice_attention:
        total += sa
    return total


def count_flops(config, n_points, k_points=None):
    """Forward multiply-accumulate count of one attention layer.

    Counts matrix-product MACs of the forward path (projections, slice
    build, slice self-attention when present, deslice, output projection).
    Bias additions and softmax exponentials are excluded. For
    ``cross_linearno``, ``k_points`` is the source-set size.
    """
    d, h, m = config.dim, config.heads, config.slices
    dd = config.head_dim
    n = int(n_points)
    if config.mechanism == "cross_linearno":
        if k_points is None:
            raise ConfigError("cross_linearno flop count needs k_points")
        k = int(k_points)
        return (n * d * m          # phi logits
                + k * d * m        # psi logits
                + k * d * dd       # values
                + k * m * d        # psi^T @ V
                + n * m * d        # phi @ bank
                + n * d * d)       # output projection
    total = n * d * m              # slice logits (query path)
    if config.has_key_projection:
        total += n * d * m         # independent key path
    total += n * d * dd            # values
    total += n * m * d             # slice build / psi^T V
    if config.has_slice_attention:
        total += 4 * m * d * d + 2 * m * m * d
    total += n * m * d             # deslice / phi @ bank
    total += n * d * d             # output projection
    return total


def table_rows():
    """The four generalization/simplification combinations, reference first."""
    return [(False, False), (True, False), (False, True), (True, True)]
