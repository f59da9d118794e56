"""Diagnostic instruments: numerical rank, correlation, Monte Carlo
convergence of the integral-operator form, runtime probes, and weight
exports.

The SVD here is a from-scratch one-sided Jacobi (no LAPACK), which is
what the rank estimates are defined through; ``rank_of_product`` reduces
the N x N point-to-point attention matrix phi @ psi^T to an equivalent
small M x M problem through authored Gram-Schmidt factorizations, so
ranks stay exact without ever materializing N x N.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .attention import count_flops, init_attention_params, linearno_forward
from .container import save
from .tensor import NumericsError, Tensor, no_grad

# ---------------------------------------------------------------------------
# one-sided Jacobi SVD


def jacobi_svd(a, max_sweeps=100, tol=1e-12):
    """Singular values (descending) and factors of a 2-D matrix.

    One-sided Jacobi: rotate column pairs of A until all columns are
    mutually orthogonal; singular values are the column norms. Returns
    (u, s, vt) with a == u @ diag(s) @ vt. Raises ``NumericsError`` if
    orthogonality is not reached within ``max_sweeps``.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {a.shape}")
    transposed = a.shape[0] < a.shape[1]
    w = (a.T if transposed else a).copy()
    n, m = w.shape
    v = np.eye(m)

    for _ in range(max_sweeps):
        off = 0.0
        for p in range(m - 1):
            for q in range(p + 1, m):
                wp = w[:, p]
                wq = w[:, q]
                alpha = wp @ wp
                beta = wq @ wq
                gamma = wp @ wq
                if gamma == 0.0:
                    continue
                denom = math.sqrt(alpha * beta)
                if denom == 0.0 or abs(gamma) <= tol * denom:
                    continue
                off = max(off, abs(gamma) / denom)
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                w[:, p], w[:, q] = c * wp - s * wq, s * wp + c * wq
                v[:, p], v[:, q] = c * v[:, p] - s * v[:, q], s * v[:, p] + c * v[:, q]
        if off <= tol:
            break
    else:
        raise NumericsError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")

    sigma = np.sqrt((w * w).sum(axis=0))
    order = np.argsort(sigma)[::-1]
    sigma = sigma[order]
    w = w[:, order]
    v = v[:, order]
    u = np.where(sigma > 0.0, 1.0, 0.0) * w / np.where(sigma > 0.0, sigma, 1.0)
    if transposed:
        return v, sigma, u.T
    return u, sigma, v.T


def svd_rank(matrix, tau_rel=1e-10):
    """Count of singular values above ``tau_rel * sigma_max``."""
    if isinstance(matrix, Tensor):
        matrix = matrix.data
    matrix = np.asarray(matrix, dtype=np.float64)
    if not np.all(np.isfinite(matrix)):
        raise NumericsError("rank of a non-finite matrix is undefined")
    _, s, _ = jacobi_svd(matrix)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tau_rel * s[0]))


def _mgs_qr(a):
    """Modified Gram-Schmidt thin QR; zero-norm columns yield zero q's."""
    a = np.array(a, dtype=np.float64)
    n, m = a.shape
    q = np.zeros((n, m))
    r = np.zeros((m, m))
    for j in range(m):
        v = a[:, j].copy()
        for i in range(j):
            r[i, j] = q[:, i] @ v
            v -= r[i, j] * q[:, i]
        norm = np.linalg.norm(v)
        r[j, j] = norm
        if norm > 0.0:
            q[:, j] = v / norm
    return q, r


def rank_of_product(a, bt, tau_rel=1e-10):
    """Numerical rank of a @ bt for tall a [N, M] and wide bt [M, N].

    Equal to the rank of R_a @ R_b^T where a = Q_a R_a and bt^T = Q_b R_b
    (orthonormal Q's drop out of the singular values), so only an M x M
    Jacobi SVD is needed.
    """
    _, ra = _mgs_qr(np.asarray(a, dtype=np.float64))
    _, rb = _mgs_qr(np.asarray(bt, dtype=np.float64).T)
    return svd_rank(ra @ rb.T, tau_rel)


# ---------------------------------------------------------------------------
# Spearman rank correlation


def _average_ranks(x):
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0   # average of ranks i+1 .. j+1
        i = j + 1
    return ranks


def spearman_rho(a, b):
    """Pearson correlation of average ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be equal-length 1-D sequences")
    if a.size < 2:
        raise ValueError("need at least two observations")
    ra = _average_ranks(a)
    rb = _average_ranks(b)
    da = ra - ra.mean()
    db = rb - rb.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0.0:
        raise ValueError("rank correlation undefined for constant input")
    return float(da @ db) / denom


# ---------------------------------------------------------------------------
# Monte Carlo convergence of the integral-operator form


@dataclass(frozen=True)
class KernelParams:
    """Fixed random parameters of the integral kernel and its discrete twin.

    phi-side logits: a_w x + a_b (softmax over the M slices);
    psi-side logits: b_w x + b_b (normalized over samples / the measure);
    r: the output weight multiplying the integrand (value bias omitted —
    the continuous kernel form has no counterpart for it).
    """

    a_w: np.ndarray
    a_b: np.ndarray
    b_w: np.ndarray
    b_b: np.ndarray
    r: float

    @staticmethod
    def draw(slices, seed):
        rng = np.random.default_rng(seed)
        return KernelParams(
            a_w=rng.normal(0.0, 1.0, slices),
            a_b=rng.normal(0.0, 0.5, slices),
            b_w=rng.normal(0.0, 1.0, slices),
            b_b=rng.normal(0.0, 0.5, slices),
            r=float(rng.normal(0.0, 1.0)) or 1.0,
        )


@dataclass
class ConvergenceTrace:
    n_values: list
    deviations: list
    slope: float | None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.n_values, self.n_values[1:])):
            raise ValueError("sample counts must be strictly increasing")
        if any(d < 0 for d in self.deviations):
            raise ValueError("deviations must be nonnegative")


def _phi_weights(params, vx):
    logits = np.outer(np.atleast_1d(vx), params.a_w) + params.a_b   # [P, M]
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def _discrete_bank(params, vy):
    """Per-slice softmax-over-samples average of v(y) * r, anchored.

    The anchored form ``anchor + sum_i psi_i * (v_i r - anchor)`` is
    algebraically identical (psi sums to one) but returns the anchor
    bitwise when v is constant, making the constant-function fixed point
    exact rather than accurate-to-rounding.
    """
    anchor = vy[0] * params.r
    logits = np.outer(params.b_w, vy) + params.b_b[:, None]          # [M, N]
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    psi = e / e.sum(axis=-1, keepdims=True)
    return anchor + psi @ (vy * params.r - anchor)                   # [M]


def _quadrature_bank(params, v, nodes):
    """Trapezoid reference for the kernel's slice averages on [0, 1]."""
    y = np.linspace(0.0, 1.0, nodes)
    vy = v(y)
    anchor = vy[0] * params.r
    logits = np.outer(params.b_w, vy) + params.b_b[:, None]
    logits -= logits.max(axis=-1, keepdims=True)
    wts = np.ones(nodes)
    wts[0] = wts[-1] = 0.5
    e = np.exp(logits) * wts
    num = e @ (vy * params.r - anchor)
    den = e.sum(axis=-1)
    return anchor + num / den


def mc_convergence(params: KernelParams, v, n_list, trials=64, seed=0,
                   probes=16, quad_nodes=(2 ** 20 + 1)):
    """Empirical convergence of the discrete operator to its integral limit.

    For each sample count N: draw ``trials`` iid uniform sample sets,
    evaluate the discrete slice averages, apply the phi weights at a
    fixed probe set, and record the mean absolute deviation from the
    quadrature reference. Fits the log-log slope when every recorded
    deviation is positive (a constant ``v`` gives exact zeros and an
    absent slope).
    """
    n_list = [int(n) for n in n_list]
    coarse = _quadrature_bank(params, v, (quad_nodes - 1) // 2 + 1)
    fine = _quadrature_bank(params, v, quad_nodes)
    if np.max(np.abs(fine - coarse)) > 1e-8:
        raise NumericsError("quadrature reference did not converge "
                            f"(refinement delta {np.max(np.abs(fine - coarse)):.3e})")

    rng = np.random.default_rng(seed)
    x_probe = rng.uniform(0.0, 1.0, probes)
    phi = _phi_weights(params, v(x_probe))                 # [P, M]
    reference = phi @ fine                                  # [P]

    deviations = []
    for n in n_list:
        total = 0.0
        for _ in range(trials):
            y = rng.uniform(0.0, 1.0, n)
            bank = _discrete_bank(params, v(y))
            total += float(np.mean(np.abs(phi @ bank - reference)))
        deviations.append(total / trials)

    slope = None
    if len(n_list) >= 2 and all(d > 0.0 for d in deviations):
        slope = float(np.polyfit(np.log(n_list), np.log(deviations), 1)[0])
    return ConvergenceTrace(
        n_values=n_list, deviations=deviations, slope=slope,
        metadata={"trials": trials, "seed": seed, "probes": probes,
                  "slices": len(params.a_w), "quad_nodes": quad_nodes})


# ---------------------------------------------------------------------------
# runtime / complexity probe


def runtime_probe(config, n_list, repeats=5, include_reference=False, seed=0):
    """Median forward wall time and FLOP count per point count.

    Returns a dict with one row per N plus the linear-fit residual of
    the measured times (relative to the fitted values).
    """
    rng = np.random.default_rng(seed)
    params = init_attention_params(config, rng)
    rows = []
    for n in n_list:
        h = Tensor(rng.normal(0.0, 1.0, (int(n), config.dim)))
        times = []
        with no_grad():
            linearno_forward(h, params, config)            # warm-up
            for _ in range(repeats):
                t0 = time.perf_counter()
                linearno_forward(h, params, config)
                times.append(time.perf_counter() - t0)
        row = {"n": int(n), "median_s": float(np.median(times)),
               "flops": count_flops(config, int(n))}
        if include_reference:
            from .attention import AttentionConfig, physics_attention_forward
            ref_cfg = AttentionConfig.physics(dim=config.dim, slices=config.slices,
                                              heads=config.heads)
            ref_params = init_attention_params(ref_cfg, np.random.default_rng(seed))
            with no_grad():
                physics_attention_forward(h, ref_params, ref_cfg)
                ref_times = []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    physics_attention_forward(h, ref_params, ref_cfg)
                    ref_times.append(time.perf_counter() - t0)
            row["reference_median_s"] = float(np.median(ref_times))
            row["reference_flops"] = count_flops(ref_cfg, int(n))
        rows.append(row)

    ns = np.array([r["n"] for r in rows], dtype=np.float64)
    ts = np.array([r["median_s"] for r in rows])
    resid = None
    if len(rows) >= 2:
        coef = np.polyfit(ns, ts, 1)
        fit = np.polyval(coef, ns)
        resid = float(np.max(np.abs(ts - fit) / np.maximum(ts, 1e-12)))
    return {"rows": rows, "linear_fit_residual": resid}


# ---------------------------------------------------------------------------
# slice-weight export and rank profiles


def _captured_states(model, inputs):
    with no_grad():
        _, states = model.forward(*inputs, capture_states=True)
    return states


def export_slice_weights(model, inputs, coords, path=None):
    """Container sections of phi and psi per layer and head, plus coords.

    ``inputs`` is the tuple of model.forward arguments for one unbatched
    sample; section count is layers * heads * 2 + 1.
    """
    states = _captured_states(model, inputs)
    sections = {"coords": np.asarray(coords, dtype=np.float64)}
    for li, st in enumerate(states):
        phi = st.phi          # [heads, N, M]
        psi = st.psi          # [heads, N, M] (point-to-slice, like phi)
        for hi in range(phi.shape[0]):
            sections[f"phi/layer{li}/head{hi}"] = phi[hi]
            sections[f"psi/layer{li}/head{hi}"] = psi[hi]
    if path is not None:
        save(path, sections)
    return sections


@dataclass
class RankProfile:
    ranks: list            # [layers][heads]
    layer_means: list
    metadata: dict = field(default_factory=dict)


def rank_profile(model, inputs, tau_rel=1e-10):
    """Numerical rank of the point-to-point matrix phi @ psi per layer/head."""
    states = _captured_states(model, inputs)
    ranks = []
    for st in states:
        layer = []
        for hi in range(st.phi.shape[0]):
            layer.append(rank_of_product(st.phi[hi], st.psi[hi].T, tau_rel))
        ranks.append(layer)
    means = [float(np.mean(layer)) for layer in ranks]
    meta = {"tau_rel": tau_rel,
            "n_points": int(states[0].phi.shape[-2]) if ranks else 0,
            "slices": int(states[0].phi.shape[-1]) if ranks else 0}
    return RankProfile(ranks=ranks, layer_means=means, metadata=meta)
