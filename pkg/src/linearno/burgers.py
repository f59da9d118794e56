"""Synthetic 1-D viscous Burgers data.

    u_t = nu * u_xx - u * u_x,   x in [0, 1) periodic,  t in [0, 1]

Initial conditions are Gaussian-process draws with the periodic kernel

    k(x, x') = exp(-(2 / (p * l^2)) * sin^2(pi * |x - x'|)),  p = l = 1,

sampled through a symmetric eigendecomposition of the grid kernel matrix
(the periodic kernel matrix is rank-deficient, so negative round-off
eigenvalues are clipped to zero).

The solver is pseudo-spectral: FFT derivatives, 2/3-rule dealiasing of
the quadratic term (computed in conservative form ``-(u^2/2)_x`` so the
spatial mean is conserved exactly), classic RK4 in time. The fine step
is chosen adaptively each substep from the diffusive bound
``dt <= 0.2 dx^2 / nu`` and the advective CFL bound
``|u| dt / dx <= 0.5`` (so the CFL condition holds at every substep by
construction); stored frames land exactly on the uniform output grid.
A blow-up that drives the admissible step toward zero, or any
non-finite value, aborts with a diagnostic.
"""
from __future__ import annotations

import numpy as np

from .tensor import NumericsError

NU_DEFAULT = 0.01
DIFF_SAFETY = 0.2
CFL_SAFETY = 0.5


def periodic_kernel(x, period=1.0, length=1.0):
    """Grid kernel matrix k(x_i, x_j) for the periodic exponential kernel."""
    x = np.asarray(x, dtype=np.float64)
    diff = np.abs(x[:, None] - x[None, :])
    return np.exp(-(2.0 / (period * length * length)) * np.sin(np.pi * diff) ** 2)


def grid(n_x):
    """Periodic spatial grid on [0, 1): n_x points, endpoint excluded."""
    return np.arange(n_x, dtype=np.float64) / n_x


def sample_initial_conditions(n_x, n_samples, rng, period=1.0, length=1.0):
    """Draw GP initial conditions on the periodic grid -> [n_samples, n_x]."""
    k = periodic_kernel(grid(n_x), period, length)
    evals, evecs = np.linalg.eigh(k)
    factor = evecs * np.sqrt(np.clip(evals, 0.0, None))
    z = rng.standard_normal((n_x, n_samples))
    return (factor @ z).T


def _rhs(u, ik, k2, dealias, nu):
    uh = np.fft.rfft(u)
    uh_d = uh * dealias
    w = np.fft.irfft(uh_d, n=u.shape[-1])
    wh = np.fft.rfft(w * w) * dealias
    return np.fft.irfft(-0.5 * ik * wh - nu * k2 * uh, n=u.shape[-1])


def solve(u0, n_t, t_end=1.0, nu=NU_DEFAULT):
    """Integrate one initial condition; returns frames [n_t, n_x].

    Frame i sits at t = i * t_end / (n_t - 1); frame 0 is ``u0``.
    Raises ``NumericsError`` on CFL violation or non-finite values.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    n_x = u0.shape[-1]
    dx = 1.0 / n_x
    freqs = np.fft.rfftfreq(n_x, d=dx)          # cycles per unit length
    kvec = 2.0 * np.pi * freqs
    ik = 1j * kvec
    k2 = kvec * kvec
    dealias = (np.arange(freqs.size) <= n_x // 3).astype(np.float64)

    frames = np.empty((n_t, n_x), dtype=np.float64)
    frames[0] = u0
    frame_dt = t_end / (n_t - 1)
    u = u0.copy()
    dt_diff = DIFF_SAFETY * dx * dx / nu
    max_substeps = 1_000_000
    for fi in range(1, n_t):
        remaining = frame_dt
        for _ in range(max_substeps):
            if remaining <= 0.0:
                break
            umax = float(np.max(np.abs(u)))
            if not np.isfinite(umax):
                raise NumericsError(f"solver produced non-finite values before frame {fi}")
            dt_cfl = CFL_SAFETY * dx / max(umax, 1e-12)
            dt = min(dt_diff, dt_cfl, remaining)
            k1 = _rhs(u, ik, k2, dealias, nu)
            k2_ = _rhs(u + 0.5 * dt * k1, ik, k2, dealias, nu)
            k3 = _rhs(u + 0.5 * dt * k2_, ik, k2, dealias, nu)
            k4 = _rhs(u + dt * k3, ik, k2, dealias, nu)
            u = u + (dt / 6.0) * (k1 + 2.0 * k2_ + 2.0 * k3 + k4)
            remaining -= dt
        else:
            raise NumericsError(
                f"CFL step collapse before frame {fi}: "
                f"|u| grew until dt underflowed ({max_substeps} substeps)")
        frames[fi] = u
    if not np.all(np.isfinite(frames)):
        raise NumericsError("solver produced non-finite frames")
    return frames


def energy(traj):
    """Discrete energy (1/n_x) sum u^2 per frame."""
    return np.mean(np.asarray(traj) ** 2, axis=-1)


def check_trajectory(traj, mean_tol=1e-8):
    """Physical sanity checks every generated trajectory must pass.

    Energy must be non-increasing (viscous dissipation) and the spatial
    mean conserved (the conservative nonlinear term and diffusion both
    leave the zero mode untouched).
    """
    traj = np.asarray(traj)
    e = energy(traj)
    if not np.all(e[1:] <= e[:-1] * (1.0 + 1e-12) + 1e-14):
        worst = float(np.max(e[1:] - e[:-1]))
        raise NumericsError(f"energy increased along a trajectory (max jump {worst:.3e})")
    means = traj.mean(axis=-1)
    drift = float(np.max(np.abs(means - means[0])))
    if drift > mean_tol:
        raise NumericsError(f"spatial mean drifted by {drift:.3e} (tol {mean_tol:g})")
    return True
