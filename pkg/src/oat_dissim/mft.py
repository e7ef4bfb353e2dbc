"""Second-order cumulant (mean-field) dynamics of the collective spin.

The state is nine real numbers: the mean spin S and the symmetric
covariance matrix C.  Third-order cumulants are dropped, which closes the
hierarchy.  The right-hand side is vectorized so that many parameter sets
can be integrated together in a single ODE solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp

from .params import EffectiveRates

MOMENT_NAMES = ("Sx", "Sy", "Sz", "Cxx", "Cxy", "Cxz", "Cyy", "Cyz", "Czz")
RATE_NAMES = ("Gamma_phi", "Gamma_rel", "gamma_z", "gamma_plus", "gamma_minus")
_UPPER = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


@dataclass(frozen=True)
class MftState:
    N: int
    S: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        S = np.asarray(self.S, dtype=float).reshape(3)
        C = np.asarray(self.C, dtype=float).reshape(3, 3)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "C", 0.5 * (C + C.T))

    @classmethod
    def from_vector(cls, N: int, y) -> "MftState":
        y = np.asarray(y, dtype=float)
        C = np.zeros((3, 3))
        for k, (i, j) in enumerate(_UPPER):
            C[i, j] = C[j, i] = y[3 + k]
        return cls(N, y[:3], C)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.S, [self.C[i, j] for i, j in _UPPER]])

    def as_dict(self) -> dict:
        return dict(zip(MOMENT_NAMES, map(float, self.to_vector())))


def coherent_moments(N: int, axis=(1.0, 0.0, 0.0)) -> MftState:
    if N < 1:
        raise ValueError("N must be >= 1")
    n = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(n)
    if norm == 0:
        raise ValueError("axis must be nonzero")
    n = n / norm
    return MftState(N, 0.5 * N * n, 0.25 * N * (np.eye(3) - np.outer(n, n)))


def rotation_y(phi: float) -> np.ndarray:
    """SO(3) matrix of exp(i phi S_y) acting on (S_x, S_y, S_z); S_x -> +S_z for phi > 0."""
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


def rotate_about_y(state: MftState, phi: float) -> MftState:
    R = rotation_y(phi)
    return MftState(state.N, R @ state.S, R @ state.C @ R.T)


def rotate_vectors(y: np.ndarray, phi: float) -> np.ndarray:
    """Rotate a (9, B) batch of moment vectors."""
    R = rotation_y(phi)
    S = R @ y[:3]
    Sx, Sy, Sz, Cxx, Cxy, Cxz, Cyy, Cyz, Czz = y
    C = np.array([[Cxx, Cxy, Cxz], [Cxy, Cyy, Cyz], [Cxz, Cyz, Czz]])
    C = np.einsum("ia,ab...,jb->ij...", R, C, R)
    return np.stack([S[0], S[1], S[2]] + [C[i, j] for i, j in _UPPER])


def transverse_min_variance(S, C):
    """Smallest spin variance in the plane orthogonal to the mean spin.

    Works on single moments (S: (3,), C: (3, 3)) or batches (S: (3, ...),
    C: (3, 3, ...)).  Uses trace and cofactor identities of the 2x2
    restriction so no per-sample eigendecomposition is needed.
    """
    S = np.asarray(S, dtype=float)
    C = np.asarray(C, dtype=float)
    n = S / np.linalg.norm(S, axis=0)
    nCn = np.einsum("i...,ij...,j...->...", n, C, n)
    trace = np.einsum("ii...->...", C) - nCn
    # det of C restricted to the plane orthogonal to n equals n^T adj(C) n
    adj = np.empty_like(C)
    for i in range(3):
        for j in range(3):
            r = [k for k in range(3) if k != j]
            c = [k for k in range(3) if k != i]
            minor = C[r[0], c[0]] * C[r[1], c[1]] - C[r[0], c[1]] * C[r[1], c[0]]
            adj[i, j] = (-1) ** (i + j) * minor
    det = np.einsum("i...,ij...,j...->...", n, adj, n)
    disc = np.sqrt(np.maximum(trace**2 - 4 * det, 0.0))
    return 0.5 * (trace - disc)


def wineland_vectors(y: np.ndarray, N: int) -> np.ndarray:
    """Wineland parameter for (9, ...) moment vectors; nan where polarization vanishes."""
    Sx, Sy, Sz, Cxx, Cxy, Cxz, Cyy, Cyz, Czz = y
    S = np.stack([Sx, Sy, Sz])
    C = np.array([[Cxx, Cxy, Cxz], [Cxy, Cyy, Cyz], [Cxz, Cyz, Czz]])
    pol2 = np.sum(S**2, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = N * transverse_min_variance(S, C) / pol2
    return np.where(pol2 > 0, out, np.nan)


def rate_columns(rates) -> np.ndarray:
    """(5, B) array of dissipative rates from one or many EffectiveRates."""
    if isinstance(rates, EffectiveRates):
        rates = [rates]
    return np.array([[getattr(r, n) for r in rates] for n in RATE_NAMES], dtype=float)


def rhs_vector(y, N, chi, rates, drop_covariance_feedback: bool = False,
               printed_relaxation: bool = False) -> np.ndarray:
    """Time derivative of the moment vector(s).

    ``y`` has shape (9,) or (9, B); ``chi`` and each row of ``rates`` (order
    :data:`RATE_NAMES`) broadcast against the batch axis.

    ``drop_covariance_feedback`` removes C_yz and C_xz from the S_x and S_y
    equations (the short-time approximation).  ``printed_relaxation`` swaps
    in the commonly printed collective-decay terms for C_xy and C_zz, which
    differ from the Gaussian closure of the exact dynamics at leading order
    (a factor 2 on C_xy S_z and the sign of the C_xz S_x + C_yz S_y term).
    """
    Sx, Sy, Sz, Cxx, Cxy, Cxz, Cyy, Cyz, Czz = y
    Gphi, Grel, gz, gp, gm = rates
    transverse = 0.5 * (Gphi + gm + gp + 4 * gz)
    local = gp + gm + 4 * gz
    fx, fy = (0.0, 0.0) if drop_covariance_feedback else (Cyz, Cxz)

    dSx = -2 * chi * (fx + Sy * Sz) - transverse * Sx + Grel * (Cxz + (Sz - 0.5) * Sx)
    dSy = 2 * chi * (fy + Sx * Sz) - transverse * Sy + Grel * (Cyz + (Sz - 0.5) * Sy)
    dSz = -gm * (Sz + N / 2) - gp * (Sz - N / 2) - Grel * (Cxx + Cyy + Sx**2 + Sy**2 + Sz)

    dCxx = (-4 * chi * (Cxz * Sy + Cxy * Sz) - local * (Cxx - N / 4)
            + Gphi * (Cyy - Cxx + Sy**2)
            + Grel * (Czz - Cxx + Sz**2 - Sz / 2 + 2 * (Cxz * Sx + Cxx * Sz)))
    dCxy = (2 * chi * (Cxz * Sx - Cyz * Sy + Cxx * Sz - Cyy * Sz) - local * Cxy
            - Gphi * (2 * Cxy + Sx * Sy)
            + Grel * (Cyz * Sx + Cxz * Sy + (1 if printed_relaxation else 2) * Cxy * Sz - Cxy))
    dCxz = (-2 * chi * (Czz * Sy + Cyz * Sz - Sy / 4)
            - gp * (1.5 * Cxz + Sx / 2) - gm * (1.5 * Cxz - Sx / 2) - 2 * gz * Cxz
            - Gphi / 2 * Cxz
            - Grel * (2 * Cxx * Sx + 2 * Cxy * Sy - Czz * Sx - Cxz * Sz + 2.5 * Cxz - Sx / 4
                      + Sx * Sz))
    dCyy = (4 * chi * (Cyz * Sx + Cxy * Sz) - local * (Cyy - N / 4)
            + Gphi * (Cxx - Cyy + Sx**2)
            + Grel * (Czz - Cyy + Sz**2 - Sz / 2 + 2 * (Cyz * Sy + Cyy * Sz)))
    dCyz = (2 * chi * (Czz * Sx + Cxz * Sz - Sx / 4)
            - gp * (1.5 * Cyz + Sy / 2) - gm * (1.5 * Cyz - Sy / 2) - 2 * gz * Cyz
            - Gphi / 2 * Cyz
            - Grel * (2 * Cyy * Sy + 2 * Cxy * Sx - Czz * Sy - Cyz * Sz + 2.5 * Cyz - Sy / 4
                      + Sy * Sz))
    dCzz = (-gp * (2 * Czz + Sz - N / 2) - gm * (2 * Czz - Sz - N / 2)
            - Grel * (2 * Czz - Cxx - Cyy - Sx**2 - Sy**2 - Sz
                      + (-4 if printed_relaxation else 4) * (Cxz * Sx + Cyz * Sy)))
    return np.stack(np.broadcast_arrays(dSx, dSy, dSz, dCxx, dCxy, dCxz, dCyy, dCyz, dCzz))


def mft_rhs(state: MftState, rates: EffectiveRates, chi_signed: float | None = None,
            drop_covariance_feedback: bool = False, printed_relaxation: bool = False) -> MftState:
    chi = rates.chi if chi_signed is None else chi_signed
    d = rhs_vector(state.to_vector(), state.N, chi, rate_columns(rates)[:, 0],
                   drop_covariance_feedback, printed_relaxation)
    return MftState.from_vector(state.N, d)


def default_atol(N: int) -> float:
    return 1e-10 * N


STIFF_THRESHOLD = 100.0


def stiffness(N: int, rates, duration) -> float:
    """Largest dissipative rate times duration over a batch; explicit steps scale with it."""
    r = np.asarray(rates, dtype=float).reshape(5, -1)
    Gphi, Grel, gz, gp, gm = r
    return float(np.max((Gphi + N * Grel + 4 * gz + gp + gm) * np.asarray(duration)))


def integrate_batch(y0, N, chi, rates, s_end: float, scale=None, t_eval=None,
                    rtol: float = 1e-8, atol: float | None = None, dense: bool = False,
                    drop_covariance_feedback: bool = False, printed_relaxation: bool = False,
                    method: str = "auto"):
    """Integrate B systems together over the (possibly rescaled) time s in [0, s_end].

    With ``scale`` given, member b obeys dy/ds = scale_b * f(y), i.e. its
    physical time is t = scale_b * s.  Returns the scipy solution object with
    ``y`` reshaped lazily by the caller as (9, B, n).
    """
    y0 = np.asarray(y0, dtype=float)
    B = y0.shape[1]
    chi = np.broadcast_to(np.asarray(chi, dtype=float), (B,))
    rates = np.asarray(rates, dtype=float)
    if rates.ndim == 1:
        rates = rates[:, None]
    rates = np.broadcast_to(rates, (5, B))
    scale = np.ones(B) if scale is None else np.broadcast_to(np.asarray(scale, float), (B,))
    atol = default_atol(N) if atol is None else atol

    def f(_s, flat):
        return (scale * rhs_vector(flat.reshape(9, B), N, chi, rates,
                                   drop_covariance_feedback, printed_relaxation)).ravel()

    if method == "auto":
        method = "BDF" if stiffness(N, rates, scale * s_end) > STIFF_THRESHOLD else "DOP853"
    extra = {}
    if method in ("Radau", "BDF"):
        # members are independent: the Jacobian is block diagonal
        extra["jac_sparsity"] = sp.kron(np.ones((9, 9)), sp.identity(B), format="csr")
    sol = solve_ivp(f, (0.0, s_end), y0.ravel(), method=method, t_eval=t_eval,
                    dense_output=dense, rtol=rtol, atol=atol, **extra)
    if not sol.success:
        raise RuntimeError(f"MFT integration failed at t={sol.t[-1]:.6g}: {sol.message}")
    return sol


@dataclass
class MftTrajectory:
    N: int
    times: np.ndarray
    states: np.ndarray  # (9, len(times))
    segments: list = field(default_factory=list)  # (t0, t1, dense solution)
    diagnostics: dict = field(default_factory=dict)

    def at(self, t) -> np.ndarray:
        """Moment vector(s) at arbitrary time(s) via dense output."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((9, t.size))
        for k, tk in enumerate(t):
            for t0, t1, sol in self.segments:
                if t0 - 1e-14 <= tk <= t1 + 1e-14:
                    out[:, k] = sol(tk - t0)
                    break
            else:
                raise ValueError(f"t={tk} outside the trajectory [0, {self.times[-1]}]")
        return out

    def state(self, t: float) -> MftState:
        return MftState.from_vector(self.N, self.at(t)[:, 0])

    @property
    def final(self) -> MftState:
        return MftState.from_vector(self.N, self.states[:, -1])


def _normalize_schedule(chi_schedule, t_end):
    if np.isscalar(chi_schedule):
        if t_end is None:
            raise ValueError("t_end is required with a constant chi")
        return [(float(t_end), float(chi_schedule))]
    sched = [(float(d), float(c)) for d, c in chi_schedule]
    if any(d < 0 for d, _ in sched):
        raise ValueError("schedule durations must be non-negative")
    return sched


def variance_diagnostics(states: np.ndarray, N: int) -> dict:
    diag_var = states[[3, 6, 8]]
    worst = float(diag_var.min()) if diag_var.size else 0.0
    return {"min_variance": worst, "negative_variance": worst < -1e-6 * N**2}


def integrate(initial: MftState, rates: EffectiveRates, chi_schedule, t_end: float | None = None,
              rtol: float = 1e-8, atol: float | None = None, n_samples: int = 401,
              drop_covariance_feedback: bool = False,
              printed_relaxation: bool = False) -> MftTrajectory:
    """Evolve ``initial`` under a piecewise-constant signed chi.

    ``chi_schedule`` is either a constant chi (requires ``t_end``) or a list of
    ``(duration, chi)`` stages applied in order.
    """
    sched = _normalize_schedule(chi_schedule, t_end)
    N = initial.N
    cols = rate_columns(rates)
    y = initial.to_vector()[:, None]
    times, states, segments = [np.zeros(1)], [y], []
    t0 = 0.0
    for duration, chi in sched:
        if duration == 0:
            continue
        grid = np.linspace(0.0, duration, max(n_samples, 2))
        sol = integrate_batch(y, N, chi, cols, duration, t_eval=grid, rtol=rtol, atol=atol,
                              dense=True, drop_covariance_feedback=drop_covariance_feedback,
                              printed_relaxation=printed_relaxation)
        segments.append((t0, t0 + duration, sol.sol))
        times.append(t0 + grid[1:])
        states.append(sol.y[:, 1:])
        y = sol.y[:, -1:]
        t0 += duration
    states = np.concatenate(states, axis=1)
    return MftTrajectory(N, np.concatenate(times), states, segments,
                         variance_diagnostics(states, N))
