"""Permutation-invariant (Dicke-basis) solver for the effective master equation.

A permutation-invariant state of N spin-1/2 particles is block diagonal over
total-spin sectors j, with each block repeated d_N(j) times.  We store the
degeneracy-weighted blocks ``P_j = d_N(j) rho_j`` so that traces and
collective expectation values are plain sums over blocks.

Collective terms (the twist, collective dephasing and collective decay) act
inside each block.  Local terms ``sum_i A_i rho B_i`` couple neighbouring
sectors.  Because rho is invariant under permutations, ``sum_i A_i rho B_i``
equals N times the permutation twirl of ``A_N rho B_N``.  Coupling the last
spin to the remaining N-1 spins (j = j' +- 1/2) turns that twirl into

    P'_jt = N * sum_j' d_{N-1}(j') / d_N(j) * A(jt <- j; j') P_j B(j <- jt; j')

with A, B the reduced matrices of the single-spin operators in the coupled
basis.  These transfer maps are built from Clebsch-Gordan isometries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp

from .mft import STIFF_THRESHOLD, rate_columns, stiffness, transverse_min_variance
from .params import EffectiveRates, EngineCapError

DEFAULT_CAP = 120

_SIGMA = {
    "z": np.array([[1.0, 0.0], [0.0, -1.0]]),
    "m": np.array([[0.0, 0.0], [1.0, 0.0]]),  # |down><up|
    "p": np.array([[0.0, 1.0], [0.0, 0.0]]),
}


class DickeSizeError(EngineCapError):
    pass


def degeneracy(N: int, twoj: int) -> int:
    """Multiplicity of total spin j = twoj/2 among N spin-1/2 particles."""
    if twoj < 0 or twoj > N or (N - twoj) % 2:
        return 0
    k = (N - twoj) // 2
    return math.comb(N, k) - (math.comb(N, k - 1) if k >= 1 else 0)


def sectors(N: int) -> list[int]:
    """All 2j values for N spins, largest first."""
    return list(range(N, -1, -2))


@lru_cache(maxsize=512)
def spin_matrices(twoj: int):
    """(J_z, J_+, J_-) for spin j = twoj/2, basis ordered m = j, j-1, ..., -j."""
    j = twoj / 2
    m = j - np.arange(twoj + 1)
    Jz = np.diag(m)
    Jp = np.zeros((twoj + 1, twoj + 1))
    for k in range(1, twoj + 1):
        # <m+1| J+ |m> with m = m[k]
        Jp[k - 1, k] = math.sqrt(j * (j + 1) - m[k] * (m[k] + 1))
    return Jz, Jp, Jp.T.copy()


@lru_cache(maxsize=512)
def _jy_eig(twoj: int):
    _, Jp, Jm = spin_matrices(twoj)
    Jy = (Jp - Jm) / 2j
    w, v = np.linalg.eigh(Jy)
    return w, v


@lru_cache(maxsize=1024)
def _coupling_isometry(twojp: int, twoj: int) -> np.ndarray:
    """Columns |j m> expanded in |j' m'> (x) |ms>, product index = 2*k' + s.

    k' indexes m' = j' - k' and s = 0 (up), 1 (down).
    """
    jp = twojp / 2
    j = twoj / 2
    dim_p = twojp + 1
    V = np.zeros((2 * dim_p, twoj + 1))
    for k in range(twoj + 1):
        m = j - k
        norm = twojp + 1
        for s, ms in ((0, 0.5), (1, -0.5)):
            mp = m - ms
            kp = jp - mp
            if kp < -1e-9 or kp > twojp + 1e-9:
                continue
            kp = int(round(kp))
            if twoj == twojp + 1:
                c = math.sqrt((jp + m + 0.5) / norm) if s == 0 else math.sqrt((jp - m + 0.5) / norm)
            else:
                c = -math.sqrt((jp - m + 0.5) / norm) if s == 0 else math.sqrt((jp + m + 0.5) / norm)
            V[2 * kp + s, k] = c
    return V


@lru_cache(maxsize=4096)
def _reduced(op: str, twoj_to: int, twoj_from: int, twojp: int) -> np.ndarray:
    """<j_to m; j'| sigma^(N) |j_from m'; j'> as a (2 j_to + 1) x (2 j_from + 1) matrix."""
    Vt = _coupling_isometry(twojp, twoj_to)
    Vf = _coupling_isometry(twojp, twoj_from)
    big = np.kron(np.eye(twojp + 1), _SIGMA[op])
    return Vt.T @ big @ Vf


@dataclass(frozen=True)
class DickeLayout:
    """Which sectors are represented and where each block lives in the flat vector."""

    N: int
    twojs: tuple[int, ...]
    offsets: tuple[int, ...] = field(init=False)
    size: int = field(init=False)

    def __post_init__(self):
        offs, acc = [], 0
        for tj in self.twojs:
            offs.append(acc)
            acc += (tj + 1) ** 2
        object.__setattr__(self, "offsets", tuple(offs))
        object.__setattr__(self, "size", acc)

    @classmethod
    def full(cls, N: int) -> "DickeLayout":
        return cls(N, tuple(sectors(N)))

    def index(self, twoj: int) -> int:
        return self.twojs.index(twoj)

    def slice(self, twoj: int) -> slice:
        i = self.index(twoj)
        return slice(self.offsets[i], self.offsets[i] + (twoj + 1) ** 2)


@dataclass
class DickeDensity:
    layout: DickeLayout
    vec: np.ndarray

    @property
    def N(self) -> int:
        return self.layout.N

    def block(self, twoj: int) -> np.ndarray:
        d = twoj + 1
        return self.vec[self.layout.slice(twoj)].reshape(d, d)

    def blocks(self):
        for tj in self.layout.twojs:
            yield tj, self.block(tj)

    def trace(self) -> float:
        return float(sum(np.trace(b).real for _, b in self.blocks()))

    def sector_populations(self) -> dict[int, float]:
        return {tj: float(np.trace(b).real) for tj, b in self.blocks()}

    def purity(self) -> float:
        # tr(rho^2) = sum_j d_j tr(rho_j^2) = sum_j tr(P_j^2) / d_j
        return float(sum(np.vdot(b, b).real / degeneracy(self.N, tj) for tj, b in self.blocks()))

    def restricted(self, layout: DickeLayout) -> "DickeDensity":
        vec = np.zeros(layout.size, dtype=complex)
        for tj in layout.twojs:
            if tj in self.layout.twojs:
                vec[layout.slice(tj)] = self.vec[self.layout.slice(tj)]
        return DickeDensity(layout, vec)

    def check(self, tol_trace=1e-10, tol_herm=1e-10, tol_pos=1e-8) -> None:
        if abs(self.trace() - 1) > tol_trace:
            raise AssertionError(f"trace {self.trace()} deviates from 1")
        for tj, b in self.blocks():
            if np.max(np.abs(b - b.conj().T), initial=0.0) > tol_herm:
                raise AssertionError(f"block 2j={tj} is not Hermitian")
            if np.linalg.eigvalsh(0.5 * (b + b.conj().T)).min() < -tol_pos:
                raise AssertionError(f"block 2j={tj} has a negative eigenvalue")


def _check_cap(N: int, cap: int) -> None:
    if N < 1:
        raise ValueError("N must be >= 1")
    if N > cap:
        raise DickeSizeError(f"N={N} exceeds the Dicke solver cap of {cap}")


def coherent_state(N: int, axis=(1.0, 0.0, 0.0), cap: int = DEFAULT_CAP) -> DickeDensity:
    """Coherent spin state polarized along ``axis`` (lives in the j = N/2 block)."""
    _check_cap(N, cap)
    n = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(n)
    if norm == 0:
        raise ValueError("axis must be nonzero")
    n = n / norm
    theta = math.acos(max(-1.0, min(1.0, n[2])))
    phi = math.atan2(n[1], n[0])
    c, s = math.cos(theta / 2), math.sin(theta / 2)
    # k down spins: sqrt(C(N, k)) cos^(N-k) sin^k e^{i k phi}
    amp = np.array([math.sqrt(math.comb(N, k)) * c ** (N - k) * s**k for k in range(N + 1)],
                   dtype=complex)
    amp *= np.exp(1j * phi * np.arange(N + 1))
    layout = DickeLayout(N, (N,))
    return DickeDensity(layout, np.outer(amp, amp.conj()).ravel())


def maximally_mixed(N: int, cap: int = DEFAULT_CAP) -> DickeDensity:
    _check_cap(N, cap)
    layout = DickeLayout.full(N)
    vec = np.zeros(layout.size, dtype=complex)
    total = 2**N
    for tj in layout.twojs:
        d = tj + 1
        vec[layout.slice(tj)] = (np.eye(d) * degeneracy(N, tj) / total).ravel()
    return DickeDensity(layout, vec)


def _kron(A, B) -> sp.csr_matrix:
    return sp.kron(sp.csr_matrix(A), sp.csr_matrix(B), format="csr")


class DickeGenerator:
    """Sparse generator acting on the stacked block vector (row-major blocks)."""

    def __init__(self, layout: DickeLayout, rates: EffectiveRates, chi_signed: float | None = None):
        self.layout = layout
        self.rates = rates
        self.chi = rates.chi if chi_signed is None else chi_signed
        self.matrix = self._build()

    @property
    def N(self) -> int:
        return self.layout.N

    def _build(self) -> sp.csr_matrix:
        N, r = self.N, self.rates
        lay = self.layout
        nb = len(lay.twojs)
        grid = [[None] * nb for _ in range(nb)]

        def add(i_to, i_from, mat):
            grid[i_to][i_from] = mat if grid[i_to][i_from] is None else grid[i_to][i_from] + mat

        for i, tj in enumerate(lay.twojs):
            d = tj + 1
            Jz, Jp, Jm = spin_matrices(tj)
            m = np.diag(Jz)
            mm, mpr = np.meshgrid(m, m, indexing="ij")
            diag = -1j * self.chi * (mm**2 - mpr**2)
            diag = diag - 0.5 * r.Gamma_phi * (mm - mpr) ** 2
            diag = diag - r.gamma_minus * (N / 2 + (mm + mpr) / 2)
            diag = diag - r.gamma_plus * (N / 2 - (mm + mpr) / 2)
            diag = diag - r.gamma_z * N
            block = sp.diags(diag.ravel().astype(complex), format="csr")
            if r.Gamma_rel:
                A = Jp @ Jm
                eye = np.eye(d)
                block = block + r.Gamma_rel * (_kron(Jm, Jm) - 0.5 * (_kron(A, eye) + _kron(eye, A.T)))
            add(i, i, block)

        local = [(r.gamma_z, "z", "z"), (r.gamma_minus, "m", "p"), (r.gamma_plus, "p", "m")]
        local = [t for t in local if t[0]]
        if local:
            for i_from, tj in enumerate(lay.twojs):
                dj = degeneracy(N, tj)
                for tjp in (tj - 1, tj + 1):
                    dp = degeneracy(N - 1, tjp)
                    if dp == 0:
                        continue
                    weight = N * dp / dj
                    for tjt in (tjp - 1, tjp + 1):
                        if tjt < 0 or tjt not in lay.twojs:
                            continue
                        i_to = lay.index(tjt)
                        for rate, a, b in local:
                            F = _reduced(a, tjt, tj, tjp)
                            G = _reduced(b, tj, tjt, tjp)
                            add(i_to, i_from, (rate * weight) * _kron(F, G.T))

        for i, tj in enumerate(lay.twojs):
            if grid[i][i] is None:
                grid[i][i] = sp.csr_matrix(((tj + 1) ** 2, (tj + 1) ** 2), dtype=complex)
        return sp.bmat(grid, format="csr").astype(complex)

    def __call__(self, vec: np.ndarray) -> np.ndarray:
        return self.matrix @ vec


def layout_for(N: int, rates: EffectiveRates, state: DickeDensity | None = None) -> DickeLayout:
    """Smallest sector set closed under the dynamics for the given state.

    Collective terms never leave a sector, so without local rates only the
    sectors already populated need to be carried.
    """
    if rates.has_local or state is None:
        return DickeLayout.full(N)
    occupied = tuple(tj for tj, b in state.blocks() if np.any(b != 0))
    return DickeLayout(N, occupied or (N,))


def build_generator(N: int, rates: EffectiveRates, chi_signed: float | None = None,
                    layout: DickeLayout | None = None, cap: int = DEFAULT_CAP) -> DickeGenerator:
    _check_cap(N, cap)
    return DickeGenerator(layout or DickeLayout.full(N), rates, chi_signed)


def _solve(gen: DickeGenerator, vec0: np.ndarray, t: float, t_eval=None,
           rtol: float = 1e-10, atol: float = 1e-12):
    M = gen.matrix

    def f(_t, y):
        return M @ y

    extra = {}
    method = "DOP853"
    if stiffness(gen.N, rate_columns(gen.rates), t) > STIFF_THRESHOLD:
        method, extra = "BDF", {"jac": M}
    sol = solve_ivp(f, (0.0, t), vec0, method=method, t_eval=t_eval, rtol=rtol, atol=atol,
                    **extra)
    if not sol.success:
        raise RuntimeError(f"Dicke integration failed at t={sol.t[-1]:.6g}: {sol.message}")
    return sol


def evolve(state: DickeDensity, gen: DickeGenerator, t: float, rtol: float = 1e-10,
           atol: float = 1e-12) -> DickeDensity:
    if t < 0:
        raise ValueError("t must be non-negative")
    s = state.restricted(gen.layout)
    if t == 0:
        return s
    sol = _solve(gen, s.vec, t, rtol=rtol, atol=atol)
    return DickeDensity(gen.layout, sol.y[:, -1].copy())


def evolve_sampled(state: DickeDensity, gen: DickeGenerator, times, rtol: float = 1e-10,
                   atol: float = 1e-12):
    """Moments at each of ``times`` plus the final state.

    Returns ``(moments, final)`` with moments of shape (9, len(times)) ordered
    as :data:`MOMENT_NAMES`.
    """
    times = np.asarray(times, dtype=float)
    s = state.restricted(gen.layout)
    W = moment_functionals(gen.layout)
    if times[-1] == 0:
        raw = (W @ s.vec[:, None]).real
        return _raw_to_moments(raw), s
    sol = _solve(gen, s.vec, float(times[-1]), t_eval=times, rtol=rtol, atol=atol)
    raw = (W @ sol.y).real
    return _raw_to_moments(raw), DickeDensity(gen.layout, sol.y[:, -1].copy())


def rotate_about_y(state: DickeDensity, phi: float) -> DickeDensity:
    """exp(i phi S_y) rho exp(-i phi S_y), applied block by block."""
    vec = np.empty_like(state.vec)
    for tj, b in state.blocks():
        w, v = _jy_eig(tj)
        U = (v * np.exp(1j * phi * w)) @ v.conj().T
        vec[state.layout.slice(tj)] = (U @ b @ U.conj().T).ravel()
    return DickeDensity(state.layout, vec)


MOMENT_NAMES = ("Sx", "Sy", "Sz", "Cxx", "Cxy", "Cxz", "Cyy", "Cyz", "Czz")
_PAIRS = (("x", "x"), ("x", "y"), ("x", "z"), ("y", "y"), ("y", "z"), ("z", "z"))


def _block_ops(twoj: int):
    Jz, Jp, Jm = spin_matrices(twoj)
    return {"x": (Jp + Jm) / 2, "y": (Jp - Jm) / 2j, "z": Jz.astype(complex)}


@lru_cache(maxsize=64)
def moment_functionals(layout: DickeLayout) -> sp.csr_matrix:
    """Rows give <S_a> (3) then symmetrized <S_a S_b> (6) as dot products with the state vector."""
    rows = [[] for _ in range(9)]
    for tj in layout.twojs:
        ops = _block_ops(tj)
        mats = [ops[a] for a in "xyz"]
        mats += [0.5 * (ops[a] @ ops[b] + ops[b] @ ops[a]) for a, b in _PAIRS]
        for k, O in enumerate(mats):
            # tr(P O) = sum_{mm'} P[m, m'] O[m', m] = vec(P) . vec(O^T)
            rows[k].append(O.T.ravel())
    return sp.csr_matrix(np.array([np.concatenate(r) for r in rows]))


def _raw_to_moments(raw: np.ndarray) -> np.ndarray:
    out = np.empty_like(raw)
    out[:3] = raw[:3]
    S = {"x": raw[0], "y": raw[1], "z": raw[2]}
    for k, (a, b) in enumerate(_PAIRS):
        out[3 + k] = raw[3 + k] - S[a] * S[b]
    return out


def moments(state: DickeDensity) -> dict:
    raw = (moment_functionals(state.layout) @ state.vec[:, None]).real
    vals = _raw_to_moments(raw)[:, 0]
    return dict(zip(MOMENT_NAMES, map(float, vals)))


def observables(state: DickeDensity) -> dict:
    """Moments, (Delta S_y)^2 and the Wineland-parameter inputs."""
    mom = moments(state)
    S = np.array([mom["Sx"], mom["Sy"], mom["Sz"]])
    C = covariance_matrix(mom)
    out = dict(mom)
    out["var_Sy"] = mom["Cyy"]
    pol = float(np.linalg.norm(S))
    out["polarization"] = pol
    out["trace"] = state.trace()
    # zero polarization leaves the transverse plane and the Wineland parameter undefined
    out["wineland_defined"] = pol > 1e-12 * state.N
    if out["wineland_defined"]:
        out["min_transverse_variance"] = float(transverse_min_variance(S, C))
        out["xi_R_sq"] = state.N * out["min_transverse_variance"] / pol**2
    else:
        out["min_transverse_variance"] = None
        out["xi_R_sq"] = None
    return out


def covariance_matrix(mom) -> np.ndarray:
    return np.array([[mom["Cxx"], mom["Cxy"], mom["Cxz"]],
                     [mom["Cxy"], mom["Cyy"], mom["Cyz"]],
                     [mom["Cxz"], mom["Cyz"], mom["Czz"]]])
