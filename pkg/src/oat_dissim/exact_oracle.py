"""Brute-force Lindblad evolution on the full 2^N Hilbert space (N <= 8).

This is the ground truth the Dicke-basis solver is checked against.  The
Liouvillian is never materialized; its action is applied as left/right
operator products on the dense density matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp

from .params import EffectiveRates, EngineCapError

MAX_SPINS = 8

# |up> is index 0; sigma_minus = |down><up|
_SZ = sp.csr_matrix(np.array([[1.0, 0.0], [0.0, -1.0]]))
_SM = sp.csr_matrix(np.array([[0.0, 0.0], [1.0, 0.0]]))
_SP = sp.csr_matrix(np.array([[0.0, 1.0], [0.0, 0.0]]))


class OracleSizeError(EngineCapError):
    pass


def _check_size(N: int) -> None:
    if N < 1:
        raise ValueError("N must be >= 1")
    if N > MAX_SPINS:
        raise OracleSizeError(
            f"N={N} exceeds the brute-force cap of {MAX_SPINS}; use the Dicke-basis solver")


def _site_op(op, site: int, N: int):
    left = sp.identity(2**site, format="csr")
    right = sp.identity(2 ** (N - site - 1), format="csr")
    return sp.kron(sp.kron(left, op), right, format="csr")


@lru_cache(maxsize=16)
def local_operators(N: int):
    """Per-site (sigma_z, sigma_minus, sigma_plus) as sparse matrices."""
    _check_size(N)
    return tuple((_site_op(_SZ, i, N), _site_op(_SM, i, N), _site_op(_SP, i, N))
                 for i in range(N))


@lru_cache(maxsize=16)
def collective_operators(N: int) -> dict:
    ops = local_operators(N)
    Sz = sum(o[0] for o in ops) * 0.5
    Sm = sum(o[1] for o in ops)
    Sp = sum(o[2] for o in ops)
    Sx = (Sp + Sm) * 0.5
    Sy = (Sp - Sm) * (-0.5j)
    return {"x": Sx.toarray(), "y": Sy.toarray(), "z": Sz.toarray(),
            "m": Sm.toarray(), "p": Sp.toarray()}


@dataclass(frozen=True)
class DenseState:
    rho: np.ndarray
    N: int

    def check(self, tol_trace=1e-10, tol_herm=1e-12, tol_pos=1e-10) -> None:
        tr = np.trace(self.rho).real
        if abs(tr - 1) > tol_trace:
            raise AssertionError(f"trace {tr} deviates from 1")
        if np.max(np.abs(self.rho - self.rho.conj().T)) > tol_herm:
            raise AssertionError("rho is not Hermitian")
        if np.linalg.eigvalsh(self.rho).min() < -tol_pos:
            raise AssertionError("rho has a negative eigenvalue")


class Liouvillian:
    """Matrix-free action of the effective master equation (rotating frame)."""

    def __init__(self, N: int, rates: EffectiveRates, chi_signed: float | None = None):
        _check_size(N)
        self.N = N
        self.rates = rates
        self.chi = rates.chi if chi_signed is None else chi_signed
        c = collective_operators(N)
        self._Sz = c["z"]
        self._H = self.chi * (c["z"] @ c["z"])
        self._Sm = c["m"]
        self._SpSm = c["p"] @ c["m"]
        self._local = local_operators(N)

    def __call__(self, rho: np.ndarray) -> np.ndarray:
        r = self.rates
        out = -1j * (self._H @ rho - rho @ self._H)
        if r.Gamma_phi:
            Sz = self._Sz
            out += r.Gamma_phi * (Sz @ rho @ Sz - 0.5 * (Sz @ (Sz @ rho) + (rho @ Sz) @ Sz))
        if r.Gamma_rel:
            Sm = self._Sm
            out += r.Gamma_rel * (Sm @ rho @ Sm.conj().T
                                  - 0.5 * (self._SpSm @ rho + rho @ self._SpSm))
        # local operators are real, so rho L^dag = (L rho^T)^T
        if r.gamma_z:
            acc = sum(sz @ (sz @ rho.T).T for sz, _, _ in self._local)
            out += r.gamma_z * (acc - self.N * rho)
        for rate, pick in ((r.gamma_minus, 1), (r.gamma_plus, 2)):
            if not rate:
                continue
            acc = np.zeros_like(rho)
            for ops in self._local:
                L = ops[pick]
                LdL = L.T @ L
                acc += L @ (L @ rho.T).T - 0.5 * (LdL @ rho + (LdL @ rho.T).T)
            out += rate * acc
        return out

    def vector_field(self):
        d = 2**self.N

        def f(_t, y):
            return self(y.reshape(d, d)).ravel()

        return f


def build_liouvillian(N: int, rates: EffectiveRates, chi_signed: float | None = None) -> Liouvillian:
    return Liouvillian(N, rates, chi_signed)


def coherent_state(N: int, axis=(1.0, 0.0, 0.0)) -> DenseState:
    """Product state with every spin polarized along ``axis``."""
    _check_size(N)
    n = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(n)
    if norm == 0:
        raise ValueError("axis must be nonzero")
    n = n / norm
    theta = np.arccos(np.clip(n[2], -1, 1))
    phi = np.arctan2(n[1], n[0])
    single = np.array([np.cos(theta / 2), np.exp(1j * phi) * np.sin(theta / 2)])
    psi = np.array([1.0 + 0j])
    for _ in range(N):
        psi = np.kron(psi, single)
    return DenseState(np.outer(psi, psi.conj()), N)


def maximally_mixed(N: int) -> DenseState:
    _check_size(N)
    d = 2**N
    return DenseState(np.eye(d, dtype=complex) / d, N)


def rotate_about_y(state: DenseState, phi: float) -> DenseState:
    """Apply exp(i phi S_y) rho exp(-i phi S_y)."""
    Sy = collective_operators(state.N)["y"]
    w, v = np.linalg.eigh(Sy)
    U = (v * np.exp(1j * phi * w)) @ v.conj().T
    return DenseState(U @ state.rho @ U.conj().T, state.N)


def evolve(state: DenseState, L: Liouvillian, t: float, rtol: float = 1e-11,
           atol: float = 1e-13) -> DenseState:
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        return state
    d = 2**state.N
    sol = solve_ivp(L.vector_field(), (0.0, t), state.rho.ravel().astype(complex),
                    method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"oracle integration failed at t={sol.t[-1]}: {sol.message}")
    rho = sol.y[:, -1].reshape(d, d)
    return DenseState(0.5 * (rho + rho.conj().T), state.N)


_PAIRS = (("x", "x"), ("x", "y"), ("x", "z"), ("y", "y"), ("y", "z"), ("z", "z"))


@lru_cache(maxsize=16)
def _functionals(N: int) -> np.ndarray:
    """Rows w with <O> = w . vec(rho): first moments, then symmetrized second moments."""
    c = collective_operators(N)
    mats = [c[a] for a in "xyz"]
    mats += [0.5 * (c[a] @ c[b] + c[b] @ c[a]) for a, b in _PAIRS]
    return np.array([O.T.ravel() for O in mats])


def evolve_sampled(state: DenseState, L: Liouvillian, times, rtol: float = 1e-11,
                   atol: float = 1e-13):
    """Nine moments at each of ``times`` (shape (9, n)) and the final state."""
    times = np.asarray(times, dtype=float)
    d = 2**state.N
    if times[-1] == 0:
        snaps = [state.rho.ravel()]
    else:
        sol = solve_ivp(L.vector_field(), (0.0, float(times[-1])), state.rho.ravel().astype(complex),
                        method="DOP853", t_eval=times, rtol=rtol, atol=atol)
        if not sol.success:
            raise RuntimeError(f"oracle integration failed at t={sol.t[-1]}: {sol.message}")
        snaps = sol.y.T
    raw = (np.asarray(snaps) @ _functionals(state.N).T).real.T
    out = raw.copy()
    for k, (a, b) in enumerate(_PAIRS):
        out[3 + k] -= raw["xyz".index(a)] * raw["xyz".index(b)]
    rho = snaps[-1].reshape(d, d)
    return out, DenseState(0.5 * (rho + rho.conj().T), state.N)


def expectations(state: DenseState) -> dict:
    """First moments and symmetrized second moments of the collective spin."""
    c = collective_operators(state.N)
    rho = state.rho
    ops = {a: c[a] for a in "xyz"}
    out = {f"S{a}": float(np.real(np.trace(rho @ ops[a]))) for a in "xyz"}
    for i, a in enumerate("xyz"):
        for b in "xyz"[i:]:
            AB = ops[a] @ ops[b]
            sym = 0.5 * (AB + ops[b] @ ops[a])
            second = float(np.real(np.trace(rho @ sym)))
            out[f"C{a}{b}"] = second - out[f"S{a}"] * out[f"S{b}"]
    out["var_Sy"] = out["Cyy"]
    out["trace"] = float(np.real(np.trace(rho)))
    return out
