"""Effective master-equation rates for the TC, SCF and ACF one-axis-twist schemes.

Two entry points produce an :class:`EffectiveRates` record:

* :func:`rates_from_physical` evaluates the rate table from microscopic
  parameters (coupling, cavity decay, detunings, drive);
* :func:`rates_from_working_point` uses the dimensionless working point
  (chi, eta, lambda) that every sweep is parameterized by.

Both agree when fed mutually consistent inputs.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import asdict, dataclass, replace


class SchemeKind(str, enum.Enum):
    TC = "TC"
    SCF = "SCF"
    ACF = "ACF"

    @classmethod
    def parse(cls, value) -> "SchemeKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown scheme {value!r}; expected one of tc, scf, acf") from None


class ValidityWarning(UserWarning):
    """The dispersive regime assumed by the effective model is violated."""


class EngineCapError(ValueError):
    """Requested N exceeds what the chosen solver supports."""


@dataclass(frozen=True)
class EffectiveRates:
    chi: float
    omega_s_tilde: float = 0.0
    Gamma_phi: float = 0.0
    Gamma_rel: float = 0.0
    gamma_z: float = 0.0
    gamma_plus: float = 0.0
    gamma_minus: float = 0.0

    DISSIPATIVE = ("Gamma_phi", "Gamma_rel", "gamma_z", "gamma_plus", "gamma_minus")

    def __post_init__(self):
        for name in ("chi", "omega_s_tilde") + self.DISSIPATIVE:
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        for name in self.DISSIPATIVE:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")

    @classmethod
    def ideal(cls, chi: float = 1.0) -> "EffectiveRates":
        return cls(chi=chi)

    @property
    def has_local(self) -> bool:
        return self.gamma_z > 0 or self.gamma_plus > 0 or self.gamma_minus > 0

    @property
    def is_dissipationless(self) -> bool:
        return all(getattr(self, name) == 0 for name in self.DISSIPATIVE)

    def with_chi(self, chi: float) -> "EffectiveRates":
        return replace(self, chi=chi)

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}


@dataclass(frozen=True)
class PhysicalParams:
    """Microscopic parameters, all angular frequencies.

    ``Gamma`` is the excited-level decay for SCF/ACF.  For TC the pair
    ``(gamma_rel, gamma_phi)`` is used instead and ``Delta`` is the
    spin-cavity detuning Delta_TC.  ``delta`` and ``beta_in`` describe the
    cavity drive and are ignored for TC.
    """

    g: float
    kappa: float
    Delta: float
    N: int = 1
    Gamma: float = 0.0
    gamma_rel: float = 0.0
    gamma_phi: float = 0.0
    delta: float = 0.0
    beta_in: float = 0.0
    omega_s: float = 0.0

    def __post_init__(self):
        for name in ("g", "kappa", "Delta", "Gamma", "gamma_rel", "gamma_phi",
                     "delta", "beta_in", "omega_s"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError("N must be a positive integer")


@dataclass(frozen=True)
class WorkingPoint:
    """Dimensionless operating point (chi, eta, lambda).

    For TC ``eta`` may be a single float (used for both dephasing and
    relaxation cooperativities) or a pair ``(eta_phi, eta_rel)``.
    ``lam`` is delta/kappa for SCF/ACF and Delta_TC/kappa for TC.
    """

    scheme: SchemeKind
    chi: float
    eta: float | tuple[float, float]
    lam: float

    def __post_init__(self):
        object.__setattr__(self, "scheme", SchemeKind.parse(self.scheme))
        if not math.isfinite(self.chi) or self.chi == 0:
            raise ValueError("chi must be finite and nonzero")
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError(f"lambda must be positive and finite, got {self.lam}")
        for e in self.eta_pair:
            if not e > 0:
                raise ValueError(f"eta must be positive, got {e}")

    @property
    def eta_pair(self) -> tuple[float, float]:
        if isinstance(self.eta, (tuple, list)):
            eta_phi, eta_rel = self.eta
            return float(eta_phi), float(eta_rel)
        return float(self.eta), float(self.eta)


def intracavity_photons(kappa: float, beta_in: float, delta: float) -> float:
    """Steady-state photon number of a coherently driven, detuned cavity."""
    for name, v in (("kappa", kappa), ("beta_in", beta_in), ("delta", delta)):
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    return kappa * abs(beta_in) ** 2 / (delta**2 + kappa**2 / 4)


def cooperativity(g: float, kappa: float, Gamma: float) -> float:
    """Single-spin cooperativity 4 g^2 / (kappa Gamma)."""
    if kappa <= 0 or Gamma <= 0:
        raise ValueError("kappa and Gamma must be positive")
    return 4 * g**2 / (kappa * Gamma)


def _check_dispersive(p: PhysicalParams, scheme: SchemeKind) -> None:
    ratio = 10.0
    if scheme is SchemeKind.TC:
        if abs(p.Delta) < ratio * abs(p.g):
            warnings.warn("|Delta_TC| is not much larger than g", ValidityWarning, stacklevel=3)
        return
    scales = {"kappa": p.kappa, "Gamma": p.Gamma, "g": abs(p.g)}
    for name, s in scales.items():
        if abs(p.Delta) < ratio * s:
            warnings.warn(f"|Delta| is not much larger than {name}", ValidityWarning, stacklevel=3)


def rates_from_physical(scheme, physical: PhysicalParams) -> EffectiveRates:
    scheme = SchemeKind.parse(scheme)
    p = physical
    _check_dispersive(p, scheme)
    if scheme is SchemeKind.TC:
        if p.Delta == 0:
            raise ValueError("Delta_TC = 0 leaves chi undefined")
        chi = p.g**2 / p.Delta
        return EffectiveRates(
            chi=chi,
            omega_s_tilde=p.omega_s,
            Gamma_rel=abs(chi) * p.kappa / abs(p.Delta),
            gamma_z=p.gamma_phi / 2,
            gamma_minus=p.gamma_rel,
        )

    if p.delta == 0:
        raise ValueError("drive detuning delta = 0 leaves chi undefined")
    if p.Delta == 0:
        raise ValueError("Delta = 0 is outside the dispersive regime")
    n_cav = intracavity_photons(p.kappa, p.beta_in, p.delta)
    lorentz = p.delta / (p.delta**2 + p.kappa**2 / 4)
    prefactor = 4.0 if scheme is SchemeKind.SCF else 1.0
    chi = prefactor * p.g**4 / p.Delta**2 * n_cav * lorentz
    Gamma_phi = abs(chi) * p.kappa / abs(p.delta)
    eta = cooperativity(p.g, p.kappa, p.Gamma)
    # chi (delta^2 + kappa^2/4) / (kappa delta eta)
    local = abs(chi) * (p.delta**2 + p.kappa**2 / 4) / (p.kappa * abs(p.delta) * eta)
    if scheme is SchemeKind.SCF:
        return EffectiveRates(chi=chi, omega_s_tilde=p.omega_s, Gamma_phi=Gamma_phi,
                              gamma_z=local / 2, gamma_plus=local, gamma_minus=local)
    return EffectiveRates(chi=chi, omega_s_tilde=p.omega_s + p.N * chi,
                          Gamma_phi=Gamma_phi, gamma_z=local)


def rates_from_working_point(wp: WorkingPoint) -> EffectiveRates:
    chi, lam = wp.chi, wp.lam
    a = abs(chi)
    if wp.scheme is SchemeKind.TC:
        eta_phi, eta_rel = wp.eta_pair
        # gamma_phi = 4g^2/(kappa eta_phi) = 4 chi lam / eta_phi, and gamma_z = gamma_phi/2
        return EffectiveRates(chi=chi, Gamma_rel=a / lam,
                              gamma_z=2 * a * lam / eta_phi, gamma_minus=4 * a * lam / eta_rel)
    eta = wp.eta_pair[0]
    local = a * (lam + 1 / (4 * lam)) / eta
    if wp.scheme is SchemeKind.SCF:
        return EffectiveRates(chi=chi, Gamma_phi=a / lam, gamma_z=local / 2,
                              gamma_plus=local, gamma_minus=local)
    return EffectiveRates(chi=chi, Gamma_phi=a / lam, gamma_z=local)


def scheme_rates(scheme, eta: float, lam: float, chi: float = 1.0) -> EffectiveRates:
    """Convenience wrapper; ``eta = inf`` returns the dissipationless rates."""
    if math.isinf(eta):
        return EffectiveRates.ideal(chi)
    return rates_from_working_point(WorkingPoint(scheme, chi, eta, lam))


def physical_for_working_point(scheme, chi: float, eta: float, lam: float,
                               kappa: float = 1.0, g: float = 1.0,
                               N: int = 1) -> PhysicalParams:
    """Build a microscopic parameter set that realizes a given working point.

    Used to cross-check the two rate routes against each other.  Delta is
    chosen large to stay in the dispersive regime and the drive amplitude
    (or Delta_TC) is solved for to hit ``chi``.
    """
    scheme = SchemeKind.parse(scheme)
    if scheme is SchemeKind.TC:
        Delta = lam * kappa
        g_tc = math.sqrt(abs(chi) * Delta)
        if chi < 0:
            Delta = -Delta
        gamma = 4 * g_tc**2 / (kappa * eta)
        return PhysicalParams(g=g_tc, kappa=kappa, Delta=Delta, N=N,
                              gamma_rel=gamma, gamma_phi=gamma)
    delta = math.copysign(lam * kappa, chi)
    Delta = 1e3 * max(kappa, g)
    Gamma = 4 * g**2 / (kappa * eta)
    prefactor = 4.0 if scheme is SchemeKind.SCF else 1.0
    lorentz = delta / (delta**2 + kappa**2 / 4)
    n_cav = chi / (prefactor * g**4 / Delta**2 * lorentz)
    beta_in = math.sqrt(n_cav * (delta**2 + kappa**2 / 4) / kappa)
    return PhysicalParams(g=g, kappa=kappa, Delta=Delta, N=N, Gamma=Gamma,
                          delta=delta, beta_in=beta_in)
