"""Amplification-only and twist-untwist protocol runners on any of the three engines."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import dicke, exact_oracle, mft
from .params import EffectiveRates, SchemeKind

MAX_PHI = 0.05
DEFAULT_PHI = 1e-3
LINEARITY_TOL = 0.01
SIGMA_FLOOR = -0.99


class Engine(str, enum.Enum):
    MFT = "MFT"
    DICKE = "DICKE"
    ORACLE = "ORACLE"

    @classmethod
    def parse(cls, value) -> "Engine":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown engine {value!r}; expected mft, dicke or oracle") from None


class Mode(str, enum.Enum):
    AMPLIFY_ONLY = "AMPLIFY_ONLY"
    TWIST_UNTWIST = "TWIST_UNTWIST"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, cls):
            return value
        key = str(value).upper().replace("-", "_")
        aliases = {"AMPLIFY": "AMPLIFY_ONLY", "TWIST": "TWIST_UNTWIST", "TU": "TWIST_UNTWIST"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown mode {value!r}") from None


class WinelandUndefined(ValueError):
    """Mean spin vanishes, so no transverse plane exists."""


@dataclass(frozen=True)
class ProtocolSpec:
    scheme: SchemeKind
    engine: Engine
    N: int
    rates: EffectiveRates
    phi: float = DEFAULT_PHI
    t_sqz: float = 0.0
    t_unsqz: float | None = None
    mode: Mode = Mode.AMPLIFY_ONLY
    xi_det_sq: float = 1.0
    t_window: float | None = None  # amplification horizon, default 5/(|chi| sqrt N)
    n_samples: int = 401
    check_linearity: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scheme", SchemeKind.parse(self.scheme))
        object.__setattr__(self, "engine", Engine.parse(self.engine))
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        if int(self.N) != self.N or self.N < 1:
            raise ValueError("N must be a positive integer")
        if not (0 < self.phi <= MAX_PHI):
            raise ValueError(f"phi must lie in (0, {MAX_PHI}], got {self.phi}")
        if not (self.t_sqz >= 0 and math.isfinite(self.t_sqz)):
            raise ValueError("t_sqz must be finite and non-negative")
        if self.t_unsqz is None:
            object.__setattr__(self, "t_unsqz", self.t_sqz)
        elif self.t_unsqz != self.t_sqz:
            raise ValueError("the protocol requires t_unsqz = t_sqz")
        if self.mode is Mode.AMPLIFY_ONLY and self.t_sqz != 0:
            raise ValueError("amplification-only runs start from a coherent state (t_sqz = 0)")
        if self.xi_det_sq < 0:
            raise ValueError("xi_det_sq must be non-negative")
        if self.n_samples < 3:
            raise ValueError("n_samples must be >= 3")

    @property
    def subtract_background(self) -> bool:
        return self.scheme is SchemeKind.TC

    @property
    def window(self) -> float:
        if self.t_window is not None:
            return self.t_window
        return 5.0 / (abs(self.rates.chi) * math.sqrt(self.N))


@dataclass
class AmplificationSeries:
    times: np.ndarray
    signal: np.ndarray  # (9, n) moments with the rotated initial state
    background: np.ndarray | None  # (9, n) moments for phi = 0, TC only
    phi: float


@dataclass
class ProtocolResult:
    G: float
    G_sub: float
    sigma_diss_sq: float
    xi_R_sq: float
    delta_phi_sq: float
    gmet: float
    t_opt: float
    phi: float
    flags: list = field(default_factory=list)
    series: AmplificationSeries | None = None
    final: dict | None = None

    def to_dict(self) -> dict:
        return {"G": self.G, "G_sub": self.G_sub, "sigma_diss_sq": self.sigma_diss_sq,
                "xi_R_sq": self.xi_R_sq, "delta_phi_sq": self.delta_phi_sq, "gmet": self.gmet,
                "t_opt": self.t_opt, "phi": self.phi, "flags": list(self.flags)}


# --- engine adapters: initial state, rotation, staged evolution with sampling ---

class _MftBackend:
    def __init__(self, N, rates):
        self.N, self.rates = N, rates

    def initial(self):
        return mft.coherent_moments(self.N)

    def rotate(self, state, phi):
        return mft.rotate_about_y(state, phi)

    def run(self, state, chi, times):
        if times[-1] == 0:
            return state.to_vector()[:, None].repeat(len(times), 1), state
        traj = mft.integrate(state, self.rates, [(times[-1], chi)], n_samples=2)
        return traj.at(times), traj.final

    @staticmethod
    def moments(state):
        return state.to_vector()


class _DickeBackend:
    def __init__(self, N, rates):
        self.N, self.rates = N, rates
        self._gens = {}

    def initial(self):
        return dicke.coherent_state(self.N)

    def rotate(self, state, phi):
        return dicke.rotate_about_y(state, phi)

    def _gen(self, state, chi):
        layout = dicke.layout_for(self.N, self.rates, state)
        key = (layout.twojs, chi)
        if key not in self._gens:
            self._gens[key] = dicke.DickeGenerator(layout, self.rates, chi)
        return self._gens[key]

    def run(self, state, chi, times):
        return dicke.evolve_sampled(state, self._gen(state, chi), times)

    @staticmethod
    def moments(state):
        m = dicke.moments(state)
        return np.array([m[k] for k in dicke.MOMENT_NAMES])


class _OracleBackend:
    def __init__(self, N, rates):
        self.N, self.rates = N, rates
        exact_oracle.local_operators(N)  # raises the size error early

    def initial(self):
        return exact_oracle.coherent_state(self.N)

    def rotate(self, state, phi):
        return exact_oracle.rotate_about_y(state, phi)

    def run(self, state, chi, times):
        L = exact_oracle.build_liouvillian(self.N, self.rates, chi)
        return exact_oracle.evolve_sampled(state, L, times)

    @staticmethod
    def moments(state):
        e = exact_oracle.expectations(state)
        return np.array([e[k] for k in mft.MOMENT_NAMES])


def backend(engine, N: int, rates: EffectiveRates):
    engine = Engine.parse(engine)
    cls = {Engine.MFT: _MftBackend, Engine.DICKE: _DickeBackend,
           Engine.ORACLE: _OracleBackend}[engine]
    if engine is Engine.DICKE:
        dicke._check_cap(N, dicke.DEFAULT_CAP)
    return cls(N, rates)


# --- observables ---

def transverse_min_variance(S, C) -> float:
    return float(mft.transverse_min_variance(S, C))


def wineland(observables, N: int | None = None) -> float:
    """Wineland parameter N (Delta S_perp)^2_min / |<S>|^2 from a moments mapping."""
    o = observables
    N = o.get("N", N) if isinstance(o, dict) else N
    if N is None:
        raise ValueError("N is required")
    S = np.array([o["Sx"], o["Sy"], o["Sz"]])
    C = np.array([[o["Cxx"], o["Cxy"], o["Cxz"]],
                  [o["Cxy"], o["Cyy"], o["Cyz"]],
                  [o["Cxz"], o["Cyz"], o["Czz"]]])
    pol = np.linalg.norm(S)
    if pol <= 1e-12 * N:
        raise WinelandUndefined("mean spin is zero; the Wineland parameter is undefined")
    return N * transverse_min_variance(S, C) / pol**2


def estimation_error(G: float, sigma_diss_sq: float, xi_det_sq: float, N: int):
    """Return ((Delta phi)^2, metrological gain) for a measured gain and excess noise."""
    if not G > 0:
        raise ValueError(f"gain must be positive, got {G}")
    noise = 1 + max(sigma_diss_sq, SIGMA_FLOOR) + xi_det_sq
    dphi2 = noise / (G**2 * N)
    return dphi2, 1.0 / (N * dphi2)


def _moment_dict(vec) -> dict:
    return dict(zip(mft.MOMENT_NAMES, map(float, vec)))


def sample_times(window: float, n: int = 401) -> np.ndarray:
    """Linear grid merged with a geometric one, so early optima are resolved too."""
    lin = np.linspace(0.0, window, n)
    dt = lin[1]
    geo = np.geomspace(dt * 1e-3, dt, 40, endpoint=False)
    return np.concatenate([lin[:1], geo, lin[1:]])


# --- gain extraction ---

def first_peak_index(y: np.ndarray) -> int:
    """Index of the first local maximum, or the global argmax if there is none inside."""
    rising = np.diff(y) > 0
    falls = np.flatnonzero(rising[:-1] & ~rising[1:])
    return int(falls[0] + 1) if falls.size else int(np.argmax(y))


def parabolic_peak(x: np.ndarray, y: np.ndarray, first: bool = False):
    """Peak of samples refined by a parabola through the bracketing points.

    ``first`` selects the first local maximum instead of the global one.
    Returns (x_peak, y_peak, on_boundary).
    """
    i = first_peak_index(y) if first else int(np.argmax(y))
    if i == 0 or i == len(y) - 1:
        return float(x[i]), float(y[i]), True
    x0, x1, x2 = x[i - 1:i + 2]
    y0, y1, y2 = y[i - 1:i + 2]
    denom = (x0 - x1) * (x0 - x2) * (x1 - x2)
    a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom
    b = (x2**2 * (y0 - y1) + x1**2 * (y2 - y0) + x0**2 * (y1 - y2)) / denom
    if a >= 0:
        return float(x1), float(y1), False
    xv = -b / (2 * a)
    c = y0 - a * x0**2 - b * x0
    return float(xv), float(a * xv**2 + b * xv + c), False


def gain_from_series(times, Sy, phi: float, N: int, background=None, orientation: float = 1.0):
    """Peak gain of a sampled S_y(t).  Returns (G, t_opt, on_boundary).

    The first local maximum is used: past it, the Gaussian closure can
    produce spurious revivals that exceed the physical peak.
    """
    Sy = np.asarray(Sy, dtype=float)
    if background is not None:
        Sy = Sy - np.asarray(background, dtype=float)
    g = orientation * Sy / (N * phi / 2)
    t, G, edge = parabolic_peak(np.asarray(times, dtype=float), g, first=True)
    return G, t, edge


# --- protocol runs ---

def run_amplification(spec: ProtocolSpec) -> AmplificationSeries:
    if spec.mode is not Mode.AMPLIFY_ONLY:
        raise ValueError("run_amplification needs an AMPLIFY_ONLY spec")
    be = backend(spec.engine, spec.N, spec.rates)
    times = sample_times(spec.window, spec.n_samples)
    chi = spec.rates.chi
    css = be.initial()
    signal, _ = be.run(be.rotate(css, spec.phi), chi, times)
    background = be.run(css, chi, times)[0] if spec.subtract_background else None
    return AmplificationSeries(times, signal, background, spec.phi)


def _amplification_result(spec: ProtocolSpec) -> ProtocolResult:
    series = run_amplification(spec)
    N, phi = spec.N, spec.phi
    orient = math.copysign(1.0, spec.rates.chi)
    G, t_opt, edge = gain_from_series(series.times, series.signal[1], phi, N,
                                      orientation=orient)
    flags = ["t-boundary"] if edge else []
    G_sub = math.nan
    if series.background is not None:
        G_sub, t_opt, edge_sub = gain_from_series(series.times, series.signal[1], phi, N,
                                                  series.background[1], orient)
        if edge_sub and "t-boundary" not in flags:
            flags.append("t-boundary")
    G_eff = G_sub if spec.subtract_background else G
    Cyy = float(np.interp(t_opt, series.times, series.signal[6]))
    sigma = 4 * Cyy / N - 1
    dphi2, gmet = _metrology(G_eff, sigma, spec.xi_det_sq, N, flags)
    final = _moment_dict([np.interp(t_opt, series.times, row) for row in series.signal])
    return ProtocolResult(G, G_sub, sigma, 1.0, dphi2, gmet, t_opt, phi, flags, series, final)


def _metrology(G, sigma, xi_det_sq, N, flags):
    if G > 0:
        return estimation_error(G, sigma, xi_det_sq, N)
    flags.append("no-gain")
    return math.inf, 0.0


def _twist_untwist_result(spec: ProtocolSpec) -> ProtocolResult:
    N, phi, chi = spec.N, spec.phi, spec.rates.chi
    be = backend(spec.engine, N, spec.rates)
    T = spec.t_sqz
    stage = np.array([0.0, T])
    squeezed_traj, squeezed = be.run(be.initial(), chi, stage)
    post_twist = squeezed_traj[:, -1]
    flags = []
    try:
        xi = float(wineland(_moment_dict(post_twist), N))
    except WinelandUndefined:
        xi, flags = math.nan, flags + ["wineland-undefined"]
    final_traj, _ = be.run(be.rotate(squeezed, phi), -chi, stage)
    final = final_traj[:, -1]
    # the untwisted signal points along -sign(chi) y
    orient = -math.copysign(1.0, chi)
    G = float(orient * final[1] / (N * phi / 2))
    G_sub = math.nan
    if spec.subtract_background:
        bg_traj, _ = be.run(squeezed, -chi, stage)
        G_sub = float(orient * (final[1] - bg_traj[1, -1]) / (N * phi / 2))
    sigma = float(4 * final[6] / N - 1)
    G_eff = G_sub if spec.subtract_background else G
    dphi2, gmet = _metrology(G_eff, sigma, spec.xi_det_sq, N, flags)
    return ProtocolResult(G, G_sub, sigma, xi, dphi2, gmet, 2 * T, phi, flags, None,
                          _moment_dict(final))


def _single(spec: ProtocolSpec) -> ProtocolResult:
    if spec.mode is Mode.AMPLIFY_ONLY:
        return _amplification_result(spec)
    return _twist_untwist_result(spec)


def _linear(a: float, b: float) -> bool:
    return abs(a - b) <= LINEARITY_TOL * max(abs(a), abs(b)) + 1e-9


def run_protocol(spec: ProtocolSpec, max_halvings: int = 4) -> ProtocolResult:
    """Run a protocol, halving phi until G(phi) and G(phi/2) agree within 1%."""
    res = _single(spec)
    if not spec.check_linearity:
        return res
    key = "G_sub" if spec.subtract_background else "G"
    for attempt in range(max_halvings + 1):
        half = _single(replace(spec, phi=spec.phi / 2))
        if _linear(getattr(res, key), getattr(half, key)):
            if attempt:
                res.flags.append("linearity-retry")
            return res
        spec, res = replace(spec, phi=spec.phi / 2), half
    res.flags.append("linearity-fail")
    return res


def run_twist_untwist(spec: ProtocolSpec) -> ProtocolResult:
    if spec.mode is not Mode.TWIST_UNTWIST:
        raise ValueError("run_twist_untwist needs a TWIST_UNTWIST spec")
    return run_protocol(spec)
