"""Optimizers over (time, lambda), threshold and collapse fits, and closed-form references."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from . import dicke, mft
from .params import EffectiveRates, SchemeKind, scheme_rates
from .protocol import (DEFAULT_PHI, Engine, Mode, ProtocolSpec, backend, estimation_error,
                       gain_from_series, parabolic_peak, run_protocol, sample_times)

LAMBDA_RANGE = (1e-2, 1e3)
LAMBDA_POINTS = 60
LAMBDA_RTOL = 1e-3
CHUNK = 6  # lambdas integrated together; neighbours have similar stiffness
TU_CHUNK = 4  # lambdas per twist-untwist batch (each carries the full T grid)


class FitError(ValueError):
    pass


def lambda_grid(n: int = LAMBDA_POINTS, lo: float = LAMBDA_RANGE[0], hi: float = LAMBDA_RANGE[1]):
    return np.geomspace(lo, hi, n)


def amplification_window(N: int, chi: float = 1.0) -> float:
    return 5.0 / (abs(chi) * math.sqrt(N))


def squeezing_window(N: int, chi: float = 1.0) -> float:
    return 5.0 / (abs(chi) * N ** (2 / 3))


@dataclass
class Optimum:
    """Best value of an objective with the parameters that achieve it."""

    value: float
    lambda_opt: float
    t_opt: float
    flags: list = field(default_factory=list)
    result: object = None  # ProtocolResult re-evaluated at the optimum

    def to_dict(self) -> dict:
        out = {"value": self.value, "lambda_opt": self.lambda_opt, "t_opt": self.t_opt,
               "flags": list(self.flags)}
        if self.result is not None:
            out["result"] = self.result.to_dict()
        return out


def _rates(scheme, eta, lam, chi) -> EffectiveRates:
    return scheme_rates(scheme, eta, lam, chi)


def _columns(scheme, eta, lams, chi) -> np.ndarray:
    return mft.rate_columns([_rates(scheme, eta, lam, chi) for lam in lams])


def _css_batch(N: int, B: int, phi: float | None = None) -> np.ndarray:
    y = mft.coherent_moments(N).to_vector()[:, None].repeat(B, 1)
    return y if phi is None else mft.rotate_vectors(y, phi)


# --- scans: objective on a batch of lambdas ---

def _mft_gain_scan(scheme, N, eta, lams, chi, phi, times):
    """Peak gain for every lambda; returns (G, t_opt, on_boundary) arrays."""
    scheme = SchemeKind.parse(scheme)
    tc = scheme is SchemeKind.TC
    G = np.empty(len(lams))
    T = np.empty(len(lams))
    edge = np.zeros(len(lams), bool)
    orient = math.copysign(1.0, chi)
    for start in range(0, len(lams), CHUNK):
        part = lams[start:start + CHUNK]
        B = len(part)
        cols = _columns(scheme, eta, part, chi)
        y0 = _css_batch(N, B, phi)
        if tc:
            y0 = np.concatenate([y0, _css_batch(N, B)], axis=1)
            cols = np.concatenate([cols, cols], axis=1)
        sol = mft.integrate_batch(y0, N, chi, cols, times[-1], t_eval=times)
        Sy = sol.y.reshape(9, -1, len(times))[1]
        for k in range(B):
            bg = Sy[B + k] if tc else None
            G[start + k], T[start + k], edge[start + k] = gain_from_series(
                times, Sy[k], phi, N, bg, orient)
    return G, T, edge


def _engine_gain_scan(scheme, engine, N, eta, lams, chi, phi, times):
    G = np.empty(len(lams))
    T = np.empty(len(lams))
    edge = np.zeros(len(lams), bool)
    tc = SchemeKind.parse(scheme) is SchemeKind.TC
    orient = math.copysign(1.0, chi)
    for k, lam in enumerate(lams):
        be = backend(engine, N, _rates(scheme, eta, lam, chi))
        css = be.initial()
        sig, _ = be.run(be.rotate(css, phi), chi, times)
        bg = be.run(css, chi, times)[0][1] if tc else None
        G[k], T[k], edge[k] = gain_from_series(times, sig[1], phi, N, bg, orient)
    return G, T, edge


def _tu_curves(scheme, N, eta, lams, chi, phi, Ts, xi_det_sq):
    """Twist-untwist outcome on the (lambda, twist duration) grid, MFT, batched.

    Each member runs in rescaled time s in [0, 1] per stage with physical
    time t = T s, so all durations share one solve per stage.  Returns
    (G, sigma^2, G_met) arrays of shape (len(lams), len(Ts)).
    """
    tc = SchemeKind.parse(scheme) is SchemeKind.TC
    lams = np.atleast_1d(np.asarray(lams, float))
    nT = len(Ts)
    out = np.empty((3, len(lams), nT))
    orient = -math.copysign(1.0, chi)
    for start in range(0, len(lams), TU_CHUNK):
        part = lams[start:start + TU_CHUNK]
        B = len(part) * nT
        cols = np.repeat(_columns(scheme, eta, part, chi), nT, axis=1)
        scale = np.tile(Ts, len(part))
        s1 = mft.integrate_batch(_css_batch(N, B), N, chi, cols, 1.0, scale=scale, t_eval=[1.0])
        squeezed = s1.y.reshape(9, B)
        y2 = mft.rotate_vectors(squeezed, phi)
        if tc:
            y2 = np.concatenate([y2, squeezed], axis=1)
            cols, scale = np.concatenate([cols, cols], 1), np.concatenate([scale, scale])
        fin = mft.integrate_batch(y2, N, -chi, cols, 1.0, scale=scale, t_eval=[1.0]).y
        fin = fin.reshape(9, -1)
        Sy = fin[1, :B] - (fin[1, B:] if tc else 0.0)
        G = orient * Sy / (N * phi / 2)
        sigma = 4 * fin[6, :B] / N - 1
        gmet = np.where(G > 0, G**2 / (1 + np.maximum(sigma, -0.99) + xi_det_sq), 0.0)
        out[:, start:start + len(part)] = np.stack([G, sigma, gmet]).reshape(3, len(part), nT)
    return out[0], out[1], out[2]


def _mft_tu_scan(scheme, N, eta, lams, chi, phi, Ts, xi_det_sq, objective="gmet"):
    G, _, gmet = _tu_curves(scheme, N, eta, lams, chi, phi, Ts, xi_det_sq)
    target = gmet if objective == "gmet" else G
    res = [parabolic_peak(np.log(Ts), row, first=True) for row in target]
    return (np.array([r[1] for r in res]), np.exp([r[0] for r in res]),
            np.array([r[2] for r in res]))


def _mft_wineland_scan(scheme, N, eta, lams, chi, times):
    xi = np.empty(len(lams))
    T = np.empty(len(lams))
    edge = np.zeros(len(lams), bool)
    for start in range(0, len(lams), CHUNK):
        part = lams[start:start + CHUNK]
        B = len(part)
        sol = mft.integrate_batch(_css_batch(N, B), N, chi, _columns(scheme, eta, part, chi),
                                  times[-1], t_eval=times)
        ys = sol.y.reshape(9, B, len(times))
        for k in range(B):
            w = mft.wineland_vectors(ys[:, k, 1:], N)
            t, v, e = parabolic_peak(times[1:], -w, first=False)
            xi[start + k], T[start + k], edge[start + k] = -v, t, e
    return xi, T, edge


def _engine_wineland_scan(scheme, engine, N, eta, lams, chi, times):
    xi = np.empty(len(lams))
    T = np.empty(len(lams))
    edge = np.zeros(len(lams), bool)
    for k, lam in enumerate(lams):
        be = backend(engine, N, _rates(scheme, eta, lam, chi))
        ys, _ = be.run(be.initial(), chi, times)
        w = mft.wineland_vectors(ys[:, 1:], N)
        t, v, e = parabolic_peak(times[1:], -w)
        xi[k], T[k], edge[k] = -v, t, e
    return xi, T, edge


# --- lambda optimization shared by all objectives ---

def _optimize_lambda(score, lams, refine: bool = True):
    """Maximize ``score(lams) -> (values, times, edges)`` over a log grid plus golden section.

    Returns (best value, lambda, time, time-edge flag, flags).
    """
    vals, times, edges = score(np.asarray(lams))
    vals = np.where(np.isfinite(vals), vals, -np.inf)
    i = int(np.argmax(vals))
    flags = []
    best = (float(vals[i]), float(lams[i]), float(times[i]), bool(edges[i]))
    if len(lams) == 1:
        return best, flags
    if i in (0, len(lams) - 1):
        flags.append("lambda-boundary")
        return best, flags
    if not refine or not (vals[i] > vals[i - 1] and vals[i] > vals[i + 1]):
        return best, flags
    # seed with the grid values so the bracket stays valid; a single-lambda re-solve can
    # differ from the batched one at the solver tolerance
    cache = {float(lams[k]): (float(vals[k]), float(times[k]), bool(edges[k]))
             for k in (i - 1, i, i + 1)}

    def neg(lam):
        if lam <= 0:
            return math.inf
        if lam not in cache:
            v, t, e = score(np.array([lam]))
            cache[lam] = (float(v[0]), float(t[0]), bool(e[0]))
        return -cache[lam][0]

    res = optimize.minimize_scalar(neg, bracket=(lams[i - 1], lams[i], lams[i + 1]),
                                   method="golden", tol=LAMBDA_RTOL,
                                   options={"maxiter": 60})
    lam = float(res.x)
    if lam in cache and cache[lam][0] >= best[0]:
        v, t, e = cache[lam]
        best = (v, lam, t, e)
    return best, flags


def _ideal(eta) -> bool:
    return math.isinf(eta)


def maximize_gain(scheme, N: int, eta: float, engine="MFT", chi: float = 1.0,
                  lams=None, phi: float = DEFAULT_PHI, window: float | None = None,
                  n_samples: int = 401, xi_det_sq: float = 1.0, refine: bool = True,
                  evaluate: bool = True) -> Optimum:
    """Maximize the amplification-only gain over the amplification time and lambda."""
    engine = Engine.parse(engine)
    lams = lambda_grid() if lams is None else np.asarray(lams, float)
    if _ideal(eta):
        lams = np.array([1.0])
    window = amplification_window(N, chi) if window is None else window
    flags = []
    for attempt in range(2):
        times = sample_times(window, n_samples)
        if engine is Engine.MFT:
            def score(ls, times=times):
                return _mft_gain_scan(scheme, N, eta, ls, chi, phi, times)
        else:
            def score(ls, times=times):
                return _engine_gain_scan(scheme, engine, N, eta, ls, chi, phi, times)
        (val, lam, t, edge), lflags = _optimize_lambda(score, lams, refine and len(lams) > 2)
        if not edge or t < window / 2:
            break
        if attempt == 0:
            window *= 2
    if edge and t >= window / 2:
        flags.append("t-boundary")
    flags += lflags
    opt = Optimum(val, math.nan if _ideal(eta) else lam, t, flags)
    if evaluate:
        spec = ProtocolSpec(scheme, engine, N, _rates(scheme, eta, lam, chi), phi=phi,
                            mode=Mode.AMPLIFY_ONLY, xi_det_sq=xi_det_sq, t_window=window,
                            n_samples=n_samples)
        opt.result = run_protocol(spec)
        opt.flags += [f for f in opt.result.flags if f not in opt.flags]
    return opt


def _tu_times(N, chi, window, n):
    return np.geomspace(window * 1e-3, window, n)


def maximize_gmet(scheme, N: int, eta: float, xi_det_sq: float = 1.0, engine="MFT",
                  chi: float = 1.0, lams=None, phi: float = DEFAULT_PHI,
                  window: float | None = None, n_times: int = 60, refine: bool = True,
                  objective: str = "gmet", evaluate: bool = True) -> Optimum:
    """Maximize G^2/(1 + sigma^2 + Xi^2) (or G, with objective="gain") over t_sqz and lambda."""
    engine = Engine.parse(engine)
    lams = lambda_grid() if lams is None else np.asarray(lams, float)
    if _ideal(eta):
        lams = np.array([1.0])
    window = amplification_window(N, chi) if window is None else window
    flags = []
    for attempt in range(2):
        Ts = _tu_times(N, chi, window, n_times)

        def score(ls, Ts=Ts):
            if engine is Engine.MFT:
                return _mft_tu_scan(scheme, N, eta, ls, chi, phi, Ts, xi_det_sq, objective)
            out = [_engine_tu_best(scheme, engine, N, eta, lam, chi, phi, Ts, xi_det_sq,
                                   objective) for lam in ls]
            return (np.array([o[0] for o in out]), np.array([o[1] for o in out]),
                    np.array([o[2] for o in out]))

        (val, lam, t, edge), lflags = _optimize_lambda(score, lams, refine and len(lams) > 2)
        if not edge or t < window / 2:
            break
        if attempt == 0:
            window *= 2
    if edge and t >= window / 2:
        flags.append("t-boundary")
    flags += lflags
    opt = Optimum(val, math.nan if _ideal(eta) else lam, t, flags)
    if evaluate:
        spec = ProtocolSpec(scheme, engine, N, _rates(scheme, eta, lam, chi), phi=phi,
                            t_sqz=t, mode=Mode.TWIST_UNTWIST, xi_det_sq=xi_det_sq)
        opt.result = run_protocol(spec)
        opt.flags += [f for f in opt.result.flags if f not in opt.flags]
    return opt


def _engine_tu_best(scheme, engine, N, eta, lam, chi, phi, Ts, xi_det_sq, objective):
    vals = np.empty(len(Ts))
    rates = _rates(scheme, eta, lam, chi)
    for k, T in enumerate(Ts):
        spec = ProtocolSpec(scheme, engine, N, rates, phi=phi, t_sqz=float(T),
                            mode=Mode.TWIST_UNTWIST, xi_det_sq=xi_det_sq, check_linearity=False)
        r = run_protocol(spec)
        vals[k] = r.gmet if objective == "gmet" else (r.G_sub if spec.subtract_background else r.G)
    u, val, edge = parabolic_peak(np.log(Ts), vals, first=True)
    return val, float(np.exp(u)), edge


def minimize_wineland(scheme, N: int, eta: float, engine="MFT", chi: float = 1.0, lams=None,
                      window: float | None = None, n_samples: int = 401,
                      refine: bool = True) -> Optimum:
    """Minimize the Wineland parameter over the squeezing time and lambda."""
    engine = Engine.parse(engine)
    lams = lambda_grid() if lams is None else np.asarray(lams, float)
    if _ideal(eta):
        lams = np.array([1.0])
    window = squeezing_window(N, chi) if window is None else window
    flags = []
    for attempt in range(2):
        times = sample_times(window, n_samples)

        def score(ls, times=times):
            if engine is Engine.MFT:
                xi, T, e = _mft_wineland_scan(scheme, N, eta, ls, chi, times)
            else:
                xi, T, e = _engine_wineland_scan(scheme, engine, N, eta, ls, chi, times)
            return -xi, T, e

        (val, lam, t, edge), lflags = _optimize_lambda(score, lams, refine and len(lams) > 2)
        if not edge or t < window / 2:
            break
        if attempt == 0:
            window *= 2
    if edge and t >= window / 2:
        flags.append("t-boundary")
    return Optimum(-val, math.nan if _ideal(eta) else lam, t, flags + lflags)


# --- fits ---

@dataclass
class FitResult:
    kind: str
    params: dict
    stderr: dict
    residual_norm: float
    window: dict
    n_points: int
    excluded: list = field(default_factory=list)
    tags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params, "stderr": self.stderr,
                "residual_norm": self.residual_norm, "window": self.window,
                "n_points": self.n_points, "excluded": self.excluded, "tags": self.tags}


def crossing(x, y, level: float):
    """First x where y crosses ``level`` from below, interpolated linearly in log x."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    order = np.argsort(x)
    x, y = x[order], y[order]
    above = y >= level
    idx = np.flatnonzero(~above[:-1] & above[1:])
    if idx.size == 0:
        return None
    k = idx[0]
    lx = np.log(x[k:k + 2])
    frac = (level - y[k]) / (y[k + 1] - y[k])
    return float(np.exp(lx[0] + frac * (lx[1] - lx[0])))


def threshold_exponent(curves: dict, f: float, window=(100, 1e4)) -> FitResult:
    """Fit eta_thres(f) proportional to N^-alpha across normalized gain curves.

    ``curves`` maps N to (eta values, G/G_max values).
    """
    if not 0 < f < 1:
        raise ValueError("f must lie in (0, 1)")
    Ns, ths, excluded = [], [], []
    for N, (etas, ratio) in sorted(curves.items()):
        th = crossing(etas, ratio, f)
        if th is None:
            excluded.append(N)
            continue
        Ns.append(N)
        ths.append(th)
    if len(Ns) < 2:
        raise FitError(f"need at least two curves crossing f={f}; excluded N={excluded}")
    lr = stats.linregress(np.log(Ns), np.log(ths))
    tags = [] if min(Ns) >= window[0] and max(Ns) <= window[1] else ["desk-window"]
    resid = np.log(ths) - (lr.intercept + lr.slope * np.log(Ns))
    return FitResult("threshold_exponent",
                     {"alpha": float(-lr.slope), "prefactor": math.exp(lr.intercept), "f": f},
                     {"alpha": float(lr.stderr), "prefactor": math.nan},
                     float(np.linalg.norm(resid)),
                     {"N_min": int(min(Ns)), "N_max": int(max(Ns))}, len(Ns),
                     [int(n) for n in excluded], tags)


def tanh_model(x, a, b):
    return 0.5 * (1 + np.tanh(a * np.log10(x) - b))


def fit_tanh_collapse(x, y) -> FitResult:
    """Least-squares fit of y = (1 + tanh(a log10 x - b))/2 to collapse data."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    ok = np.isfinite(x) & np.isfinite(y) & (x > 0)
    x, y = x[ok], y[ok]
    if x.size < 10:
        raise FitError(f"need at least 10 points, got {x.size}")
    half = crossing(x, y, 0.5)
    if half is None:
        raise FitError("data never crosses 1/2, so the transition is not covered")
    p0 = (1.0, math.log10(half))

    def resid(p):
        return tanh_model(x, *p) - y

    res = optimize.least_squares(resid, p0, method="lm", xtol=1e-14, ftol=1e-14, gtol=1e-14,
                                 max_nfev=2000)
    if not res.success:
        raise FitError(f"fit did not converge: {res.message}; residual {np.linalg.norm(res.fun)}")
    dof = max(x.size - 2, 1)
    s2 = float(res.fun @ res.fun) / dof
    try:
        cov = np.linalg.inv(res.jac.T @ res.jac) * s2
        err = np.sqrt(np.diag(cov))
    except np.linalg.LinAlgError:
        err = np.array([math.nan, math.nan])
    a, b = map(float, res.x)
    return FitResult("tanh", {"a": a, "b": b}, {"a": float(err[0]), "b": float(err[1])},
                     float(np.linalg.norm(res.fun)), {"x_min": float(x.min()),
                                                      "x_max": float(x.max())}, int(x.size))


def loglog_slope(x, y) -> tuple[float, float]:
    lr = stats.linregress(np.log(x), np.log(y))
    return float(lr.slope), float(lr.stderr)


# --- closed-form references ---

def _positive(**kw):
    for k, v in kw.items():
        if not (v > 0):
            raise ValueError(f"{k} must be positive, got {v}")


def ideal_gain(N: float) -> float:
    _positive(N=N)
    return math.sqrt(N / math.e)


def ideal_time(chi: float, N: float) -> float:
    _positive(chi=abs(chi), N=N)
    return 1.0 / (abs(chi) * math.sqrt(N))


def gmet_ideal(N: float, xi_det_sq: float) -> float:
    _positive(N=N)
    if xi_det_sq < 0:
        raise ValueError("xi_det_sq must be non-negative")
    return N / (math.e * (1 + xi_det_sq))


def gmet_est(N_eta: float) -> float:
    _positive(N_eta=N_eta)
    return math.sqrt(3 * N_eta / 32)


def davis_sigma_model(N, chi, t, kappa, delta, eta) -> float:
    """Phenomenological sigma_diss^2 / G^2 from collective dephasing plus spin-flip noise."""
    _positive(N=N, chi=abs(chi), t=t, kappa=kappa, delta=delta, eta=eta)
    var_sz = N * abs(chi) * t * (2 * delta / kappa + kappa / (2 * delta)) / (6 * eta)
    return 2 * N * abs(chi) * t * kappa / delta / ideal_gain(N) ** 2 + 2 * var_sz / N


def gmet_est_onset(db: float = 5.0) -> float:
    """Collective cooperativity where the estimate reaches ``db`` decibels."""
    return 32 / 3 * 10 ** (db / 5)


def short_time_solution(rates: EffectiveRates, chi: float, initial, t):
    """Mean spin when covariance feedback into S_x, S_y is neglected.

    Exact for that reduced system: the transverse spin rotates by
    theta(t) = 2 chi * integral S_z and decays at the transverse rate, while
    S_z relaxes independently.  Collective relaxation is not covered.
    """
    if rates.Gamma_rel:
        raise ValueError("short-time solution assumes Gamma_rel = 0")
    st = initial if isinstance(initial, mft.MftState) else None
    if st is None:
        raise TypeError("initial must be an MftState")
    t = np.asarray(t, dtype=float)
    N = st.N
    Sx0, Sy0, Sz0 = st.S
    gam = rates.gamma_plus + rates.gamma_minus
    if gam > 0:
        sz_inf = (rates.gamma_plus - rates.gamma_minus) / gam * N / 2
        decay = np.exp(-gam * t)
        Sz = sz_inf + (Sz0 - sz_inf) * decay
        integral = sz_inf * t + (Sz0 - sz_inf) * -np.expm1(-gam * t) / gam
    else:
        Sz = np.full_like(t, Sz0)
        integral = Sz0 * t
    theta = 2 * chi * integral
    amp = np.exp(-(rates.Gamma_phi + rates.gamma_minus + rates.gamma_plus
                   + 4 * rates.gamma_z) * t / 2)
    Sx = amp * (Sx0 * np.cos(theta) - Sy0 * np.sin(theta))
    Sy = amp * (Sy0 * np.cos(theta) + Sx0 * np.sin(theta))
    return Sx, Sy, Sz


def approx_gain(t, eta: float, N: float, chi: float = 1.0):
    """Closed-form short-time gain with gamma_+ = gamma_- = 2 gamma_z = chi/eta."""
    _positive(eta=eta, N=N, chi=abs(chi))
    e = np.exp(-2 * abs(chi) * np.asarray(t, float) / eta)
    return e * (N * eta / 4) * (1 - e)


def approx_gain_at_ideal_time(eta: float, N: float) -> float:
    _positive(eta=eta, N=N)
    return math.exp(-2 / (eta * math.sqrt(N))) * math.sqrt(N) / 2


# --- curves used by sweeps and acceptance runs ---

def gain_curve(scheme, N, etas, engine="MFT", mode="AMPLIFY_ONLY", **kw):
    """G(eta) for each eta (amplification peak or twist-untwist gain)."""
    mode = Mode.parse(mode)
    out = []
    for eta in etas:
        if mode is Mode.AMPLIFY_ONLY:
            out.append(maximize_gain(scheme, N, eta, engine, evaluate=False, **kw).value)
        else:
            out.append(maximize_gmet(scheme, N, eta, engine=engine, objective="gain",
                                     evaluate=False, **kw).value)
    return np.array(out)


def dicke_block_cap() -> int:
    return dicke.DEFAULT_CAP


__all__ = ["FitError", "FitResult", "Optimum", "approx_gain", "approx_gain_at_ideal_time",
           "crossing", "davis_sigma_model", "estimation_error", "fit_tanh_collapse", "gain_curve",
           "gmet_est", "gmet_est_onset", "gmet_ideal", "ideal_gain", "ideal_time",
           "lambda_grid", "loglog_slope", "maximize_gain", "maximize_gmet",
           "minimize_wineland", "sample_times", "short_time_solution", "tanh_model",
           "threshold_exponent"]
