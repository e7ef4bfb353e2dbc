"""Resumable parameter sweeps writing one CSV row per (scheme, N, eta)."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import analysis
from .params import SchemeKind
from .protocol import Engine

HEADER = ["scheme", "engine", "N", "eta", "lambda_opt", "t_opt", "G", "G_sub",
          "sigma_diss_sq", "xi_R_sq", "gmet", "flags"]
OBJECTIVES = ("gain", "gmet", "tu-gain")
SCALES = {"eta": lambda N: 1.0, "N": lambda N: float(N), "sqrtN": lambda N: math.sqrt(N)}


class ManifestMismatch(RuntimeError):
    pass


@dataclass
class SweepGrid:
    schemes: list
    Ns: list
    etas: list
    engine: str = "MFT"
    objective: str = "gain"
    xi_det_sq: float = 1.0
    chi: float = 1.0
    phi: float = 1e-3
    n_lambda: int = analysis.LAMBDA_POINTS
    eta_scale: str = "eta"  # listed values are eta, N*eta, or sqrt(N)*eta

    def __post_init__(self):
        self.schemes = [SchemeKind.parse(s).value for s in self.schemes]
        self.engine = Engine.parse(self.engine).value
        self.Ns = [int(n) for n in self.Ns]
        self.etas = [float(e) for e in self.etas]
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if not (self.schemes and self.Ns and self.etas):
            raise ValueError("grid is empty")
        if self.eta_scale not in SCALES:
            raise ValueError(f"eta_scale must be one of {sorted(SCALES)}")

    def points(self) -> list[tuple]:
        div = SCALES[self.eta_scale]
        return [(s, N, v / div(N)) for s in self.schemes for N in self.Ns for v in self.etas]

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=repr)
        return hashlib.sha256(blob.encode()).hexdigest()


def fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int,)) and not isinstance(x, bool):
        return str(x)
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


@dataclass
class SweepRecord:
    scheme: str
    engine: str
    N: int
    eta: float
    lambda_opt: float
    t_opt: float
    G: float
    G_sub: float
    sigma_diss_sq: float
    xi_R_sq: float
    gmet: float
    flags: list = field(default_factory=list)

    def row(self) -> list[str]:
        vals = asdict(self)
        vals["flags"] = ";".join(self.flags)
        return [fmt(vals[k]) for k in HEADER]

    @classmethod
    def from_row(cls, row: dict) -> "SweepRecord":
        num = {k: float(row[k]) for k in HEADER[3:-1]}
        flags = [f for f in row["flags"].split(";") if f]
        return cls(row["scheme"], row["engine"], int(row["N"]), flags=flags, **num)


def evaluate_point(grid: SweepGrid, point: tuple) -> SweepRecord:
    scheme, N, eta = point
    lams = analysis.lambda_grid(grid.n_lambda)
    if grid.objective == "gain":
        opt = analysis.maximize_gain(scheme, N, eta, grid.engine, grid.chi, lams, grid.phi,
                                     xi_det_sq=grid.xi_det_sq)
    else:
        objective = "gmet" if grid.objective == "gmet" else "gain"
        opt = analysis.maximize_gmet(scheme, N, eta, grid.xi_det_sq, grid.engine, grid.chi,
                                     lams, grid.phi, objective=objective)
    r = opt.result
    return SweepRecord(scheme, grid.engine, N, eta, opt.lambda_opt, r.t_opt, r.G, r.G_sub,
                       r.sigma_diss_sq, r.xi_R_sq, r.gmet, list(opt.flags))


def _evaluate(args):
    grid, idx, point = args
    try:
        return idx, evaluate_point(grid, point), None
    except Exception as exc:  # recorded per point, the sweep goes on
        return idx, None, f"{type(exc).__name__}: {exc}"


def _failed_record(grid, point, message) -> SweepRecord:
    nan = math.nan
    scheme, N, eta = point
    return SweepRecord(scheme, grid.engine, N, eta, nan, nan, nan, nan, nan, nan, nan,
                       ["error:" + message.split(":")[0]])


def default_workers() -> int:
    env = os.environ.get("OAT_DISSIM_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


class Manifest:
    """Sidecar JSON: grid hash, per-point status, and the CSV byte offset after each row."""

    def __init__(self, path: Path, digest: str, n_points: int):
        self.path = path
        self.digest = digest
        self.status = ["pending"] * n_points
        self.offsets = [None] * n_points
        self.errors = {}

    @classmethod
    def load(cls, path: Path) -> "Manifest":
        data = json.loads(path.read_text())
        m = cls(path, data["grid_hash"], len(data["status"]))
        m.status = data["status"]
        m.offsets = data["offsets"]
        m.errors = data.get("errors", {})
        return m

    def save(self) -> None:
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"grid_hash": self.digest, "status": self.status,
                                   "offsets": self.offsets, "errors": self.errors}, indent=1))
        tmp.replace(self.path)

    def completed_prefix(self) -> int:
        n = 0
        while n < len(self.status) and self.status[n] in ("done", "failed"):
            n += 1
        return n

    @property
    def complete(self) -> bool:
        return self.completed_prefix() == len(self.status)


def manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def run_sweep(grid: SweepGrid, out, resume: bool = False, workers: int | None = None,
              limit: int | None = None) -> Manifest:
    """Evaluate every grid point and write rows in grid order.

    ``limit`` stops after that many new points (used to test resumption).
    """
    out = Path(out)
    points = grid.points()
    mpath = manifest_path(out)
    if resume and mpath.exists():
        manifest = Manifest.load(mpath)
        if manifest.digest != grid.digest() or len(manifest.status) != len(points):
            raise ManifestMismatch("grid does not match the manifest; refusing to resume")
        start = manifest.completed_prefix()
        offset = manifest.offsets[start - 1] if start else None
        with open(out, "r+b") as fh:
            if offset is None:
                fh.seek(0)
                fh.truncate()
            else:
                fh.truncate(offset)
        for i in range(start, len(points)):
            manifest.status[i] = "pending"
            manifest.offsets[i] = None
    else:
        manifest = Manifest(mpath, grid.digest(), len(points))
        start = 0
        out.write_text("")
    todo = list(range(start, len(points)))
    if limit is not None:
        todo = todo[:limit]
    workers = default_workers() if workers is None else workers

    with open(out, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fh.tell() == 0:
            writer.writerow(HEADER)
            fh.flush()
        manifest.save()
        pending = {}
        nxt = start

        def sink(idx, rec, err):
            nonlocal nxt
            pending[idx] = (rec, err)
            while nxt in pending:
                rec, err = pending.pop(nxt)
                if err is not None:
                    manifest.errors[str(nxt)] = err
                    rec = _failed_record(grid, points[nxt], err)
                writer.writerow(rec.row())
                fh.flush()
                manifest.status[nxt] = "failed" if err else "done"
                manifest.offsets[nxt] = fh.tell()
                manifest.save()
                nxt += 1

        jobs = [(grid, i, points[i]) for i in todo]
        if workers <= 1 or len(jobs) <= 1:
            for job in jobs:
                sink(*_evaluate(job))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for result in pool.map(_evaluate, jobs):
                    sink(*result)
    return manifest


def read_records(path) -> list[SweepRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != HEADER:
            raise ValueError(f"{path}: expected header {','.join(HEADER)}")
        return [SweepRecord.from_row(row) for row in reader]


def write_records(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        for rec in records:
            writer.writerow(rec.row())


def normalized_curves(records, scheme=None, column: str | None = None) -> dict:
    """Group rows by N into (eta, G/G_max) using each N's eta = inf row as G_max.

    TC rows use the background-subtracted gain unless ``column`` says otherwise.
    """
    groups = {}
    for r in records:
        if scheme is not None and r.scheme != SchemeKind.parse(scheme).value:
            continue
        groups.setdefault((r.scheme, r.N), []).append(r)
    curves = {}
    for (sch, N), rows in groups.items():
        col = column or ("G_sub" if sch == SchemeKind.TC.value else "G")
        ideal = [getattr(r, col) for r in rows if math.isinf(r.eta)]
        if not ideal or not ideal[0] > 0:
            continue
        finite = sorted((r for r in rows if math.isfinite(r.eta)), key=lambda r: r.eta)
        pts = [(r.eta, getattr(r, col) / ideal[0]) for r in finite
               if math.isfinite(getattr(r, col))]
        if pts:
            curves[N] = ([p[0] for p in pts], [p[1] for p in pts])
    return curves
