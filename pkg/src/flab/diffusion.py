"""Euler-Maruyama simulation and Monte Carlo semigroup backends.

Random numbers come from Philox streams keyed by ``(seed, purpose, block)``
where a block is a fixed range of path indices. The noise for any path and
step is therefore fixed by the seed alone, so running the blocks on one
worker or many gives bitwise identical ensembles.
"""
from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidStepSize
from .polynomial import DiffusionSpec
from .semigroup import SemigroupOperator
from .weighted_space import ScalarFunction, WeightFunction, as_points

BLOCK = 8192

# stream purposes; distinct purposes give independent streams for one seed
NOISE = 0
KILLED_NOISE = 1
KILL = 2
INNER = 3

DUMP_MAGIC = b"FLAB"
DUMP_VERSION = 1


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("FLAB_THREADS", "1")))
    except ValueError:
        return 1


def stream(seed: int, purpose: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(purpose), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def n_steps(T: float, dt: float) -> int:
    """Number of steps of size dt in T; dt must divide T."""
    if dt <= 0:
        raise InvalidStepSize("dt must be positive")
    if T < 0:
        raise InvalidStepSize("time must be non-negative")
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-12 * max(T, 1.0):
        raise InvalidStepSize(f"dt = {dt} does not divide t = {T}")
    return n


@dataclass
class McEstimate:
    mean: float
    standard_error: float
    n: int

    @classmethod
    def from_samples(cls, samples) -> "McEstimate":
        x = np.asarray(samples, dtype=float).ravel()
        if x.size < 2:
            raise ValueError("an estimate needs at least two samples")
        if np.all(x == x[0]):
            return cls(float(x[0]), 0.0, int(x.size))
        return cls(float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(x.size)), int(x.size))

    def to_dict(self):
        return {"mean": self.mean, "standard_error": self.standard_error, "n": self.n}


# -- engine --------------------------------------------------------------------------

@dataclass
class _Run:
    states: np.ndarray      # (n_record, n_starts, n_paths, d)
    flagged: np.ndarray     # (n_starts, n_paths) non-finite excursions
    killed_at: np.ndarray   # (n_starts, n_paths), -1 while alive


def _block_run(drift, sigma, starts, size, steps, dt, record, seed, purpose, block,
               kill_rate=None, kill_purpose=KILL):
    if starts.ndim == 3:
        # one start per path
        X = starts.copy()
        n_starts, d = 1, starts.shape[2]
    else:
        n_starts, d = starts.shape
        X = np.broadcast_to(starts[:, None, :], (n_starts, size, d)).copy()
    gen = stream(seed, purpose, block)
    kgen = stream(seed, kill_purpose, block) if kill_rate is not None else None
    out = np.empty((len(record), n_starts, size, d))
    flagged = np.zeros((n_starts, size), dtype=bool)
    killed_at = np.full((n_starts, size), -1, dtype=np.int64)
    sq = math.sqrt(dt)
    slots = {k: i for i, k in enumerate(record)}
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps + 1):
            if k in slots:
                out[slots[k]] = X
            if k == steps:
                break
            Z = gen.standard_normal((size, d))
            flat = X.reshape(-1, d)
            mu = drift(flat).reshape(n_starts, size, d)
            sig = np.asarray(sigma(flat)).reshape(n_starts, size, d, d)
            if d == 1:
                noise = sig[..., 0, 0, None] * Z[None, :, :]
            else:
                noise = np.einsum("spij,pj->spi", sig, Z)
            if kgen is not None:
                U = kgen.random(size)
                alive = killed_at < 0
                rate = kill_rate(flat).reshape(n_starts, size)
                die = alive & (U[None, :] < -np.expm1(np.minimum(rate, 0.0) * dt))
                killed_at[die] = k + 1
            X = X + mu * dt + noise * sq
            if kgen is not None:
                X[killed_at >= 0] = np.nan
            bad = ~np.all(np.isfinite(X), axis=2) & (killed_at < 0)
            if bad.any():
                flagged |= bad
    return out, flagged, killed_at


def run_paths(spec: DiffusionSpec, starts, steps: int, dt: float, n_paths: int, seed: int,
              record: Sequence[int], *, purpose: int = NOISE, drift=None,
              kill_rate=None, kill_purpose: int = KILL, threads: Optional[int] = None,
              paired: bool = False) -> _Run:
    """Simulate ``n_paths`` paths from every start point; record the given step indices.

    With ``paired`` there must be exactly ``n_paths`` starts and path i starts
    from starts[i]; the result then has a single start axis.
    """
    starts = as_points(starts, spec.dim)
    if paired and starts.shape[0] != n_paths:
        raise ValueError("paired runs need one start per path")
    drift = drift or spec.drift
    record = sorted(set(int(r) for r in record))
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    sizes = [min(BLOCK, n_paths - b * BLOCK) for b in range(-(-n_paths // BLOCK))]
    threads = threads or default_threads()

    def job(b):
        own = starts[None, b * BLOCK: b * BLOCK + sizes[b]] if paired else starts
        return _block_run(drift, spec.sigma, own, sizes[b], steps, dt, record, seed,
                          purpose, b, kill_rate, kill_purpose)

    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(job, range(len(sizes))))
    else:
        parts = [job(b) for b in range(len(sizes))]
    return _Run(
        states=np.concatenate([p[0] for p in parts], axis=2),
        flagged=np.concatenate([p[1] for p in parts], axis=1),
        killed_at=np.concatenate([p[2] for p in parts], axis=1),
    )


# -- ensembles -------------------------------------------------------------------------

@dataclass
class PathEnsemble:
    """Paths of one diffusion from one start point.

    ``states`` has shape (n_paths, len(times), d); by default every step is
    recorded, so ``times`` is 0, dt, ..., T.
    """

    spec: DiffusionSpec
    x0: np.ndarray
    dt: float
    T: float
    n_paths: int
    seed: int
    times: np.ndarray
    states: np.ndarray
    flagged: np.ndarray = field(repr=False)

    @property
    def n_flagged(self) -> int:
        return int(self.flagged.sum())

    def index_of(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, t):
            raise KeyError(f"time {t} was not recorded")
        return k

    def values_at(self, t: float) -> np.ndarray:
        return self.states[:, self.index_of(t), :]

    def estimate(self, f: ScalarFunction, t: float) -> McEstimate:
        vals = np.asarray(f(self.values_at(t)), dtype=float)
        return McEstimate.from_samples(vals[~self.flagged])


def _record_steps(T, dt, record_times):
    total = n_steps(T, dt)
    if record_times is None:
        return total, list(range(total + 1))
    steps = [n_steps(t, dt) for t in record_times]
    if any(s > total for s in steps):
        raise InvalidStepSize("record time beyond the horizon")
    return total, sorted(set([0, *steps]))


def simulate_paths(spec: DiffusionSpec, x0, T: float, dt: float, n_paths: int, seed: int,
                   record_times: Optional[Sequence[float]] = None,
                   threads: Optional[int] = None) -> PathEnsemble:
    """Euler-Maruyama X_{k+1} = X_k + mu(X_k) dt + sigma(X_k) sqrt(dt) Z_k.

    Paths that leave the reals are flagged and excluded from estimates.
    """
    x0 = as_points(x0, spec.dim)[0]
    total, record = _record_steps(T, dt, record_times)
    run = run_paths(spec, x0[None, :], total, dt, n_paths, seed, record, threads=threads)
    states = np.transpose(run.states[:, 0], (1, 0, 2))
    return PathEnsemble(spec, x0, dt, T, n_paths, seed, np.array(record) * dt, states, run.flagged[0])


# -- Monte Carlo semigroup -------------------------------------------------------------

class MonteCarloSemigroup(SemigroupOperator):
    """P(t)f(x) estimated by the sample mean of f over an Euler-Maruyama ensemble.

    Every evaluation uses the same keyed noise (common random numbers), so the
    backend is a deterministic function of (t, f, x) for a fixed seed.
    """

    stochastic = True

    def __init__(self, spec: DiffusionSpec, T_max: float, dt: float, n_paths: int, seed: int,
                 w: WeightFunction, threads: Optional[int] = None, purpose: int = NOISE):
        super().__init__(w, name=f"mc[{spec.name}]")
        self.spec, self.T_max, self.dt = spec, T_max, dt
        self.n_paths, self.seed, self.threads = n_paths, seed, threads
        self.purpose = purpose
        self._cache: dict = {}

    def terminal(self, t: float, x) -> np.ndarray:
        """States at time t, shape (n_starts, n_paths, d); flagged paths are NaN."""
        if t > self.T_max + 1e-12:
            raise ValueError(f"t = {t} beyond T_max = {self.T_max}")
        pts = as_points(x, self.dim)
        steps = n_steps(t, self.dt)
        key = (steps, pts.tobytes(), pts.shape)
        if key not in self._cache:
            run = run_paths(self.spec, pts, steps, self.dt, self.n_paths, self.seed, [steps],
                            purpose=self.purpose, threads=self.threads)
            states = run.states[-1]
            states[run.flagged] = np.nan
            if len(self._cache) >= 4:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = states
        return self._cache[key]

    def _reduce(self, vals):
        means, ses = [], []
        for row in vals:
            est = McEstimate.from_samples(row[np.isfinite(row)])
            means.append(est.mean)
            ses.append(est.standard_error)
        return np.array(means), np.array(ses)

    def apply_with_error(self, t, f, x):
        states = self.terminal(t, x)
        n_starts, n, d = states.shape
        flat = states.reshape(-1, d)
        ok = np.all(np.isfinite(flat), axis=1)
        vals = np.full(flat.shape[0], np.nan)
        vals[ok] = np.asarray(f(flat[ok]), dtype=float).reshape(-1)
        return self._reduce(vals.reshape(n_starts, n))

    def apply(self, t, f, x):
        return self.apply_with_error(t, f, x)[0]

    def propagate(self, t, f):
        """A one-sample estimate of P(t)f: y_i -> f(X^i_t) with X^i started at y_i.

        Each point gets its own independent path (INNER stream), so an outer
        sample mean over such values is unbiased for P(s)P(t)f and its
        standard error accounts for the inner noise.
        """
        steps = n_steps(t, self.dt)

        def g(y):
            pts = as_points(y, self.dim)
            ok = np.all(np.isfinite(pts), axis=1)
            out = np.full(pts.shape[0], np.nan)
            if ok.any():
                run = run_paths(self.spec, pts[ok], steps, self.dt, int(ok.sum()), self.seed, [steps],
                                purpose=INNER, threads=self.threads, paired=True)
                end = run.states[-1, 0]
                good = ~run.flagged[0]
                vals = np.full(end.shape[0], np.nan)
                vals[good] = np.asarray(f(end[good]), dtype=float)
                out[ok] = vals
            return out
        return g

    def weight_ratio_with_error(self, t, x):
        pts = as_points(x, self.dim)
        mean, se = self.apply_with_error(t, self.weight, pts)
        rho = self.weight(pts)
        return mean / rho, se / rho

    def weight_ratio(self, t, x):
        return self.weight_ratio_with_error(t, x)[0]


def mc_semigroup(spec: DiffusionSpec, T_max: float, dt: float, n_paths: int, seed: int,
                 w: WeightFunction, threads: Optional[int] = None) -> MonteCarloSemigroup:
    return MonteCarloSemigroup(spec, T_max, dt, n_paths, seed, w, threads)


class GaussianSemigroup(SemigroupOperator):
    """Exact transition semigroup of a 1-d linear SDE with Gaussian marginals.

    P(t)f(x) = E[f(m(t, x) + s(t) Z)] by Gauss-Hermite quadrature, exact for
    polynomial f up to degree 2 n_nodes - 1.
    """

    def __init__(self, mean, std, w: WeightFunction, n_nodes: int = 40,
                 growth: Optional[tuple] = None, name: str = "gaussian"):
        super().__init__(w, growth=growth, name=name)
        self.mean, self.std = mean, std
        z, wts = np.polynomial.hermite_e.hermegauss(n_nodes)
        self._z, self._w = z, wts / math.sqrt(2.0 * math.pi)

    def apply(self, t, f, x):
        pts = as_points(x, 1)
        m = self.mean(t, pts[:, 0])
        s = self.std(t)
        nodes = (m[:, None] + s * self._z[None, :]).reshape(-1, 1)
        vals = np.asarray(f(nodes), dtype=float).reshape(pts.shape[0], -1)
        return vals @ self._w

    def weight_ratio(self, t, x):
        pts = as_points(x, 1)
        return self.apply(t, self.weight, pts) / self.weight(pts)


def brownian_gaussian(w: WeightFunction, scale: float = 1.0, **kw) -> GaussianSemigroup:
    return GaussianSemigroup(lambda t, x: x, lambda t: scale * math.sqrt(t), w, name="bm-gauss", **kw)


def ou_gaussian(w: WeightFunction, kappa: float = 1.0, s: float = 1.0, **kw) -> GaussianSemigroup:
    return GaussianSemigroup(
        lambda t, x: x * math.exp(-kappa * t),
        lambda t: s * math.sqrt(-math.expm1(-2.0 * kappa * t) / (2.0 * kappa)),
        w, name="ou-gauss", **kw,
    )


# -- supermartingale check ---------------------------------------------------------------

@dataclass
class SupermartingaleReport:
    omega: float
    rows: list  # dicts: x0, t, estimate, se, rho_x0, margin, ok
    passes: bool
    worst: dict

    def to_dict(self):
        return {"omega": self.omega, "passes": self.passes, "worst": self.worst, "rows": self.rows}


def supermartingale_check(spec: DiffusionSpec, w: WeightFunction, omega: float, x0s, times,
                          dt: float, n_paths: int, seed: int,
                          threads: Optional[int] = None) -> SupermartingaleReport:
    """Test E[exp(-omega t) rho(X_t)] <= rho(x0) + 3 SE for every x0 and t."""
    starts = as_points(x0s, spec.dim)
    times = sorted(float(t) for t in times)
    total, record = _record_steps(max(times), dt, times)
    run = run_paths(spec, starts, total, dt, n_paths, seed, record, threads=threads)
    rows = []
    for i, x0 in enumerate(starts):
        rho0 = float(w(x0[None, :])[0])
        for t in times:
            k = record.index(n_steps(t, dt))
            xs = run.states[k, i][~run.flagged[i]]
            est = McEstimate.from_samples(math.exp(-omega * t) * w(xs))
            margin = rho0 + 3.0 * est.standard_error - est.mean
            rows.append({"x0": x0.tolist(), "t": t, "estimate": est.mean,
                         "se": est.standard_error, "rho_x0": rho0, "margin": margin,
                         "ok": bool(margin >= 0)})
    worst = min(rows, key=lambda r: r["margin"])
    return SupermartingaleReport(omega, rows, all(r["ok"] for r in rows), worst)


# -- binary path dump -------------------------------------------------------------------------

def write_path_dump(path, ensemble: PathEnsemble) -> None:
    """32-byte header (magic, version, n_paths, steps, dim) then row-major float64."""
    n, steps, d = ensemble.states.shape
    header = DUMP_MAGIC + struct.pack("<IQQQ", DUMP_VERSION, n, steps, d)
    assert len(header) == 32
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(ensemble.states, dtype="<f8").tobytes())


def read_path_dump(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(32)
        if header[:4] != DUMP_MAGIC:
            raise ValueError("not a FLAB path dump")
        version, n, steps, d = struct.unpack("<IQQQ", header[4:])
        if version != DUMP_VERSION:
            raise ValueError(f"unsupported dump version {version}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(n, steps, d)
