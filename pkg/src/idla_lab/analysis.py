"""Fluctuation measurements for IDLA runs and scaling fits across resolutions.

A run is compared with the deterministic flow at checkpoint times. Depths
of early and late points come straight from the signed distance to the
reference region, and boundary distances are Hausdorff distances between
the occupied boundary and a sample of the reference boundary.
"""

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats
from scipy.optimize import curve_fit
from sklearn.base import BaseEstimator

from ._validation import check_resolution, check_seed
from .aggregation import IDLA, reference_region
from .lattice import boundary, hausdorff, sites_in

MIN_TRIALS = 10
ENVELOPE_EXPONENT = 0.6


@dataclass(frozen=True)
class FluctuationRecord:
    s: float
    t: int
    d_boundary: float
    early: float
    late: float
    max_early: float
    max_late: float

    def __post_init__(self):
        for name in ("s", "d_boundary", "early", "late", "max_early", "max_late"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class EventReport:
    early: bool
    early_witness: tuple
    late: bool
    late_witness: tuple


@dataclass(frozen=True)
class Depths:
    """Deepest early point and deepest late point, with the sites achieving them."""

    early: float
    early_site: tuple
    late: float
    late_site: tuple


def event_depths(occupied, region, m):
    """Largest ``eps`` for which an occupied site is ``eps``-early, and the
    largest for which a site of ``region`` is ``eps``-late.

    A site is early when it lies outside the outer ``eps``-neighbourhood of
    ``region``, so its depth is the signed distance. A lattice site of the
    region is late when unoccupied, with depth equal to its distance to
    the region's boundary.
    """
    m = check_resolution(m)
    early, early_site = 0.0, None
    occ = occupied.sites()
    if len(occ):
        d = region.sdf(occ / float(m))
        k = int(np.argmax(d))
        if d[k] > 0:
            early, early_site = float(d[k]), tuple(int(v) for v in occ[k])
    late, late_site = 0.0, None
    inside = sites_in(region, m).sites()
    if len(inside):
        hole = ~occupied.contains(inside)
        if hole.any():
            cand = inside[hole]
            d = -region.sdf(cand / float(m))
            k = int(np.argmax(d))
            if d[k] > 0:
                late, late_site = float(d[k]), tuple(int(v) for v in cand[k])
    return Depths(early, early_site, late, late_site)


def detect_events(occupied, region, m, eps):
    """Early and late events at scale ``eps``, with a witness site for each."""
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    d = event_depths(occupied, region, m)
    early = d.early > eps
    late = d.late > eps
    return EventReport(early, d.early_site if early else None, late, d.late_site if late else None)


def boundary_distance(occupied, region, m):
    """Hausdorff distance between the occupied boundary and ``region``'s boundary."""
    ref = region.sample_boundary(1.0 / (4 * m))
    return hausdorff(boundary(occupied).points(m), ref, m)


def checkpoint_times(T, count=21):
    """``count`` equally spaced times covering ``[0, T]``."""
    if count < 21:
        raise ValueError("at least 21 checkpoints are needed for spacing T/20")
    return np.linspace(0.0, T, count)


def particle_count(sequence, s):
    return int(sequence.prefix_count(s))


def default_reference(spec, m):
    """Analytic disks for concentric flows, sandpile regions at ``2m`` otherwise."""
    cache = {}

    def ref(s):
        key = round(float(s), 15)
        if key not in cache:
            cache[key] = reference_region(spec, float(s), 2 * m)
        return cache[key]

    return ref


def measure_run(state, spec, sequence, times=None, reference=None):
    """Fluctuation records of one finished run at each checkpoint time."""
    m = state.m
    times = checkpoint_times(spec.T) if times is None else np.asarray(times, dtype=float)
    reference = default_reference(spec, m) if reference is None else reference
    out = []
    run_early = run_late = 0.0
    for s in times:
        t = min(particle_count(sequence, s), state.t)
        occ = state.occupied_at(t)
        region = reference(s)
        dep = event_depths(occ, region, m)
        run_early = max(run_early, dep.early)
        run_late = max(run_late, dep.late)
        out.append(FluctuationRecord(float(s), t, boundary_distance(occ, region, m), dep.early, dep.late,
                                     run_early, run_late))
    return out


def max_fluctuation(records):
    return max(r.d_boundary for r in records)


def records_to_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["s", "t", "d_boundary", "early", "late", "max_early", "max_late"])
    for r in records:
        w.writerow([repr(r.s), r.t, repr(r.d_boundary), repr(r.early), repr(r.late),
                    repr(r.max_early), repr(r.max_late)])
    return buf.getvalue()


def records_from_csv(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    return [FluctuationRecord(float(r["s"]), int(r["t"]), float(r["d_boundary"]), float(r["early"]),
                              float(r["late"]), float(r["max_early"]), float(r["max_late"])) for r in rows]


# ---------------------------------------------------------------------------
# thin tentacles


@dataclass
class TentacleStats:
    b: float
    r_values: list
    counts: list
    trials: int
    particles: int

    def to_dict(self):
        return asdict(self)


def _landing_times(state):
    occ = state.occupied
    tg = np.full(occ.grid.shape, np.iinfo(np.int64).max, dtype=np.int64)
    tg[state.initial.reboxed(occ.box).grid] = -1
    land = state.landing_sites
    tg[land[:, 0] - occ.x0, land[:, 1] - occ.y0] = np.arange(len(land))
    return tg


def tentacle_events(state, D0, b, r):
    """Landings far from ``D0`` whose ball of radius ``r`` is sparsely filled.

    A landing at ``z`` counts when ``d(z, D0) >= r`` and the occupied sites
    in ``B(z, r)`` just after it lands number at most ``b m^2 r^2``.
    """
    m = state.m
    land = state.landing_sites
    if len(land) == 0 or b <= 0:
        return 0
    far = np.flatnonzero(np.maximum(D0.sdf(land / float(m)), 0.0) >= r)
    if len(far) == 0:
        return 0
    R = r * m
    k = int(math.floor(R))
    ox, oy = np.meshgrid(np.arange(-k, k + 1), np.arange(-k, k + 1), indexing="ij")
    ball = ox**2 + oy**2 <= R * R + 1e-9
    ox, oy = ox[ball], oy[ball]
    tg = np.pad(_landing_times(state), k + 1, constant_values=np.iinfo(np.int64).max)
    base = land[far] - (state.occupied.x0 - k - 1, state.occupied.y0 - k - 1)
    times = tg[base[:, 0, None] + ox[None, :], base[:, 1, None] + oy[None, :]]
    counts = (times <= far[:, None]).sum(axis=1)
    return int(np.count_nonzero(counts <= b * m * m * r * r))


def tentacle_scan(states, D0, b, r_values):
    """Event counts for each radius over a batch of finished runs."""
    states = list(states)
    counts = [sum(tentacle_events(st, D0, b, r) for st in states) for r in r_values]
    particles = sum(st.t for st in states)
    return TentacleStats(float(b), [float(r) for r in r_values], counts, len(states), particles)


# ---------------------------------------------------------------------------
# scaling fits


@dataclass
class ScalingFit:
    m_values: list
    summary: list
    beta: float
    log_C: float
    residuals: list
    half_width: float
    ci: tuple
    n_boot: int = 0

    def to_dict(self):
        d = asdict(self)
        d["ci"] = list(self.ci)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _slope_fit(m, y):
    X = np.column_stack([np.ones(len(m)), np.log(m)])
    coef, *_ = np.linalg.lstsq(X, np.log(y), rcond=None)
    return coef, np.log(y) - X @ coef


def fit_exponent(m_values, samples, n_boot=2000, confidence=0.95, seed=0, min_trials=MIN_TRIALS):
    """Fit ``median(sample) ~ C m^-beta`` across resolutions.

    ``samples[k]`` holds the per-trial statistic at ``m_values[k]``. The
    confidence interval comes from resampling trials within each
    resolution and refitting.
    """
    m = np.asarray(m_values, dtype=float)
    if len(m) < 3:
        raise ValueError("fit_exponent needs at least 3 resolutions")
    if len(samples) != len(m):
        raise ValueError("one sample array per resolution is required")
    samples = [np.asarray(s, dtype=float) for s in samples]
    for mk, s in zip(m_values, samples):
        if len(s) < min_trials:
            raise ValueError(f"m={mk} has {len(s)} trials; at least {min_trials} are required")
        if np.any(s <= 0):
            raise ValueError("fluctuation samples must be positive")
    med = np.array([np.median(s) for s in samples])
    coef, res = _slope_fit(m, med)
    rng = np.random.default_rng(seed)
    betas = np.empty(n_boot)
    for k in range(n_boot):
        boot = [np.median(s[rng.integers(0, len(s), len(s))]) for s in samples]
        betas[k] = -_slope_fit(m, np.array(boot))[0][1]
    lo, hi = (np.quantile(betas, [(1 - confidence) / 2, (1 + confidence) / 2]) if n_boot
              else (-coef[1], -coef[1]))
    return ScalingFit([int(v) if float(v).is_integer() else float(v) for v in m_values], med.tolist(),
                      float(-coef[1]), float(coef[0]), res.tolist(), float((hi - lo) / 2),
                      (float(lo), float(hi)), n_boot)


class ExponentFit(BaseEstimator):
    """Estimator wrapper around :func:`fit_exponent`."""

    def __init__(self, n_boot=2000, confidence=0.95, seed=0, min_trials=MIN_TRIALS):
        self.n_boot = n_boot
        self.confidence = confidence
        self.seed = seed
        self.min_trials = min_trials

    def fit(self, m_values, samples):
        self.fit_ = fit_exponent(m_values, samples, self.n_boot, self.confidence, self.seed, self.min_trials)
        self.beta_ = self.fit_.beta
        self.ci_ = self.fit_.ci
        return self


@dataclass
class EnvelopeReport:
    C_hat: float
    exponent: float
    violations: dict
    trials: dict

    @property
    def ok(self):
        return all(v * 20 <= self.trials[m] for m, v in self.violations.items())


def envelope_check(m_values, samples, exponent=ENVELOPE_EXPONENT):
    """Calibrate ``C = max m^a y`` at the first resolution and count
    trials above ``C m^-a`` at every later one."""
    C = max(m_values[0] ** exponent * np.asarray(samples[0], dtype=float))
    viol, trials = {}, {}
    for mk, s in zip(m_values[1:], samples[1:]):
        s = np.asarray(s, dtype=float)
        viol[int(mk)] = int(np.count_nonzero(s > C * mk ** (-exponent)))
        trials[int(mk)] = len(s)
    return EnvelopeReport(float(C), exponent, viol, trials)


@dataclass
class GrowthComparison:
    aic_log: float
    aic_power: float
    log_coef: tuple
    power_coef: tuple

    @property
    def log_preferred(self):
        return self.aic_log <= self.aic_power


def _aic(rss, n, k):
    return n * math.log(max(rss, 1e-300) / n) + 2 * k


def compare_growth(m_values, y):
    """AIC of ``a + b log m`` against power growth ``A m^p`` with ``p >= 0``."""
    m = np.asarray(m_values, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(m)
    if n < 3:
        raise ValueError("need at least 3 resolutions")
    X = np.column_stack([np.ones(n), np.log(m)])
    c, *_ = np.linalg.lstsq(X, y, rcond=None)
    rss_log = float(((X @ c - y) ** 2).sum())
    p0 = [max(float(np.mean(y)), 1e-12), 0.1]
    (A, p), _ = curve_fit(lambda mm, A, p: A * mm**p, m, y, p0=p0, bounds=([0, 0], [np.inf, 10]))
    rss_pow = float(((A * m**p - y) ** 2).sum())
    return GrowthComparison(_aic(rss_log, n, 2), _aic(rss_pow, n, 2), (float(c[0]), float(c[1])),
                            (float(A), float(p)))


@dataclass
class PowerEnvelope:
    C: float
    exponent: float
    fitted_exponent: float
    calibration: list
    ok: bool


def power_envelope(m_values, y, exponent=0.5, calibrate=2):
    """Fit ``C m^a`` to the first ``calibrate`` resolutions and require the
    rest to stay below it, with the free log-log slope at most ``a``."""
    m = np.asarray(m_values, dtype=float)
    y = np.asarray(y, dtype=float)
    basis = m[:calibrate] ** exponent
    C = float(basis @ y[:calibrate] / (basis @ basis))
    slope = float(np.polyfit(np.log(m), np.log(y), 1)[0])
    ok = bool(np.all(y[calibrate:] <= C * m[calibrate:] ** exponent) and slope <= exponent)
    return PowerEnvelope(C, exponent, slope, m[:calibrate].tolist(), ok)


@dataclass
class AbelianTest:
    statistic: float
    pvalue: float
    alpha: float

    @property
    def rejected(self):
        return self.pvalue < self.alpha


def ks_abelian(sample_a, sample_b, alpha=0.01):
    """Two-sample KS test of equal max-fluctuation distributions."""
    r = stats.ks_2samp(np.asarray(sample_a, dtype=float), np.asarray(sample_b, dtype=float))
    return AbelianTest(float(r.statistic), float(r.pvalue), alpha)


# ---------------------------------------------------------------------------
# campaigns


def run_seed(base, m, trial, tag=""):
    """Stable per-run seed mixed from the base seed, resolution and trial."""
    base = check_seed(base)
    h = hashlib.blake2b(f"{base}:{int(m)}:{int(trial)}:{tag}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little")


@dataclass
class TrialResult:
    m: int
    trial: int
    seed: int
    records: list = field(repr=False)

    @property
    def max_fluctuation(self):
        return max_fluctuation(self.records)


def run_trial(spec, m, seed, ordering="lex", times=None, reference=None, return_state=False):
    """One IDLA run measured at the checkpoint times."""
    est = IDLA(m=m, seed=seed, ordering=ordering).fit(spec)
    recs = measure_run(est.state_, spec, est.sequence_, times, reference)
    if return_state:
        return recs, est.state_
    return recs


def scaling_campaign(spec, m_values, trials, base_seed=0, ordering="lex", checkpoints=21):
    """Per-trial max fluctuation at each resolution; returns ``TrialResult`` lists."""
    out = []
    for m in m_values:
        ref = default_reference(spec, m)
        times = checkpoint_times(spec.T, checkpoints)
        row = []
        for k in range(trials):
            seed = run_seed(base_seed, m, k, "" if ordering == "lex" else ordering)
            row.append(TrialResult(m, k, seed, run_trial(spec, m, seed, ordering, times, ref)))
        out.append(row)
    return out
