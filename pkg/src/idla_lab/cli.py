"""Command-line campaigns: ``idla-lab <kind> --config <path>``.

Every run gets a seed mixed from the base seed, its resolution and its
trial index, so a campaign's outputs depend only on the configuration.
Per-run manifests record content hashes; a rerun into the same directory
skips runs whose manifest and artifacts still match.

Exit codes: 0 ok, 1 invariant failure, 2 configuration error, 3 I/O error.
"""

import argparse
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .aggregation import IDLA, DivisibleSandpile, SandpileState, write_snapshot
from .lattice import sites_in
from .sources import FlowSpec, asymmetric_flow, example_flow, validate_flow

KINDS = ("simulate", "kernel", "harmonic-verify", "scaling", "sandpile")
EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    kind: str
    flow: dict
    m: list
    trials: int = 1
    seed: int = 0
    checkpoints: int = 21
    out: str = "idla-out"
    cache: str = None
    options: dict = field(default_factory=dict)

    def canonical(self):
        """Config content that determines outputs (no paths)."""
        d = asdict(self)
        d.pop("out")
        d.pop("cache")
        return d

    def digest(self):
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


NAMED_FLOWS = {
    "example1": lambda: example_flow(1),
    "example2": lambda: example_flow(2),
    "asymmetric": asymmetric_flow,
}


def resolve_flow(obj):
    """A ``FlowSpec`` from a named flow or a flow dictionary."""
    if isinstance(obj, str):
        if obj not in NAMED_FLOWS:
            raise ConfigError(f"unknown flow {obj!r}; named flows are {sorted(NAMED_FLOWS)}")
        return NAMED_FLOWS[obj]()
    try:
        return FlowSpec.from_dict(obj)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed flow: {exc}") from exc


def make_config(raw, seed=None, out=None, kind=None):
    if not isinstance(raw, dict):
        raise ConfigError("the config must be a JSON object")
    raw = dict(raw)
    known = {"kind", "flow", "m", "trials", "seed", "checkpoints", "out", "cache"}
    options = {k: raw.pop(k) for k in list(raw) if k not in known}
    kind = kind or raw.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {kind!r}")
    m = raw.get("m", [16])
    m = [m] if isinstance(m, int) else list(m)
    if not m or not all(isinstance(v, int) and v >= 1 for v in m):
        raise ConfigError("m must be a positive integer or a list of them")
    if any(b <= a for a, b in zip(m, m[1:])):
        raise ConfigError("the m list must be strictly increasing")
    trials = raw.get("trials", 1)
    if not isinstance(trials, int) or trials < 1:
        raise ConfigError("trials must be an integer >= 1")
    checkpoints = raw.get("checkpoints", 21)
    if not isinstance(checkpoints, int) or checkpoints < 21:
        raise ConfigError("checkpoints must be an integer >= 21 (spacing at most T/20)")
    s = raw.get("seed", 0) if seed is None else seed
    if not isinstance(s, int) or not 0 <= s < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    flow = raw.get("flow", "example1")
    return ExperimentConfig(kind, flow, m, trials, s, checkpoints, out or raw.get("out", "idla-out"),
                            raw.get("cache"), options)


def load_config(path, seed=None, out=None, kind=None):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return make_config(raw, seed, out, kind)


def checked_flow(cfg):
    spec = resolve_flow(cfg.flow)
    report = validate_flow(spec)
    if not report.ok:
        raise ConfigError(str(report))
    return spec


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# runs


def _run_paths(out, m, trial):
    d = Path(out) / "runs" / f"m{m}"
    return d, f"trial{trial:03d}"


def _completed(manifest_path, digest):
    """Stored manifest if it matches ``digest`` and all artifacts are intact."""
    try:
        man = json.loads(Path(manifest_path).read_text())
    except (OSError, ValueError):
        return None
    if man.get("config_hash") != digest:
        return None
    base = Path(manifest_path).parent
    for name, h in man.get("artifacts", {}).items():
        p = base / name
        if not p.exists() or sha256_file(p) != h:
            return None
    return man


def _execute_run(task):
    """Worker body: one IDLA run, its records, optional snapshot and manifest."""
    flow, m, trial, seed, checkpoints, out, snapshot, digest = task
    spec = resolve_flow(flow)
    d, stem = _run_paths(out, m, trial)
    man_path = d / f"{stem}.json"
    done = _completed(man_path, digest)
    if done is not None:
        done["resumed"] = True
        return done
    d.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    est = IDLA(m=m, seed=seed).fit(spec)
    times = analysis.checkpoint_times(spec.T, checkpoints)
    recs = analysis.measure_run(est.state_, spec, est.sequence_, times)
    csv_path = d / f"{stem}.csv"
    csv_path.write_text(analysis.records_to_csv(recs))
    files = [csv_path]
    if snapshot:
        files += write_snapshot(d / stem, spec, est.state_)
    man = {
        "config_hash": digest,
        "m": m,
        "trial": trial,
        "seed": seed,
        "max_fluctuation": analysis.max_fluctuation(recs),
        "artifacts": {p.name: sha256_file(p) for p in files},
        "seconds": round(time.perf_counter() - t0, 3),
    }
    write_json(man_path, man)
    man["resumed"] = False
    return man


def run_campaign(cfg, snapshot, workers=1):
    digest = cfg.digest()
    tasks = [(cfg.flow, m, k, analysis.run_seed(cfg.seed, m, k), cfg.checkpoints, cfg.out, snapshot, digest)
             for m in cfg.m for k in range(cfg.trials)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_execute_run, tasks))
    return [_execute_run(t) for t in tasks]


def _summary_csv(manifests):
    lines = ["m,trial,seed,max_fluctuation"]
    for man in sorted(manifests, key=lambda r: (r["m"], r["trial"])):
        lines.append(f"{man['m']},{man['trial']},{man['seed']},{man['max_fluctuation']!r}")
    return "\n".join(lines) + "\n"


def _campaign_manifest(cfg, manifests, seconds):
    return {
        "config_hash": cfg.digest(),
        "config": cfg.canonical(),
        "runs": [{k: r[k] for k in ("m", "trial", "seed", "artifacts")} for r in
                 sorted(manifests, key=lambda r: (r["m"], r["trial"]))],
        "resumed": sum(bool(r["resumed"]) for r in manifests),
        "seconds": round(seconds, 3),
    }


def cmd_simulate(cfg, workers=1):
    checked_flow(cfg)
    t0 = time.perf_counter()
    mans = run_campaign(cfg, snapshot=True, workers=workers)
    out = Path(cfg.out)
    (out / "summary.csv").write_text(_summary_csv(mans))
    write_json(out / "manifest.json", _campaign_manifest(cfg, mans, time.perf_counter() - t0))
    print(f"simulate: {len(mans)} runs -> {out}")
    return EXIT_OK


def _scaling_samples(cfg, workers):
    syn = cfg.options.get("synthetic")
    if syn is not None:
        C = float(syn.get("C", 1.0))
        a = float(syn.get("exponent", 1.0))
        return [[C * m ** (-a)] * cfg.trials for m in cfg.m], []
    mans = run_campaign(cfg, snapshot=False, workers=workers)
    by_m = {m: [] for m in cfg.m}
    for r in sorted(mans, key=lambda r: (r["m"], r["trial"])):
        by_m[r["m"]].append(r["max_fluctuation"])
    return [by_m[m] for m in cfg.m], mans


def cmd_scaling(cfg, workers=1):
    if len(cfg.m) < 3:
        raise ConfigError("scaling needs at least 3 resolutions")
    if "synthetic" not in cfg.options:
        checked_flow(cfg)
    t0 = time.perf_counter()
    samples, mans = _scaling_samples(cfg, workers)
    try:
        fit = analysis.fit_exponent(cfg.m, samples, seed=cfg.seed,
                                    min_trials=1 if "synthetic" in cfg.options else analysis.MIN_TRIALS)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    env = analysis.envelope_check(cfg.m, samples)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["m,trial,max_fluctuation"]
    for m, s in zip(cfg.m, samples):
        rows += [f"{m},{k},{v!r}" for k, v in enumerate(s)]
    (out / "scaling.csv").write_text("\n".join(rows) + "\n")
    report = {"fit": fit.to_dict(), "envelope": {**asdict(env), "ok": env.ok}}
    write_json(out / "scaling.json", report)
    if mans:
        write_json(out / "manifest.json", _campaign_manifest(cfg, mans, time.perf_counter() - t0))
    print(f"scaling: beta = {fit.beta:.4f}, 95% CI [{fit.ci[0]:.4f}, {fit.ci[1]:.4f}]")
    return EXIT_OK


def cmd_kernel(cfg, workers=1):
    from .potential import (Direction, PotentialKernel, check_level_set_inclusion)
    from .harmonic import pole_constants

    L = int(cfg.options.get("L", 150))
    n_dir = int(cfg.options.get("directions", 32))
    cache = cfg.cache or os.environ.get("IDLA_LAB_CACHE") or str(Path(cfg.out) / "cache")
    cached = (Path(cache) / f"potential_L{L}.bin").exists()
    t0 = time.perf_counter()
    try:
        est = PotentialKernel(L=L, n_directions=n_dir, cache_dir=cache).fit()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    build = time.perf_counter() - t0
    off, origin = est.table_.harmonicity_residual()
    k = pole_constants(est.table_, n_dir) if L >= 100 else None
    incl = {}
    if k is not None:
        R0prime = 1.0
        R0 = est.c_ * R0prime / (4 * k.C2)
        for m in cfg.m:
            for a in est.angles_:
                rep = check_level_set_inclusion(est.table_, Direction.from_angle(float(a)), m, R0, R0prime)
                incl[f"m={m},angle={float(a):.6f}"] = len(rep.violations)
    ok = off <= 1e-12 and origin <= 1e-12 and est.c_ >= 0.15
    report = {
        "L": L,
        "checksum": est.table_.checksum(),
        "cache_hit": cached,
        "seconds": round(build, 3),
        "residual_off_origin": off,
        "residual_origin": origin,
        "lambda": est.lambda_,
        "C1": est.C1_,
        "c": est.c_,
        "c_by_direction": dict(zip((f"{float(a):.6f}" for a in est.angles_), map(float, est.c_by_direction_))),
        "level_set_violations": incl,
        "ok": bool(ok),
    }
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "kernel.json", report)
    print(f"kernel: L={L} lambda={est.lambda_:.8f} C1={est.C1_:.4f} c={est.c_:.4f} "
          f"residual={max(off, origin):.2e} cache_hit={cached} ({build:.2f} s)")
    return EXIT_OK if ok else EXIT_INVARIANT


def cmd_harmonic_verify(cfg, workers=1):
    from .harmonic import (concentric_poles, green_convergence_check, make_pole, pole_checks,
                           pole_constants)
    from .potential import exact_potential

    spec = checked_flow(cfg)
    n_poles = int(cfg.options.get("poles", 8))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"poles": [], "green": None, "ok": True}
    if n_poles == 0:
        write_json(out / "harmonic.json", report)
        print("harmonic-verify: no poles configured")
        return EXIT_OK
    from .aggregation import concentric_radius

    r_hi = concentric_radius(spec, spec.T)
    if r_hi is None:
        raise ConfigError("harmonic-verify samples poles on concentric disk flows only")
    green_m = list(cfg.options.get("green_m", [16, 32, 64]))
    cache = cfg.cache or os.environ.get("IDLA_LAB_CACHE")
    reach = max([m * (2 * r_hi + 2 * np.hypot(*spec.D0.center)) for m in cfg.m] + [2.5 * max(green_m, default=0)])
    L = max(150, int(math.ceil(reach)) + 10)
    table = exact_potential(L, cache)
    k = pole_constants(table)
    for m in cfg.m:
        for p in concentric_poles(spec, m, n_poles):
            ctx = make_pole(p.zeta, m, p.region, p.tau, table=table)
            checks = pole_checks(table, ctx, sites_in(p.region, m), k)
            entry = {"m": m, "zeta": list(p.zeta), "tau": p.tau, "checks": [c.to_dict() for c in checks]}
            report["poles"].append(entry)
            report["ok"] &= all(c.ok for c in checks)
    if green_m:
        gc = green_convergence_check(table, green_m)
        rates = gc.ratios()
        report["green"] = {"m": gc.m_values, "alpha": gc.alpha, "errors": gc.errors, "slope": gc.slope,
                           "ratios": list(rates)}
        green_ok = all(4 / 3 <= r <= 12 for r in rates)
        report["green"]["ok"] = green_ok
        report["ok"] &= green_ok
    write_json(out / "harmonic.json", report)
    n_fail = sum(not c["ok"] for e in report["poles"] for c in e["checks"])
    print(f"harmonic-verify: {len(report['poles'])} poles, {n_fail} failed checks")
    return EXIT_OK if report["ok"] else EXIT_INVARIANT


def cmd_sandpile(cfg, workers=1):
    schedule = cfg.options.get("schedule", "obstacle")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if "mass" in cfg.options:
        init = SandpileState.point_mass(float(cfg.options["mass"]))
        label = f"point mass {cfg.options['mass']}"
    else:
        spec = checked_flow(cfg)
        s = float(cfg.options.get("s", spec.T))
        if not 0 <= s <= spec.T:
            raise ConfigError(f"s must lie in [0, {spec.T}]")
        init = SandpileState.from_flow(spec, s, cfg.m[0])
        label = f"{spec.name} at s={s}, m={cfg.m[0]}"
    try:
        est = DivisibleSandpile(schedule=schedule).fit(init)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    occ = est.occupied_
    from .aggregation import to_pgm

    (out / "sandpile.pgm").write_bytes(to_pgm(occ))
    np.save(out / "sandpile_mass.npy", est.mass_)
    report = {"source": label, "schedule": schedule, "total": est.final_.total(), "occupied": occ.count,
              "box": list(occ.box), "max_mass": float(est.mass_.max())}
    write_json(out / "sandpile.json", report)
    print(f"sandpile: {label}: {occ.count} occupied sites")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "kernel": cmd_kernel,
    "harmonic-verify": cmd_harmonic_verify,
    "scaling": cmd_scaling,
    "sandpile": cmd_sandpile,
}


def build_parser():
    p = argparse.ArgumentParser(prog="idla-lab", description="IDLA fluctuation experiments")
    p.add_argument("kind", choices=KINDS)
    p.add_argument("--config", required=True, help="JSON experiment configuration")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="base seed (overrides the config)")
    p.add_argument("--workers", type=int, default=1, help="parallel runs")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out, args.kind)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.kind](cfg, args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
