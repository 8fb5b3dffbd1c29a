"""
Experiment commands: each builds the scenario from a config, runs it and
writes CSV tables (plus SVG plots and a manifest) into the output directory.

Wall-clock times go to separate ``*_timings.json`` files so the CSV tables
depend only on (config, seed) and are byte-identical across runs.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import io as rio
from ..analysis import avg_framewise_error, estimate_rip, pulse_normalized_errors
from ..model import NoiseSpec, ShutterSchedule, measure
from ..signals import (
    PsteSpec,
    PulseSpec,
    PulseSupport,
    gen_psf,
    gen_pste,
    layout_pulses,
    pulse_supports,
    pulse_sweep_spec,
)
from ..solvers import blocked_fista_d, diffs_to_movie, l1_solver, tv_solver
from .config import ALGORITHMS, ConfigError
from .plots import write_line_plot

#: default spatial enlargement of the transient for the lines sweep
LINES_SWEEP_ENLARGE = 12.0

#: default phase-sweep systems, at equal total line budget
DEFAULT_SYSTEMS = {
    "single": {"lines_per_sample": 2, "num_shutters": 1, "rate_factor": 1},
    "double": {"lines_per_sample": 1, "num_shutters": 2, "rate_factor": 1},
    "single_4x": {"lines_per_sample": 2, "num_shutters": 1, "rate_factor": 4},
}


class MissingInputError(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# scenario builders
# ---------------------------------------------------------------------------


def derive_seed(base, stream):
    """Independent seed for a named random stream (``psf``, ``noise``, ...)."""
    key = int.from_bytes(hashlib.sha256(stream.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([int(base), key]).generate_state(1)[0])


def signal_spec(sig, rate_hz=None, enlarge=1.0):
    """A :class:`PsteSpec` from a config signal fragment."""
    sig = dict(sig)
    kind = sig.pop("kind", "pste")
    rate = float(rate_hz if rate_hz is not None else sig.pop("rate_hz", 1000.0))
    sig.pop("rate_hz", None)
    n = int(sig.pop("n", 32))
    spatial = {}
    if "sigma_px" in sig:
        spatial["sigma_px"] = float(sig.pop("sigma_px"))
    if "center" in sig:
        spatial["center"] = sig.pop("center")
    enlarge = enlarge * float(sig.pop("enlarge", 1.0))
    if kind == "pste":
        cycles = int(sig.pop("cycles", 2))
        amplitude = float(sig.pop("amplitude", 1.0))
        duration = float(sig.pop("duration_s", 0.3))
        if "pulses" in sig:
            pulses = tuple(PulseSpec(**p) for p in sig.pop("pulses"))
        else:
            freqs = sig.pop("freqs_hz", (15.0, 50.0, 100.0, 400.0))
            pulses = layout_pulses(freqs, duration, cycles, amplitude)
        spec = PsteSpec(pulses, n=n, rate_hz=rate, duration_s=duration, **spatial)
    elif kind == "pulse_sweep":
        spec = pulse_sweep_spec(
            float(sig.pop("f_start")), float(sig.pop("f_end")), int(sig.pop("n_pulses")),
            float(sig.pop("spacing_s")), n=n, rate_hz=rate,
            cycles=int(sig.pop("cycles", 2)), amplitude=float(sig.pop("amplitude", 1.0)),
            lead_s=sig.pop("lead_s", None), **spatial)
    else:
        raise ConfigError(f"unknown signal kind {kind!r}")
    if sig:
        raise ConfigError(f"unknown signal fields {sorted(sig)}")
    if enlarge != 1.0:
        spec = replace(spec, sigma_px=spec.sigma_px * enlarge)
    return spec


def build_signal(cfg, rate_hz=None, enlarge=1.0):
    """Movie, per-pulse supports and the spec used to make them."""
    spec = signal_spec(cfg.signal, rate_hz, enlarge)
    movie = gen_pste(spec)
    return movie, pulse_supports(spec.pulses, spec.rate_hz, spec.t_len), spec


def build_psf(cfg, n=None):
    p = dict(cfg.psf)
    kind = p.pop("kind")
    n = cfg.n if n is None else n
    if kind == "file":
        psf = rio.read_psf(p["path"])
        if psf.n != n:
            raise ConfigError(f"PSF file is {psf.n}x{psf.n}, scenario needs {n}x{n}")
        return psf
    seed = p.pop("seed", None)
    seed = derive_seed(cfg.rng_seed, "psf") if seed is None else int(seed)
    return gen_psf(kind, n, rng_seed=seed, **p)


def build_schedule(cfg, rate_hz=None, **overrides):
    s = dict(cfg.schedule)
    s.update(overrides)
    s.pop("rate_factor", None)
    s.pop("block_len", None)
    return ShutterSchedule(
        n=cfg.n,
        lines_per_sample=int(s.get("lines_per_sample", 1)),
        num_shutters=int(s.get("num_shutters", 1)),
        shutter_gap=s.get("shutter_gap"),
        phase_offset=int(s.get("phase_offset", 0)),
        rate_hz=float(rate_hz if rate_hz is not None else cfg.rate_hz),
    )


def noise_seed(cfg):
    return derive_seed(cfg.rng_seed, "noise")


def run_solver(name, y, scfg, psf, mode):
    """Run one algorithm; returns ``(Movie, SolveReport)``."""
    if name == "fista_d":
        d, rep = blocked_fista_d(y, scfg, psf, mode=mode)
        return diffs_to_movie(d), rep
    if name == "tv":
        return tv_solver(y, scfg, psf, mode=mode)
    if name == "l1":
        return l1_solver(y, scfg, psf, mode=mode)
    raise ConfigError(f"unknown algorithm {name!r}")


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _out(cfg):
    p = Path(cfg.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(cfg, command, outputs):
    """Companion JSON naming the config hash and the digest of each output."""
    out = _out(cfg)
    manifest = {
        "command": command,
        "scenario": cfg.scenario,
        "config_hash": cfg.config_hash(),
        "rng_seed": cfg.rng_seed,
        "outputs": {Path(p).name: _sha256(p) for p in outputs},
    }
    path = out / f"manifest_{command}.json"
    rio.write_json(path, manifest)
    return path


def _map(fn, jobs, workers):
    """Run ``fn`` over ``jobs``; results come back in job order."""
    if workers and workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------


def cmd_gen(cfg, plots=True):
    out = _out(cfg)
    movie, supports, spec = build_signal(cfg)
    psf = build_psf(cfg)
    rio.write_movie(out / "movie.rsm1", movie)
    rio.write_json(out / "movie.json", {
        "dt": movie.dt,
        "signal": spec.to_dict(),
        "supports": [{"freq_hz": s.freq_hz, "first": s.first, "stop": s.stop} for s in supports],
    })
    rio.write_psf(out / "psf.rsm1", psf)
    files = [out / "movie.rsm1", out / "movie.json", out / "psf.rsm1"]
    write_manifest(cfg, "gen", files)
    return {"files": files}


def _load_movie(out):
    path, meta = out / "movie.rsm1", out / "movie.json"
    if not path.exists() or not meta.exists():
        raise MissingInputError(f"{path} or {meta} missing; run 'gen' first")
    info = rio.read_json(meta)
    supports = [PulseSupport(**s) for s in info["supports"]]
    return rio.read_movie(path, info["dt"]), supports


def _load_psf(out):
    path = out / "psf.rsm1"
    if not path.exists():
        raise MissingInputError(f"{path} missing; run 'gen' first")
    return rio.read_psf(path)


def cmd_measure(cfg, plots=True):
    out = _out(cfg)
    movie, _ = _load_movie(out)
    psf = _load_psf(out)
    sched = build_schedule(cfg, rate_hz=movie.rate_hz)
    y = measure(movie, psf, sched, cfg.mode, cfg.noise, noise_seed(cfg))
    rio.write_measurements(out / "meas.rsm1", y)
    files = [out / "meas.rsm1", rio.sidecar_path(out / "meas.rsm1")]
    write_manifest(cfg, "measure", files)
    return {"files": files}


def cmd_reconstruct(cfg, plots=True):
    out = _out(cfg)
    meas = out / "meas.rsm1"
    if not meas.exists():
        raise MissingInputError(f"{meas} missing; run 'measure' first")
    y = rio.read_measurements(meas)
    psf = _load_psf(out)
    algo = cfg.options.get("algorithm", "fista_d")
    xhat, rep = run_solver(algo, y, cfg.solver(algo), psf, cfg.mode)
    rio.write_movie(out / "recon.rsm1", xhat)
    report = rep.to_dict()
    report["algorithm"] = algo
    if (out / "movie.rsm1").exists():
        movie, _ = _load_movie(out)
        report["avg_framewise_l2"] = avg_framewise_error(movie, xhat).avg_framewise_l2
    rio.write_json(out / "recon_report.json", report)
    write_manifest(cfg, "reconstruct", [out / "recon.rsm1"])
    return {"files": [out / "recon.rsm1", out / "recon_report.json"], "report": report}


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def cmd_compare_solvers(cfg, plots=True):
    """Blocked FISTA-D vs TV vs l1 on one measurement sequence."""
    out = _out(cfg)
    movie, _, spec = build_signal(cfg)
    psf = build_psf(cfg)
    sched = build_schedule(cfg, rate_hz=spec.rate_hz)
    y = measure(movie, psf, sched, cfg.mode, cfg.noise, noise_seed(cfg))
    algos = cfg.options.get("algorithms", list(ALGORITHMS))
    r, c = (int(round(v)) for v in spec.center)
    traces = {"truth": movie.data[r, c, :]}
    summary, timings = [], {}
    for name in algos:
        xhat, rep = run_solver(name, y, cfg.solver(name), psf, cfg.mode)
        traces[name] = xhat.data[r, c, :]
        err = avg_framewise_error(movie, xhat).avg_framewise_l2
        summary.append((name, err, rep.iterations, rep.converged, rep.final_objective))
        timings[name] = rep.wall_time
    cols = ["truth"] + list(algos)
    trace_path = out / "compare_traces.csv"
    rio.write_csv(trace_path, ["t"] + cols,
                  [[t] + [float(traces[k][t]) for k in cols] for t in range(movie.t_len)])
    sum_path = out / "compare_summary.csv"
    rio.write_csv(sum_path, ["algorithm", "avg_framewise_error", "iterations", "converged",
                             "final_objective"], summary)
    rio.write_json(out / "compare_timings.json", {"wall_time_s": timings})
    if plots:
        write_line_plot(out / "compare_traces.svg", range(movie.t_len), traces,
                        title="center pixel", xlabel="frame", ylabel="intensity")
    write_manifest(cfg, "compare-solvers", [trace_path, sum_path])
    return {"summary": summary, "timings": timings, "files": [trace_path, sum_path]}


def _sweep_cell(job):
    cfg, axis, value = job
    algo = cfg.options.get("algorithm", "fista_d")
    rate, enlarge, noise, sched_over = None, 1.0, cfg.noise, {}
    if axis == "lines":
        sched_over["lines_per_sample"] = int(value)
        enlarge = float(cfg.options.get("enlarge", LINES_SWEEP_ENLARGE))
    elif axis == "rate":
        rate = float(value)
    elif axis == "snr":
        noise = NoiseSpec(float(value))
    movie, _, spec = build_signal(cfg, rate_hz=rate, enlarge=enlarge)
    psf = build_psf(cfg)
    sched = build_schedule(cfg, rate_hz=spec.rate_hz, **sched_over)
    y = measure(movie, psf, sched, cfg.mode, noise, noise_seed(cfg))
    xhat, rep = run_solver(algo, y, cfg.solver(algo), psf, cfg.mode)
    return avg_framewise_error(movie, xhat).avg_framewise_l2, rep.wall_time, rep.iterations


def cmd_sweep(cfg, axis=None, plots=True, workers=1):
    """Average frame-wise error along one axis: lines, rate or snr."""
    if cfg.sweep is None:
        raise ConfigError("config has no 'sweep' section")
    axis = axis or cfg.sweep["param"]
    values = cfg.sweep["values"] if axis == cfg.sweep["param"] else cfg.options.get(f"{axis}_values")
    if not values:
        raise ConfigError(f"no sweep values for axis {axis!r}")
    out = _out(cfg)
    results = _map(_sweep_cell, [(cfg, axis, v) for v in values], workers)
    path = out / f"sweep_{axis}.csv"
    rio.write_csv(path, ["value", "avg_framewise_error"],
                  [(v, r[0]) for v, r in zip(values, results)])
    rio.write_json(out / f"sweep_{axis}_timings.json",
                   {"wall_time_s": [r[1] for r in results], "iterations": [r[2] for r in results],
                    "values": list(values)})
    if plots:
        write_line_plot(out / f"sweep_{axis}.svg", values, {"avg error": [r[0] for r in results]},
                        title=f"{axis} sweep", xlabel=axis, ylabel="avg frame-wise error")
    write_manifest(cfg, f"sweep-{axis}", [path])
    return {"values": list(values), "errors": [r[0] for r in results], "files": [path]}


def _phase_cell(job):
    cfg, sys_cfg, offset_rows = job
    algo = cfg.options.get("algorithm", "fista_d")
    rate = cfg.rate_hz * float(sys_cfg.get("rate_factor", 1))
    movie, supports, spec = build_signal(cfg, rate_hz=rate)
    psf = build_psf(cfg)
    sched = build_schedule(cfg, rate_hz=rate, **{**sys_cfg, "phase_offset": offset_rows})
    y = measure(movie, psf, sched, cfg.mode, cfg.noise, noise_seed(cfg))
    scfg = cfg.solver(algo)
    if "block_len" in sys_cfg:
        scfg = replace(scfg, block_len=int(sys_cfg["block_len"]))
    xhat, rep = run_solver(algo, y, scfg, psf, cfg.mode)
    return pulse_normalized_errors(movie, xhat, supports), rep.wall_time


def phase_offsets(schedule, count):
    """``count`` row offsets evenly spread over one sweep period."""
    span = schedule.period * schedule.lines_per_sample
    return [int(round(k * span / count)) for k in range(count)]


def cmd_nyquist(cfg, plots=True, workers=1):
    """Per-pulse normalized error for a pulse train sweeping up to Nyquist.

    With ``options.phase_count > 1`` each shutter phase is reconstructed and
    ``nyquist.csv`` keeps the best phase per pulse; every phase is listed in
    ``nyquist_phases.csv``.
    """
    out = _out(cfg)
    base = build_schedule(cfg)
    count = int(cfg.options.get("phase_count", 1))
    offsets = phase_offsets(base, count) if count > 1 else [base.phase_offset]
    sys_cfg = {k: v for k, v in cfg.schedule.items() if k != "phase_offset"}
    results = _map(_phase_cell, [(cfg, sys_cfg, o) for o in offsets], workers)
    freqs = [f for f, _ in results[0][0]]
    best = [min(r[0][i][1] for r in results) for i in range(len(freqs))]
    path = out / "nyquist.csv"
    rio.write_csv(path, ["freq_hz", "normalized_error"], list(zip(freqs, best)))
    phase_path = out / "nyquist_phases.csv"
    rio.write_csv(phase_path, ["phase_offset_rows", "freq_hz", "normalized_error"],
                  [(o, f, e) for o, r in zip(offsets, results) for f, e in r[0]])
    rio.write_json(out / "nyquist_timings.json", {"wall_time_s": [r[1] for r in results]})
    if plots:
        write_line_plot(out / "nyquist.svg", freqs, {"best phase": best},
                        title="error vs pulse frequency", xlabel="frequency (Hz)",
                        ylabel="normalized error")
    write_manifest(cfg, "nyquist", [path, phase_path])
    return {"freqs": freqs, "best": best, "files": [path, phase_path]}


def cmd_phase_sweep(cfg, system="single", plots=True, workers=1):
    """Per-pulse errors as the shutter phase shifts through one sweep period."""
    systems = {**DEFAULT_SYSTEMS, **cfg.options.get("systems", {})}
    if system not in systems:
        raise ConfigError(f"unknown system {system!r}; have {sorted(systems)}")
    sys_cfg = dict(systems[system])
    out = _out(cfg)
    rate = cfg.rate_hz * float(sys_cfg.get("rate_factor", 1))
    sched = build_schedule(cfg, rate_hz=rate, **sys_cfg)
    count = int(cfg.options.get("phase_count", 8))
    offsets = phase_offsets(sched, count)
    results = _map(_phase_cell, [(cfg, sys_cfg, o) for o in offsets], workers)
    rows = []
    for o, (errs, _) in zip(offsets, results):
        ms = 1000.0 * o / (sched.lines_per_sample * rate)
        rows.extend((ms, f, e) for f, e in errs)
    path = out / f"phase_{system}.csv"
    rio.write_csv(path, ["offset_ms", "pulse_freq", "normalized_error"], rows)
    rio.write_json(out / f"phase_{system}_timings.json", {"wall_time_s": [r[1] for r in results]})
    if plots:
        freqs = [f for f, _ in results[0][0]]
        series = {f"{f:g} Hz": [r[0][i][1] for r in results] for i, f in enumerate(freqs)}
        ms = [1000.0 * o / (sched.lines_per_sample * rate) for o in offsets]
        write_line_plot(out / f"phase_{system}.svg", ms, series, title=f"{system} shutter",
                        xlabel="phase offset (ms)", ylabel="normalized error")
    write_manifest(cfg, f"phase-sweep-{system}", [path])
    return {"offsets": offsets, "rows": rows, "files": [path]}


def _rip_cell(job):
    cfg, k, lines, seed, trials, t, exhaustive = job
    c = cfg.with_overrides(seed=seed)
    psf = build_psf(c)
    sched = build_schedule(c, lines_per_sample=lines)
    est = estimate_rip(psf, sched, t, k, trials, derive_seed(seed, "rip"), cfg.mode, exhaustive)
    return est


def cmd_rip_probe(cfg, plots=True, workers=1):
    """delta_k lower bounds over a (k, lines) grid for several seeds."""
    out = _out(cfg)
    o = cfg.options
    ks = [int(k) for k in o.get("ks", [1, 2, 4])]
    lines = [int(v) for v in o.get("lines", [1, 2, 4, 8])]
    seeds = [int(s) for s in o.get("seeds", [cfg.rng_seed])]
    trials = int(o.get("trials", 200))
    t = int(o.get("t", 0))
    exhaustive = bool(o.get("exhaustive", False))
    jobs = [(cfg, k, L, s, trials, t, exhaustive) for k in ks for L in lines for s in seeds]
    ests = _map(_rip_cell, jobs, workers)
    rows = [(j[1], j[2], j[3], e.trials, e.delta_lower, e.normalization, e.degenerate)
            for j, e in zip(jobs, ests)]
    path = out / "rip.csv"
    rio.write_csv(path, ["k", "lines", "seed", "trials", "delta_lower", "normalization",
                         "degenerate"], rows)
    if plots:
        series = {}
        for k in ks:
            series[f"k={k}"] = [float(np.median([r[4] for r in rows if r[0] == k and r[1] == L]))
                                for L in lines]
        write_line_plot(out / "rip.svg", lines, series, title="RIP probe (median over seeds)",
                        xlabel="lines per sample", ylabel="delta lower bound")
    write_manifest(cfg, "rip-probe", [path])
    return {"rows": rows, "files": [path]}
