"""Experiment orchestration: config files, sweeps, reports, and the CLI.

A sweep compares underdamped runs across a decreasing epsilon grid against
one limit-dynamics run. In coupled mode every run draws from the same
noise-stream indices (common-noise coupling, a variance-reduction device
for the Wasserstein estimates, not a pathwise claim); uncoupled mode gives
each epsilon a fresh stream and must agree statistically.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import scipy.special
import yaml

from . import __version__
from .ensemble import (
    D_MAX,
    RUN_INIT_POSITIONS,
    RUN_INIT_VELOCITIES,
    NoiseStream,
    OverdampedEnsemble,
    UnderdampedEnsemble,
    empirical_moment2,
    mean_field_coefficients,
    write_snapshots_csv,
)
from .errors import BlowUpError, SmallMassError, ValidationError
from .fpsolve1d import Grid1D, cell_centers, fp_solve, fp_step, write_density_csv
from .model import (
    ModelSpec,
    audit_assumptions,
    get_preset,
    make_classical_sk_1d,
    make_double_well_1d,
    make_gaussian_interaction_2d,
    make_quadratic_ou,
    make_state_dep_friction_1d,
)
from .observables import (
    W2_EXACT_MAX_N,
    EnergyReport,
    HolderReport,
    WeakGapReport,
    bump_test_functions,
    energy_diagnostic,
    gap_row,
    holder_diagnostic,
    paired_gap_stderr,
    w2_1d,
    w2_exact,
    w2_sliced,
    weak_momentum,
    weak_Yhat,
    weak_Ystar,
)
from .overdamped import simulate_limit
from .smallmat import lyapunov_quadrature, solve_lyapunov
from .underdamped import UDStepperConfig, simulate_underdamped

_SCHEMES = ("euler_maruyama", "exponential")
_W2_METHODS = ("auto", "exact", "sliced", "1d")
_VELOCITY_STARTS = ("cold", "equilibrated")

_MODEL_FACTORIES = {
    "quadratic-ou": make_quadratic_ou,
    "double-well-1d": make_double_well_1d,
    "state-dep-friction-1d": make_state_dep_friction_1d,
    "gaussian-interaction-2d": make_gaussian_interaction_2d,
    "classical-sk-1d": make_classical_sk_1d,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated sweep/diagnostic configuration, loadable from YAML.

    Exactly one of preset (a name) or model (a mapping {"kind": factory
    name, **keyword overrides}) selects the coefficients. init_components
    is a Gaussian mixture ((weight, mean, std), ...) for the initial
    positions; velocities start cold (zero) or equilibrated (drawn from
    the scaled stationary covariance J/epsilon).
    """

    preset: str = ""
    model: dict | None = None
    n_particles: int = 1000
    epsilon_grid: tuple = (0.1, 0.05)
    T: float = 1.0
    t_star: float = 0.1
    delta: float | None = None
    scheme: str = "euler_maruyama"
    dt_under: float | None = None
    dt_limit: float = 1e-3
    snapshot_times: tuple | None = None
    seed: int = 0
    psi_centers: tuple = (-1.0, 0.0, 1.0)
    psi_radius: float = 1.0
    init_components: tuple = ((1.0, 0.0, 0.5),)
    init_velocities: str = "equilibrated"
    coupled: bool = True
    w2_method: str = "auto"
    n_projections: int = 64
    out_dir: str = "out"
    audit_box: tuple = (-5.0, 5.0)
    audit_samples: int = 256
    fp_halfwidth: float = 4.0
    fp_cells: int = 200
    fp_dt: float | None = None

    def __post_init__(self):
        for name in ("epsilon_grid", "snapshot_times", "psi_centers", "audit_box"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, tuple(float(v) for v in val))
        if self.init_components is not None:
            comps = tuple(tuple(float(v) for v in c) for c in self.init_components)
            object.__setattr__(self, "init_components", comps)

        if bool(self.preset) == (self.model is not None):
            raise ValidationError("config needs exactly one of preset / model")
        if self.model is not None and "kind" not in self.model:
            raise ValidationError("inline model definition needs a 'kind' key")
        if self.n_particles < 2:
            raise ValidationError("n_particles must be at least 2")
        eg = self.epsilon_grid
        if not eg or any(e <= 0 for e in eg) or any(
            eg[i + 1] >= eg[i] for i in range(len(eg) - 1)
        ):
            raise ValidationError(
                "epsilon_grid must be nonempty, positive, strictly decreasing"
            )
        if not self.T > 0:
            raise ValidationError(f"T must be positive, got {self.T}")
        if not 0 < self.t_star <= self.T:
            raise ValidationError(f"t_star must lie in (0, T], got {self.t_star}")
        if self.delta is not None and not 0 < self.delta <= self.T - self.t_star:
            raise ValidationError("delta must lie in (0, T - t_star]")
        if self.scheme not in _SCHEMES:
            raise ValidationError(f"scheme must be one of {_SCHEMES}")
        if self.dt_under is not None and not self.dt_under > 0:
            raise ValidationError("dt_under must be positive when set")
        if not self.dt_limit > 0:
            raise ValidationError("dt_limit must be positive")
        st = self.snapshot_times
        if st is not None:
            if not st or list(st) != sorted(st):
                raise ValidationError("snapshot_times must be nonempty and sorted")
            if st[0] < self.t_star - 1e-12 or st[-1] > self.T + 1e-12:
                raise ValidationError("snapshot_times must lie in [t_star, T]")
        if not self.psi_centers or not self.psi_radius > 0:
            raise ValidationError("need at least one psi center and psi_radius > 0")
        comps = self.init_components
        if not comps or any(len(c) != 3 for c in comps):
            raise ValidationError("init_components must be (weight, mean, std) triples")
        if any(c[0] <= 0 or c[2] < 0 for c in comps):
            raise ValidationError("mixture weights must be > 0 and stds >= 0")
        if self.init_velocities not in _VELOCITY_STARTS:
            raise ValidationError(f"init_velocities must be one of {_VELOCITY_STARTS}")
        if self.w2_method not in _W2_METHODS:
            raise ValidationError(f"w2_method must be one of {_W2_METHODS}")
        if self.n_projections < 1:
            raise ValidationError("n_projections must be >= 1")
        if self.seed < 0:
            raise ValidationError("seed must be nonnegative")
        if len(self.audit_box) != 2 or not self.audit_box[1] > self.audit_box[0]:
            raise ValidationError("audit_box must be (low, high) with high > low")
        if self.audit_samples < 2:
            raise ValidationError("audit_samples must be at least 2")
        if self.fp_cells < 4 or not self.fp_halfwidth > 0:
            raise ValidationError("fp grid needs fp_cells >= 4 and fp_halfwidth > 0")
        if self.fp_dt is not None and not self.fp_dt > 0:
            raise ValidationError("fp_dt must be positive when set")

    @classmethod
    def from_mapping(cls, mapping) -> "ExperimentConfig":
        if not isinstance(mapping, dict):
            raise ValidationError(f"config must be a mapping, got {type(mapping).__name__}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**mapping)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as f:
                data = yaml.safe_load(f)
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ValidationError(f"config {path} is not valid YAML: {exc}") from exc
        return cls.from_mapping(data)

    def manifest_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = [list(c) if isinstance(c, tuple) else c for c in v]
        return out


def build_spec(config: ExperimentConfig) -> ModelSpec:
    if config.model is not None:
        params = dict(config.model)
        kind = params.pop("kind")
        factory = _MODEL_FACTORIES.get(kind)
        if factory is None:
            raise ValidationError(
                f"unknown model kind {kind!r}; choose from {sorted(_MODEL_FACTORIES)}"
            )
        try:
            return factory(**params)
        except TypeError as exc:
            raise ValidationError(f"bad parameters for model {kind!r}: {exc}") from exc
    return get_preset(config.preset)


def underdamped_dt(config: ExperimentConfig, epsilon: float) -> float:
    """EM shrinks with epsilon to stay inside its guard; the exponential
    scheme demonstrates epsilon-independent stepping."""
    if config.dt_under is not None:
        return config.dt_under
    if config.scheme == "exponential":
        return config.T / 100.0
    return min(epsilon / 10.0, 1e-3)


def default_delta(epsilon: float, dt: float) -> float:
    # the epsilon^3 scale is far below one step for practical grids, so the
    # usable default is step-limited, capped to keep >= 10 slices per unit time
    return min(max(epsilon**3, 10.0 * dt), 0.1)


def default_snapshots(t_star: float, T: float, n: int = 9) -> tuple:
    if T == t_star:
        return (T,)
    return tuple(float(t) for t in np.linspace(t_star, T, n))


# ------------------------------------------------------ initial conditions


def initial_positions(stream: NoiseStream, n, dim, components) -> np.ndarray:
    """Gaussian-mixture draw from the reserved position-init block.

    Component choice consumes the last noise lane, so it never collides
    with the first dim lanes used for the offsets.
    """
    z = stream.block(RUN_INIT_POSITIONS, 0, n)
    w = np.array([c[0] for c in components], dtype=float)
    mu = np.array([c[1] for c in components], dtype=float)
    sd = np.array([c[2] for c in components], dtype=float)
    if len(components) == 1:
        return mu[0] + sd[0] * z[:, :dim]
    u = scipy.special.ndtr(z[:, D_MAX - 1])
    idx = np.searchsorted(np.cumsum(w / w.sum()), u, side="right")
    idx = np.clip(idx, 0, len(components) - 1)
    return mu[idx, None] + sd[idx, None] * z[:, :dim]


def initial_velocities(
    stream: NoiseStream, positions, spec: ModelSpec, epsilon, kind
) -> np.ndarray:
    """Cold start (zeros) or a draw from N(0, J(x_i, rho_0)/epsilon)."""
    positions = np.asarray(positions, dtype=float)
    n, d = positions.shape
    if kind == "cold":
        return np.zeros((n, d))
    if kind != "equilibrated":
        raise ValidationError(f"init_velocities must be one of {_VELOCITY_STARTS}")
    z = stream.block(RUN_INIT_VELOCITIES, 0, n)[:, :d]
    A, _ = mean_field_coefficients(positions, spec)
    sig = spec.sigma_at(positions)
    if d == 1:
        J = sig[:, 0, 0] ** 2 / (2.0 * A[:, 0, 0])
        return np.sqrt(J / epsilon)[:, None] * z
    v = np.empty((n, d))
    for i in range(n):
        J = solve_lyapunov(A[i], sig[i] @ sig[i].T).J
        v[i] = np.linalg.cholesky(J / epsilon) @ z[i]
    return v


# ----------------------------------------------------------------- sweeps


def _w2_dispatch(a, b, config: ExperimentConfig, stream: NoiseStream):
    method = config.w2_method
    if method == "auto":
        if a.shape[1] == 1:
            method = "1d"
        elif a.shape[0] <= W2_EXACT_MAX_N:
            method = "exact"
        else:
            method = "sliced"
    if method == "1d":
        return w2_1d(a, b), "w2_1d"
    if method == "exact":
        return w2_exact(a, b), "w2_exact"
    return w2_sliced(a, b, config.n_projections, stream), "w2_sliced"


@dataclass(frozen=True)
class ConvergenceReport:
    """Sweep results; every number is reproducible from manifest + seed."""

    config: ExperimentConfig
    w2_rows: tuple  # (epsilon, t, value, method)
    weak: WeakGapReport
    holder: dict
    energy: EnergyReport
    max_moment2: dict
    manifest: dict
    out_paths: dict


def _eps_key(epsilon: float) -> str:
    return format(epsilon, ".17g")


def _run_one_epsilon(spec, config, epsilon, snaps, limit_snaps, base_stream, index):
    # coupled runs reuse the base stream (same init blocks, same step indices);
    # uncoupled runs get a fresh master seed per epsilon
    stream = base_stream if config.coupled else NoiseStream(config.seed + index + 1)
    x0 = initial_positions(stream, config.n_particles, spec.dim, config.init_components)
    v0 = initial_velocities(stream, x0, spec, epsilon, config.init_velocities)
    init = UnderdampedEnsemble(epsilon=epsilon, t=0.0, positions=x0, velocities=v0)
    cfg = UDStepperConfig(
        scheme=config.scheme, dt=underdamped_dt(config, epsilon), run_id=0
    )
    started = time.perf_counter()
    ud_snaps = simulate_underdamped(spec, init, config.T, cfg, stream, snaps)

    psis = bump_test_functions(spec.dim, config.psi_centers, config.psi_radius)
    w2_rows = []
    weak_rows = []
    for ud, od in zip(ud_snaps, limit_snaps):
        value, method = _w2_dispatch(ud.positions, od.positions, config, base_stream)
        w2_rows.append((epsilon, ud.t, value, method))
        for psi in psis:
            weak_rows.append(
                gap_row(
                    epsilon,
                    ud.t,
                    psi.name,
                    Y=weak_momentum(ud, psi),
                    Ystar=weak_Ystar(ud.positions, spec, psi),
                    mc_stderr=paired_gap_stderr(ud, spec, psi),
                )
            )
    try:
        holder = holder_diagnostic(ud_snaps, epsilon=epsilon)
    except ValidationError:
        holder = None  # snapshot grid too coarse for lags >= 10 epsilon
    moment2 = max(empirical_moment2(s) for s in ud_snaps)
    runtime = time.perf_counter() - started
    return {
        "epsilon": epsilon,
        "snaps": ud_snaps,
        "w2": w2_rows,
        "weak": weak_rows,
        "holder": holder,
        "moment2": moment2,
        "runtime": runtime,
    }


def _worker_count(n_jobs: int) -> int:
    cap = os.environ.get("SMALLMASS_THREADS", "")
    if cap:
        try:
            cap = int(cap)
        except ValueError:
            raise ValidationError(f"SMALLMASS_THREADS must be an integer, got {cap!r}")
        if cap < 1:
            raise ValidationError("SMALLMASS_THREADS must be >= 1")
        return min(cap, n_jobs)
    return min(4, os.cpu_count() or 1, n_jobs)


def _abort_with_manifest(config, epsilon, exc):
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, f"failed_eps_{epsilon:g}.json")
    with open(path, "w") as f:
        json.dump(
            {
                "epsilon": epsilon,
                "error": f"{type(exc).__name__}: {exc}",
                "config": config.manifest_dict(),
            },
            f,
            indent=2,
            sort_keys=True,
        )
    msg = f"sweep job epsilon={epsilon:g} failed: {exc}; manifest at {path}"
    err = type(exc)(msg) if isinstance(exc, SmallMassError) else SmallMassError(msg)
    raise err from exc


def run_convergence_sweep(config: ExperimentConfig) -> ConvergenceReport:
    """Simulate every epsilon against one limit run and write the report.

    Deterministic given config + seed: the CSV/JSON outputs (apart from
    the manifest's timestamps and runtimes) are byte-stable.
    """
    spec = build_spec(config)
    snaps = config.snapshot_times or default_snapshots(config.t_star, config.T)
    base_stream = NoiseStream(config.seed)

    x0 = initial_positions(
        base_stream, config.n_particles, spec.dim, config.init_components
    )
    started = time.perf_counter()
    limit_snaps = simulate_limit(
        spec,
        OverdampedEnsemble(t=0.0, positions=x0),
        config.T,
        config.dt_limit,
        base_stream,
        snapshot_times=snaps,
        run_id=0,
    )
    limit_runtime = time.perf_counter() - started

    grid = config.epsilon_grid
    results = [None] * len(grid)

    def job(i):
        try:
            return _run_one_epsilon(
                spec, config, grid[i], snaps, limit_snaps, base_stream, i
            )
        except Exception as exc:
            _abort_with_manifest(config, grid[i], exc)

    workers = _worker_count(len(grid))
    if workers == 1:
        for i in range(len(grid)):
            results[i] = job(i)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for i, res in enumerate(pool.map(job, range(len(grid)))):
                results[i] = res

    w2_rows = tuple(row for r in results for row in r["w2"])
    weak = WeakGapReport(rows=tuple(row for r in results for row in r["weak"]))
    holder = {r["epsilon"]: r["holder"] for r in results}
    energy = energy_diagnostic({r["epsilon"]: r["snaps"] for r in results})
    max_moment2 = {r["epsilon"]: r["moment2"] for r in results}

    os.makedirs(config.out_dir, exist_ok=True)
    paths = {
        "w2": os.path.join(config.out_dir, "w2.csv"),
        "weak_gaps": os.path.join(config.out_dir, "weak_gaps.csv"),
        "diagnostics": os.path.join(config.out_dir, "diagnostics.json"),
        "manifest": os.path.join(config.out_dir, "manifest.json"),
    }
    with open(paths["w2"], "w") as f:
        f.write("epsilon,t,w2,method\n")
        for eps, t, value, method in w2_rows:
            f.write(f"{eps:.17g},{t:.17g},{value:.17g},{method}\n")
    weak.write_csv(paths["weak_gaps"])

    def holder_json(h: HolderReport | None):
        if h is None:
            return None
        return {
            "slope": h.slope,
            "intercept": h.intercept,
            "n_pairs": h.n_pairs,
            "degenerate": h.degenerate,
        }

    with open(paths["diagnostics"], "w") as f:
        json.dump(
            {
                "holder": {_eps_key(e): holder_json(h) for e, h in holder.items()},
                "energy": {
                    "ratio": energy.ratio,
                    "rows": [list(row) for row in energy.rows],
                },
                "max_moment2": {_eps_key(e): m for e, m in max_moment2.items()},
            },
            f,
            indent=2,
            sort_keys=True,
        )

    manifest = {
        "config": config.manifest_dict(),
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "package": __version__,
        },
        "snapshot_times": list(snaps),
        "dt_under": {_eps_key(e): underdamped_dt(config, e) for e in grid},
        "dt_limit": config.dt_limit,
        "coupled": config.coupled,
        "runtimes_s": {
            "limit": limit_runtime,
            **{_eps_key(r["epsilon"]): r["runtime"] for r in results},
        },
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "outputs": sorted(os.path.basename(p) for p in paths.values()),
    }
    with open(paths["manifest"], "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)

    return ConvergenceReport(
        config=config,
        w2_rows=w2_rows,
        weak=weak,
        holder=holder,
        energy=energy,
        max_moment2=max_moment2,
        manifest=manifest,
        out_paths=paths,
    )


# ------------------------------------------------------- slice diagnostic


def slice_starts(t_star: float, T: float, delta: float) -> np.ndarray:
    """Start times of the full delta-slices partitioning [t_star, T]."""
    n = int(np.floor((T - t_star) / delta * (1.0 + 1e-12)))
    if n < 1:
        raise ValidationError(f"delta={delta:g} does not fit one slice in [t_star, T]")
    return t_star + delta * np.arange(n)


def run_slice_diagnostic(config: ExperimentConfig, delta=None) -> WeakGapReport:
    """Gap rows Y vs Yhat on one underdamped run partitioned into slices.

    Each slice contributes rows at its start (gap exactly zero by
    construction), midpoint, and end, for every bump test function. delta
    falls back to config.delta, then to the step-limited default.
    """
    spec = build_spec(config)
    epsilon = config.epsilon_grid[0]
    dt = underdamped_dt(config, epsilon)
    if delta is None:
        delta = config.delta if config.delta is not None else default_delta(epsilon, dt)
    delta = float(delta)
    if delta < dt:
        raise ValidationError(f"delta={delta:g} is below one step dt={dt:g}")
    starts = slice_starts(config.t_star, config.T, delta)
    times = np.unique(
        np.concatenate([starts, starts + 0.5 * delta, starts + delta])
    )
    times = times[times <= config.T * (1.0 + 1e-12)]

    stream = NoiseStream(config.seed)
    x0 = initial_positions(stream, config.n_particles, spec.dim, config.init_components)
    v0 = initial_velocities(stream, x0, spec, epsilon, config.init_velocities)
    init = UnderdampedEnsemble(epsilon=epsilon, t=0.0, positions=x0, velocities=v0)
    cfg = UDStepperConfig(scheme=config.scheme, dt=dt, run_id=0)
    snaps = simulate_underdamped(
        spec, init, config.T, cfg, stream, [float(t) for t in times]
    )
    by_time = {round(s.t, 12): s for s in snaps}

    psis = bump_test_functions(spec.dim, config.psi_centers, config.psi_radius)
    rows = []
    for t_k in starts:
        anchor = by_time[round(t_k, 12)]
        for t in (t_k, t_k + 0.5 * delta, t_k + delta):
            state = by_time[round(t, 12)]
            for psi in psis:
                rows.append(
                    gap_row(
                        epsilon,
                        state.t,
                        psi.name,
                        Y=weak_momentum(state, psi),
                        Ystar=weak_Ystar(state.positions, spec, psi),
                        Yhat=weak_Yhat(anchor, state.t, anchor.t, spec, psi),
                        mc_stderr=paired_gap_stderr(state, spec, psi),
                    )
                )
    return WeakGapReport(rows=tuple(rows))


def slice_gap_ratio(
    report_small: WeakGapReport, report_big: WeakGapReport, t_star, delta
) -> float:
    """Mean per-slice max |Y - Yhat| of the 2delta run over the delta run.

    Slice membership is recovered from row times: t in (t_k, t_k + delta]
    belongs to slice k. Start rows carry gap zero, so the misrounding of a
    start time into the previous slice cannot move any maximum.
    """

    def mean_slice_max(report: WeakGapReport, width: float) -> float:
        buckets = {}
        for row in report.rows:
            j = int(np.ceil((row.t - t_star) / width - 1e-9)) - 1
            j = max(j, 0)
            buckets[j] = max(buckets.get(j, 0.0), abs(row.gap_Y_Yhat))
        return float(np.mean(list(buckets.values())))

    small = mean_slice_max(report_small, delta)
    big = mean_slice_max(report_big, 2.0 * delta)
    if small == 0.0:
        raise ValidationError("delta-run gaps are identically zero; ratio undefined")
    return big / small


# -------------------------------------------------------------------- CLI


def _cli_audit(config: ExperimentConfig) -> int:
    spec = build_spec(config)
    lo, hi = config.audit_box
    box = (np.full(spec.dim, lo), np.full(spec.dim, hi))
    report = audit_assumptions(
        spec, box, config.audit_samples, NoiseStream(config.seed)
    )
    flags = [
        ("H1 drift Lipschitz", report.pass_h1),
        ("H2 sigma regularity", report.pass_h2),
        ("H3 gamma positivity", report.pass_h3),
        ("H4 phi positivity", report.pass_h4),
    ]
    for label, ok in flags:
        print(f"[audit] {label}: {'PASS' if ok else 'FAIL'}")
    if report.h4_bypassed:
        print("[audit] H4 bypassed (classical preset, phi == 0)")
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, "audit.json")
    with open(path, "w") as f:
        json.dump(dataclasses.asdict(report), f, indent=2, sort_keys=True)
    print(f"[audit] wrote {path}")
    return 0 if report.all_pass else 2


def _cli_simulate(config: ExperimentConfig) -> int:
    spec = build_spec(config)
    epsilon = config.epsilon_grid[0]
    stream = NoiseStream(config.seed)
    x0 = initial_positions(stream, config.n_particles, spec.dim, config.init_components)
    v0 = initial_velocities(stream, x0, spec, epsilon, config.init_velocities)
    init = UnderdampedEnsemble(epsilon=epsilon, t=0.0, positions=x0, velocities=v0)
    cfg = UDStepperConfig(
        scheme=config.scheme, dt=underdamped_dt(config, epsilon), run_id=0
    )
    snaps = simulate_underdamped(
        spec, init, config.T, cfg, stream, config.snapshot_times
    )
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, "underdamped_snapshots.csv")
    write_snapshots_csv(path, snaps)
    print(f"[simulate] epsilon={epsilon:g} N={config.n_particles} wrote {path}")
    return 0


def _cli_limit(config: ExperimentConfig) -> int:
    spec = build_spec(config)
    stream = NoiseStream(config.seed)
    x0 = initial_positions(stream, config.n_particles, spec.dim, config.init_components)
    snaps = simulate_limit(
        spec,
        OverdampedEnsemble(t=0.0, positions=x0),
        config.T,
        config.dt_limit,
        stream,
        snapshot_times=config.snapshot_times,
        run_id=0,
    )
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, "limit_snapshots.csv")
    write_snapshots_csv(path, snaps)
    print(f"[limit] N={config.n_particles} wrote {path}")
    return 0


def _cli_lyapunov_check(config: ExperimentConfig) -> int:
    rng = np.random.default_rng(config.seed)
    worst_res, worst_quad = 0.0, 0.0
    for i in range(200):
        d = int(rng.integers(1, 7))
        G = rng.normal(size=(d, d))
        sym_min = float(np.linalg.eigvalsh((G + G.T) / 2.0)[0])
        A = G + (abs(sym_min) + 0.5) * np.eye(d)
        sig = rng.normal(size=(d, d))
        Q = sig @ sig.T
        sol = solve_lyapunov(A, Q)
        res = np.linalg.norm(A @ sol.J + sol.J @ A.T - Q) / (1.0 + np.linalg.norm(Q))
        quad = np.linalg.norm(sol.J - lyapunov_quadrature(A, Q))
        worst_res = max(worst_res, float(res))
        worst_quad = max(worst_quad, float(quad))
    print(f"[lyapunov-check] 200 instances: max residual {worst_res:.3e}, "
          f"max solve-vs-quadrature gap {worst_quad:.3e}")
    ok = worst_res <= 1e-10 and worst_quad <= 1e-6
    print(f"[lyapunov-check] {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 2


def _cli_converge(config: ExperimentConfig) -> int:
    report = run_convergence_sweep(config)
    final_t = max(t for _, t, _, _ in report.w2_rows)
    for eps in config.epsilon_grid:
        val = next(
            v for e, t, v, _ in report.w2_rows if e == eps and t == final_t
        )
        print(f"[converge] epsilon={eps:g}: W2(T)={val:.6g}")
    for name, path in sorted(report.out_paths.items()):
        print(f"[converge] wrote {path}")
    return 0


def _cli_slice_diag(config: ExperimentConfig) -> int:
    epsilon = config.epsilon_grid[0]
    dt = underdamped_dt(config, epsilon)
    delta = config.delta if config.delta is not None else default_delta(epsilon, dt)
    rep_small = run_slice_diagnostic(config, delta=delta)
    rep_big = run_slice_diagnostic(config, delta=2.0 * delta)
    os.makedirs(config.out_dir, exist_ok=True)
    p_small = os.path.join(config.out_dir, "slice_gaps_delta.csv")
    p_big = os.path.join(config.out_dir, "slice_gaps_2delta.csv")
    rep_small.write_csv(p_small)
    rep_big.write_csv(p_big)
    ratio = slice_gap_ratio(rep_small, rep_big, config.t_star, delta)
    summary = os.path.join(config.out_dir, "slice_summary.json")
    with open(summary, "w") as f:
        json.dump(
            {"epsilon": epsilon, "delta": delta, "gap_ratio_2delta_over_delta": ratio},
            f,
            indent=2,
            sort_keys=True,
        )
    print(f"[slice-diag] epsilon={epsilon:g} delta={delta:g} gap ratio {ratio:.4g}")
    for p in (p_small, p_big, summary):
        print(f"[slice-diag] wrote {p}")
    return 0


def _cli_fp(config: ExperimentConfig) -> int:
    spec = build_spec(config)
    if spec.dim != 1:
        raise ValidationError("fp subcommand needs a 1D model")
    if any(c[2] <= 0 for c in config.init_components):
        raise ValidationError("fp initial mixture needs positive stds")
    x = cell_centers(config.fp_halfwidth, config.fp_cells)
    values = np.zeros_like(x)
    for w, mu, sd in config.init_components:
        values += w * np.exp(-((x - mu) ** 2) / (2.0 * sd * sd)) / sd
    grid0 = Grid1D.from_values(config.fp_halfwidth, config.fp_cells, values)
    dt = config.fp_dt
    if dt is None:
        try:
            fp_step(grid0, spec, np.inf)
        except SmallMassError as exc:
            admissible = getattr(exc, "admissible_dt", None)
            if admissible is None:
                raise
            dt = 0.9 * admissible
        else:  # free-streaming grid with no CFL bound at all
            dt = 1e-3
    snaps = fp_solve(spec, grid0, config.T, dt, snapshot_times=config.snapshot_times)
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, "density.csv")
    write_density_csv(path, snaps)
    print(f"[fp] M={config.fp_cells} dt={dt:g} wrote {path}")
    return 0


_COMMANDS = {
    "audit": _cli_audit,
    "simulate": _cli_simulate,
    "limit": _cli_limit,
    "lyapunov-check": _cli_lyapunov_check,
    "converge": _cli_converge,
    "slice-diag": _cli_slice_diag,
    "fp": _cli_fp,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="smallmass",
        description="Small-mass limit laboratory: simulate, compare, diagnose.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override config out_dir")
    args = parser.parse_args(argv)
    try:
        config = ExperimentConfig.from_yaml(args.config)
        if args.seed is not None:
            config = replace(config, seed=args.seed)
        if args.out is not None:
            config = replace(config, out_dir=args.out)
        return _COMMANDS[args.command](config)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BlowUpError as exc:
        print(f"blow-up: {exc}", file=sys.stderr)
        return 3
    except SmallMassError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
