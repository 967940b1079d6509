r"""Time integration of the stiff underdamped particle system.

Per particle, with A = gamma(x) + phi*rho(x) and F = grad V + gradK*rho
evaluated on the frozen start-of-step snapshot,

    eps dv = (-A v - F) dt + sigma dB,    dx = v dt.

Two schemes:

* Euler-Maruyama: explicit, requires dt * lambda_max(sym A) / eps below the
  stability guard, so dt must shrink with eps.
* Exponential: the frozen-coefficient velocity block is a linear SDE whose
  transition law is known exactly,

      v <- E v + A^{-1}(I - E) b + xi,   E = expm(-A dt/eps),  b = -F,

  with xi mean-zero Gaussian, Cov(xi) = (J - E J E^T)/eps and
  A J + J A^T = sigma sigma^T. This is exact in dt for the velocity given
  frozen coefficients, hence stable uniformly in eps. The position update
  uses the trapezoidal velocity, accurate while dt stays within a few
  velocity relaxation times eps/lambda(A). Far beyond that the scheme is
  still stable and the velocity marginal still exact, but the position law
  degrades: the trapezoid holds v for a step it actually decorrelates
  within, inflating position noise by roughly dt*lambda(A)/(2 eps), and
  the step-frozen coefficients average away the noise-induced drift of
  state-dependent friction. Long-step runs demonstrate stability, not
  position accuracy; resolve eps/lambda(A) when the position law matters.

The covariance formula is the stationary-minus-decayed form of the
differential Sylvester solution: d/ds [e^{-As} J e^{-A^T s}] integrates the
noise covariance flow, so Var(v_t) = (J - E J E^T)/eps after time dt.

The same one-shot exact update, pinned at a fixed x and measure, implements
`frozen_velocity_covariance`: the pinned velocity SDE has genuinely frozen
coefficients, so a single exponential step of length t IS its exact
simulation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ensemble import (
    NoiseStream,
    UnderdampedEnsemble,
    conv_gradK,
    conv_phi,
    mean_field_coefficients,
)
from .errors import BlowUpError, StabilityError, StiffnessError, ValidationError
from .model import ModelSpec
from .smallmat import expm, invert, solve_lyapunov

SCHEMES = ("euler_maruyama", "exponential")


@dataclass(frozen=True)
class UDStepperConfig:
    """Scheme selection and step control for the underdamped integrators.

    run_id tags the noise-stream blocks consumed by this run; coupled runs
    share it, independent runs use distinct ids.
    """

    scheme: str = "exponential"
    dt: float = 1e-3
    substep_guard: float = 0.5
    run_id: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValidationError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not self.dt >= 0:
            raise ValidationError(f"dt must be nonnegative, got {self.dt}")
        if not 0 < self.substep_guard <= 1:
            raise ValidationError("substep_guard must lie in (0, 1]")


def _sigma_1d(spec, X):
    return spec.sigma_at(X)[:, 0, 0]


def step_underdamped_em(
    state: UnderdampedEnsemble,
    spec: ModelSpec,
    cfg: UDStepperConfig,
    stream: NoiseStream,
    dt: float | None = None,
) -> UnderdampedEnsemble:
    """One explicit Euler-Maruyama step on the frozen snapshot."""
    dt = cfg.dt if dt is None else dt
    eps = state.epsilon
    X, V = state.positions, state.velocities
    d = state.dim
    A, F = mean_field_coefficients(X, spec)

    sym = 0.5 * (A + np.swapaxes(A, -1, -2))
    lam_max = float(np.max(np.linalg.eigvalsh(sym)))
    if dt * lam_max / eps > cfg.substep_guard:
        admissible = cfg.substep_guard * eps / lam_max
        raise StiffnessError(
            f"EM step dt={dt:.3e} violates the stability guard "
            f"(dt*lam_max/eps = {dt * lam_max / eps:.3f} > {cfg.substep_guard}); "
            f"reduce dt to <= {admissible:.3e} or switch to the exponential scheme",
            admissible_dt=admissible,
        )

    xi = stream.block(cfg.run_id, state.step + 1, state.N)[:, :d]
    if d == 1:
        a = A[:, 0, 0]
        s = _sigma_1d(spec, X)
        v_new = V + (dt / eps) * (-a[:, None] * V - F) + (np.sqrt(dt) / eps) * (
            s[:, None] * xi
        )
    else:
        sig = spec.sigma_at(X)
        drift = -np.einsum("nij,nj->ni", A, V) - F
        noise = np.einsum("nij,nj->ni", sig, xi)
        v_new = V + (dt / eps) * drift + (np.sqrt(dt) / eps) * noise
    x_new = X + dt * v_new
    return _advance_checked(state, x_new, v_new, dt)


def _advance_checked(state, x_new, v_new, dt):
    # detect divergence before the ensemble constructor rejects the arrays
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(v_new))):
        raise BlowUpError(
            f"non-finite state after step to t={state.t + dt:.6g}", t=state.t + dt
        )
    return state.advanced(x_new, v_new, dt)


def _gaussian_from_cov(cov, xi):
    """Color unit normals xi (n, d) with covariance cov (d, d), PSD-clipped."""
    w, U = np.linalg.eigh(0.5 * (cov + cov.T))
    L = U * np.sqrt(np.clip(w, 0.0, None))
    return xi @ L.T


def step_underdamped_exp(
    state: UnderdampedEnsemble,
    spec: ModelSpec,
    cfg: UDStepperConfig,
    stream: NoiseStream,
    dt: float | None = None,
) -> UnderdampedEnsemble:
    """One frozen-coefficient exact exponential step (any dt, any eps)."""
    dt = cfg.dt if dt is None else dt
    eps = state.epsilon
    X, V = state.positions, state.velocities
    d = state.dim
    A, F = mean_field_coefficients(X, spec)
    b = -F
    xi = stream.block(cfg.run_id, state.step + 1, state.N)[:, :d]

    if d == 1:
        a = A[:, 0, 0]
        if np.min(a) <= 0.0:
            raise StabilityError(
                f"frozen friction has min eigenvalue {np.min(a):.6e} <= 0"
            )
        s = _sigma_1d(spec, X)
        E = np.exp(-a * dt / eps)
        J = s * s / (2.0 * a)
        v_det = E[:, None] * V + ((1.0 - E) * b[:, 0] / a)[:, None]
        std = np.sqrt(np.maximum(J * (1.0 - E * E) / eps, 0.0))
        v_new = v_det + std[:, None] * xi
    else:
        sym = 0.5 * (A + np.swapaxes(A, -1, -2))
        lam_min = float(np.min(np.linalg.eigvalsh(sym)))
        if lam_min <= 0.0:
            raise StabilityError(
                f"frozen friction has min symmetric eigenvalue {lam_min:.6e} <= 0"
            )
        sig = spec.sigma_at(X)
        v_new = np.empty_like(V)
        for i in range(state.N):
            E = expm(-A[i] * (dt / eps))
            Ainv = invert(A[i])
            J = solve_lyapunov(A[i], sig[i] @ sig[i].T).J
            cov = (J - E @ J @ E.T) / eps
            v_det = E @ V[i] + Ainv @ ((np.eye(d) - E) @ b[i])
            v_new[i] = v_det + _gaussian_from_cov(cov, xi[i][None, :])[0]
    x_new = X + 0.5 * dt * (V + v_new)
    return _advance_checked(state, x_new, v_new, dt)


_STEPPERS = {"euler_maruyama": step_underdamped_em, "exponential": step_underdamped_exp}


def simulate_underdamped(
    spec: ModelSpec,
    init: UnderdampedEnsemble,
    T: float,
    cfg: UDStepperConfig,
    stream: NoiseStream,
    snapshot_times=None,
) -> list[UnderdampedEnsemble]:
    """Integrate to T, emitting states at the requested times.

    Substeps are shortened to land exactly on each snapshot time (every
    step consumes one noise index regardless of its length). With
    snapshot_times None, only the final state is returned.
    """
    return _simulate(
        _STEPPERS[cfg.scheme], spec, init, T, cfg, stream, snapshot_times
    )


def _snapshot_targets(t0, T, dt, snapshot_times):
    """Validate and normalize the emission times shared by both integrators."""
    if T < t0:
        raise ValidationError(f"T={T} precedes the initial time {t0}")
    if snapshot_times is None:
        targets = [T]
    else:
        targets = [float(s) for s in snapshot_times]
        if targets != sorted(targets):
            raise ValidationError("snapshot_times must be sorted")
        if targets and (targets[0] < t0 - 1e-12 or targets[-1] > T + 1e-12):
            raise ValidationError("snapshot_times must lie within [init.t, T]")
    if dt == 0.0 and T > t0:
        raise ValidationError("dt=0 cannot reach T > init.t")
    return targets


def _simulate(stepper, spec, init, T, cfg, stream, snapshot_times):
    targets = _snapshot_targets(init.t, T, cfg.dt, snapshot_times)
    out = []
    state = init
    tol = 1e-12 * max(1.0, abs(T))
    for target in targets:
        while state.t < target - tol:
            dt_sub = min(cfg.dt, target - state.t)
            state = stepper(state, spec, cfg, stream, dt=dt_sub)
        out.append(state)
    return out


def frozen_velocity_covariance(
    spec: ModelSpec,
    x,
    measure,
    epsilon: float,
    t: float,
    reps: int,
    stream: NoiseStream,
    run_id: int = 0,
):
    """eps * E[v (x) v] at time t for the velocity SDE pinned at x.

    The pinned process has frozen coefficients (A, F, sigma evaluated at x
    against the fixed measure) and starts from v = 0, so its time-t law is
    Gaussian with mean A^{-1}(I - E)b and covariance (J - E J E^T)/eps; one
    exact exponential draw per replica realizes it. Returns the (d, d)
    matrix eps * mean(v v^T) and its Monte Carlo standard-error matrix.
    """
    reps = int(reps)
    if reps < 2:
        raise ValidationError("reps must be at least 2")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = spec.dim
    if x.shape != (d,):
        raise ValidationError(f"x must have shape ({d},), got {x.shape}")
    if not (epsilon > 0 and t >= 0):
        raise ValidationError("need epsilon > 0 and t >= 0")

    A = spec.gamma_at(x[None])[0] + conv_phi(x, measure, spec)
    F = spec.grad_V_at(x[None])[0] + conv_gradK(x, measure, spec)
    sig = spec.sigma_at(x[None])[0]
    lam = np.min(np.linalg.eigvalsh(0.5 * (A + A.T)))
    if lam <= 0.0:
        raise StabilityError(f"frozen friction at x has min eigenvalue {lam:.6e} <= 0")

    E = expm(-A * (t / epsilon))
    J = solve_lyapunov(A, sig @ sig.T).J
    mu = invert(A) @ ((np.eye(d) - E) @ (-F))
    cov = (J - E @ J @ E.T) / epsilon

    xi = stream.block(run_id, 1, reps)[:, :d]
    v = mu + _gaussian_from_cov(cov, xi)
    outer = v[:, :, None] * v[:, None, :]
    second = epsilon * np.mean(outer, axis=0)
    stderr = epsilon * np.std(outer, axis=0, ddof=1) / np.sqrt(reps)
    return second, stderr
