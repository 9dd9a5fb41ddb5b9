"""Levenberg-Marquardt least squares and the fit models used by the protocols."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

FTOL = 1e-10
GTOL = 1e-8
XTOL = 1e-13
MAX_ITER = 200
FD_REL_STEP = 1e-6
FD_ABS_FLOOR = 1e-12


class BootstrapError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitModel:
    name: str
    param_names: tuple
    param_units: tuple
    func: Callable
    jacobian: Callable | None = None
    fixed: tuple | None = None
    guess: Callable | None = None
    x_unit: str = ""
    y_unit: str = ""

    def __call__(self, x, theta):
        return self.func(np.asarray(x, dtype=float), np.asarray(theta, dtype=float))

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    def fixing(self, *names) -> "FitModel":
        """Copy of the model with the named parameters held at their initial values."""
        unknown = set(names) - set(self.param_names)
        if unknown:
            raise KeyError(f"{self.name} has no parameter(s) {sorted(unknown)}")
        mask = tuple(n in names for n in self.param_names)
        return FitModel(self.name, self.param_names, self.param_units, self.func,
                        self.jacobian, mask, self.guess, self.x_unit, self.y_unit)

    def initial_guess(self, x, y) -> np.ndarray:
        if self.guess is None:
            raise ValueError(f"model {self.name} has no initial-guess heuristic; pass theta0")
        return np.asarray(self.guess(np.asarray(x, float), np.asarray(y, float)), dtype=float)


@dataclass
class FitResult:
    model: str
    param_names: tuple
    param_units: tuple
    theta: np.ndarray
    covariance: np.ndarray
    residual_norm: float
    n_iterations: int
    converged: bool
    gradient_norm: float = 0.0
    message: str = ""
    intervals: dict = field(default_factory=dict)

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def __getitem__(self, name: str) -> float:
        return float(self.theta[self.param_names.index(name)])

    def as_dict(self) -> dict:
        params = []
        for i, name in enumerate(self.param_names):
            entry = {
                "name": name,
                "value": float(self.theta[i]),
                "unit": self.param_units[i],
                "stderr": float(self.stderr[i]),
            }
            if name in self.intervals:
                entry["interval"] = [float(v) for v in self.intervals[name]]
            params.append(entry)
        return {
            "model": self.model,
            "parameters": params,
            "residual_norm": float(self.residual_norm),
            "iterations": int(self.n_iterations),
            "converged": bool(self.converged),
            "message": self.message,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"


def fd_jacobian(func, x, theta, free):
    """Forward differences with step max(1e-6 |theta|, 1e-12)."""
    f0 = func(x, theta)
    jac = np.empty((f0.size, len(free)))
    for k, j in enumerate(free):
        h = max(FD_REL_STEP * abs(theta[j]), FD_ABS_FLOOR)
        tp = theta.copy()
        tp[j] += h
        jac[:, k] = (func(x, tp) - f0) / (tp[j] - theta[j])
    return jac


def _xy(data):
    if hasattr(data, "x") and hasattr(data, "y"):
        y = np.asarray(data.y, dtype=float)
        return np.asarray(data.x, dtype=float), (y if y.ndim == 1 else y[0])
    x, y = data
    return np.asarray(x, dtype=float), np.asarray(y, dtype=float)


def fit(model: FitModel, data, theta0=None, max_iter: int = MAX_ITER) -> FitResult:
    """Minimise the squared residuals of ``model`` against ``data`` = Dataset or (x, y)."""
    x, y = _xy(data)
    if theta0 is None:
        theta0 = model.initial_guess(x, y)
    theta = np.array(theta0, dtype=float)
    if theta.shape != (model.n_params,) or not np.all(np.isfinite(theta)):
        raise ValueError(f"theta0 must be {model.n_params} finite values, got {theta0!r}")
    fixed = model.fixed or (False,) * model.n_params
    free = [i for i in range(model.n_params) if not fixed[i]]
    if y.size < len(free) + 1:
        raise ValueError(f"need at least {len(free) + 1} points for {len(free)} free parameters, got {y.size}")

    scale = np.where(theta != 0, np.abs(theta), 1.0)[free]

    def residual(t):
        return model(x, t) - y

    def jac(t):
        if model.jacobian is not None:
            return np.asarray(model.jacobian(x, t), dtype=float)[:, free]
        return fd_jacobian(model.func, x, t, free)

    r = residual(theta)
    cost = float(r @ r)
    jmat = jac(theta) * scale
    jtj = jmat.T @ jmat
    mu = 1e-3 * float(np.max(np.diag(jtj))) if jtj.size else 0.0
    converged, message, it = False, "maximum iterations reached", 0

    # residual norm is floored so that fits to exact data, whose residual is
    # pure round-off, do not read as far from stationary
    r_floor = 1e-6 * math.sqrt(float(y @ y))

    def gradient_measure(jm, res):
        rn = max(math.sqrt(float(res @ res)), r_floor)
        if rn == 0.0:
            return 0.0
        cols = np.linalg.norm(jm, axis=0)
        g = np.abs(jm.T @ res)
        with np.errstate(divide="ignore", invalid="ignore"):
            return float(np.max(np.where(cols > 0, g / (cols * rn), 0.0)))

    gnorm = gradient_measure(jmat, r)
    stalled = False
    message = "gradient below tolerance at start" if cost == 0.0 or gnorm < GTOL else message
    done = cost == 0.0 or gnorm < GTOL
    while not done and it < max_iter:
        it += 1
        grad = jmat.T @ r
        try:
            step = np.linalg.solve(jtj + mu * np.eye(len(free)), -grad)
        except np.linalg.LinAlgError:
            mu = max(mu * 10.0, 1e-300)
            if mu > 1e300:
                message, done = "normal equations persistently singular", True
            continue
        trial = theta.copy()
        trial[free] += step * scale
        with np.errstate(over="ignore", invalid="ignore"):  # a runaway trial is just rejected
            r_trial = residual(trial)
            cost_trial = float(r_trial @ r_trial)
        if not math.isfinite(cost_trial):
            cost_trial = math.inf
        if cost_trial < cost:
            rel_change = (cost - cost_trial) / cost
            rel_step = float(np.max(np.abs(step) / np.maximum(np.abs(theta[free]) / scale, 1.0)))
            theta, r, cost = trial, r_trial, cost_trial
            jmat = jac(theta) * scale
            jtj = jmat.T @ jmat
            mu /= 10.0
            gnorm = gradient_measure(jmat, r)
            if cost == 0.0 or gnorm < GTOL:
                message, done = "gradient below tolerance", True
            elif rel_change < FTOL:
                message, done, stalled = "relative cost change below tolerance", True, True
            elif rel_step < XTOL:
                message, done, stalled = "step below tolerance", True, True
        else:
            mu *= 10.0
            if mu > 1e300 or not np.isfinite(mu):
                message, done = "damping diverged without improvement", True
            elif step.size and float(np.max(np.abs(step))) < XTOL:
                message, done, stalled = "step below tolerance", True, True

    if stalled and gnorm >= GTOL:
        # the cost has flattened but the gradient test is not yet met: a few
        # undamped Gauss-Newton steps finish the descent near the minimum
        for _ in range(10):
            step = np.linalg.lstsq(jmat, -r, rcond=None)[0]
            trial = theta.copy()
            trial[free] += step * scale
            r_trial = residual(trial)
            if not np.all(np.isfinite(r_trial)):
                break
            cost_trial = float(r_trial @ r_trial)
            j_trial = jac(trial) * scale
            g_trial = gradient_measure(j_trial, r_trial)
            if cost_trial > cost * (1.0 + 1e-12) or g_trial >= gnorm:
                break
            theta, r, cost, jmat, gnorm = trial, r_trial, cost_trial, j_trial, g_trial
            if gnorm < GTOL:
                break
    converged = cost == 0.0 or gnorm < GTOL
    if not converged and done:
        message += f"; gradient measure {gnorm:.3g} above {GTOL:g}"

    cov = np.zeros((model.n_params, model.n_params))
    dof = y.size - len(free)
    if free and dof > 0:
        # invert in column-normalised coordinates; raw columns can differ by 1e16
        cols = np.linalg.norm(jmat, axis=0)
        cols = np.where(cols > 0, cols, 1.0)
        unit = jmat / cols
        cfree = (cost / dof) * np.linalg.pinv(unit.T @ unit) / np.outer(cols, cols)
        cfree *= np.outer(scale, scale)
        cfree = 0.5 * (cfree + cfree.T)
        cov[np.ix_(free, free)] = cfree
    return FitResult(model.name, tuple(model.param_names), tuple(model.param_units), theta, cov,
                     math.sqrt(cost), it, converged, gnorm, message)


# ------------------------------------------------------------------ models

def _t1(x, th):
    a, b, t1 = th
    return 1.0 - a * np.exp(-x / t1) + b


def _t1_jac(x, th):
    a, b, t1 = th
    e = np.exp(-x / t1)
    return np.column_stack([-e, np.ones_like(x), -a * e * x / t1**2])


def _t1_guess(x, y):
    order = np.argsort(x)
    x, y = x[order], y[order]
    b = y[-1] - 1.0
    a = y[-1] - y[0]
    target = y[-1] - a / math.e
    idx = int(np.argmin(np.abs(y - target)))
    t1 = x[idx] - x[0] if x[idx] > x[0] else (x[-1] - x[0]) / 3.0
    return [a, b, max(t1, (x[-1] - x[0]) / 50.0)]


def _damped_sine(x, th):
    amp, omega, phi, t2, off = th
    return amp * np.sin(omega * x + phi) * np.exp(-x / t2) + off


def _dominant_frequency(x, y):
    """FFT peak frequency (Hz) of uniformly resampled, mean-removed data."""
    order = np.argsort(x)
    x, y = x[order], y[order]
    n = max(len(x), 8) * 8
    grid = np.linspace(x[0], x[-1], n)
    yi = np.interp(grid, x, y)
    yi = (yi - yi.mean()) * np.hanning(n)
    spec = np.abs(np.fft.rfft(yi, 4 * n))
    freqs = np.fft.rfftfreq(4 * n, grid[1] - grid[0])
    spec[0] = 0.0
    return float(freqs[int(np.argmax(spec))])


def _damped_sine_guess(x, y):
    order = np.argsort(x)
    x, y = x[order], y[order]
    f = _dominant_frequency(x, y)
    omega = 2 * np.pi * f
    off = float(y[-max(1, len(y) // 5):].mean())
    amp = 0.5 * float(np.ptp(y))
    span = x[-1] - x[0]
    # phase from projection onto the oscillation at the first quarter of the data
    head = x <= x[0] + span / 4 if span > 0 else np.ones_like(x, bool)
    c = np.sum((y[head] - off) * np.cos(omega * x[head]))
    s = np.sum((y[head] - off) * np.sin(omega * x[head]))
    phi = math.atan2(c, s)
    return [amp, omega, phi, span / 2.0 if span > 0 else 1.0, off]


FWHM_TO_SIGMA = 1.0 / math.sqrt(8.0 * math.log(2.0))


def _gauss(x, th):
    amp, c, w, off = th
    return amp * np.exp(-4.0 * math.log(2.0) * (x - c) ** 2 / w**2) + off


def _gauss_jac(x, th):
    amp, c, w, off = th
    k = 4.0 * math.log(2.0)
    e = np.exp(-k * (x - c) ** 2 / w**2)
    return np.column_stack([e, amp * e * 2 * k * (x - c) / w**2, amp * e * 2 * k * (x - c) ** 2 / w**3, np.ones_like(x)])


def _gauss_guess(x, y):
    off = float(np.median(np.concatenate([y[:max(1, len(y) // 10)], y[-max(1, len(y) // 10):]])))
    i = int(np.argmax(np.abs(y - off)))
    amp = float(y[i] - off)
    above = np.abs(y - off) >= 0.5 * abs(amp)
    xs = x[above]
    w = float(xs.max() - xs.min()) if xs.size > 1 else float(np.ptp(x)) / 10.0
    return [amp, float(x[i]), max(w, float(np.ptp(x)) / len(x)), off]


def _double_gauss(x, th):
    a1, c1, a2, c2, w, off = th
    k = 4.0 * math.log(2.0)
    return a1 * np.exp(-k * (x - c1) ** 2 / w**2) + a2 * np.exp(-k * (x - c2) ** 2 / w**2) + off


def _linear(x, th):
    return th[0] * x


def _linear_jac(x, th):
    return x.reshape(-1, 1).astype(float)


def _linear_guess(x, y):
    denom = float(x @ x)
    return [float(x @ y) / denom if denom else 0.0]


def splitting_hyperbola(e_perp_per_volt: float, e_perp_prime_per_volt: float) -> FitModel:
    """2 sqrt(lambda^2 + (eps + d E_perp)^2 + (d E_perp')^2) with fields linear in voltage."""

    def func(v, th):
        lam, eps, d = th
        return 2.0 * np.sqrt(lam**2 + (eps + d * e_perp_per_volt * v) ** 2 + (d * e_perp_prime_per_volt * v) ** 2)

    def jac(v, th):
        lam, eps, d = th
        ex, ey = e_perp_per_volt * v, e_perp_prime_per_volt * v
        root = np.sqrt(lam**2 + (eps + d * ex) ** 2 + (d * ey) ** 2)
        return np.column_stack([2 * lam / root, 2 * (eps + d * ex) / root,
                                2 * ((eps + d * ex) * ex + d * ey * ey) / root])

    def guess(v, y):
        return [4.80e9, max(math.sqrt(max((np.min(y) / 2) ** 2 - 4.80e9**2, 0.0)), 1e8), 1e3]

    return FitModel("splitting_hyperbola", ("lambda_so", "eps_perp", "d_perp"),
                    ("Hz", "Hz", "Hz/(V/m)"), func, jac, None, guess, "V", "Hz")


T1_RECOVERY = FitModel("t1_recovery", ("a", "b", "T1"), ("1", "1", "s"), _t1, _t1_jac, None, _t1_guess, "s", "1")
DAMPED_SINE = FitModel("damped_sine", ("A", "omega", "phi", "T2star", "B"), ("1", "rad/s", "rad", "s", "1"),
                       _damped_sine, None, None, _damped_sine_guess, "s", "1")
GAUSSIAN_LINE = FitModel("gaussian_line", ("amplitude", "center", "fwhm", "offset"), ("1", "Hz", "Hz", "1"),
                         _gauss, _gauss_jac, None, _gauss_guess, "Hz", "1")
DOUBLE_GAUSSIAN = FitModel("double_gaussian_line", ("amp1", "center1", "amp2", "center2", "fwhm", "offset"),
                           ("1", "Hz", "1", "Hz", "Hz", "1"), _double_gauss, None, None, None, "Hz", "1")
LINEAR_ORIGIN = FitModel("linear_origin", ("slope",), ("y/x",), _linear, _linear_jac, None, _linear_guess)


def model_library(geom=None, electrode: str = "dc", strain_axis_angle: float = 0.0) -> dict:
    """Named fit models; the splitting hyperbola uses the electrode's per-volt NV-frame field."""
    from .fields import ElectrodeGeometry, electrode_field, lab_to_nv

    geom = geom or ElectrodeGeometry()
    e = lab_to_nv(electrode_field(geom, electrode, 1.0), geom)
    c, s = math.cos(strain_axis_angle), math.sin(strain_axis_angle)
    hyper = splitting_hyperbola(c * e.E_x + s * e.E_y, -s * e.E_x + c * e.E_y)
    return {
        "t1_recovery": T1_RECOVERY,
        "damped_sine": DAMPED_SINE,
        "gaussian_line": GAUSSIAN_LINE,
        "splitting_hyperbola": hyper,
        "linear_origin": LINEAR_ORIGIN,
        "double_gaussian_line": DOUBLE_GAUSSIAN,
    }


# --------------------------------------------------------------- bootstrap

@dataclass
class BootstrapReport:
    model: str
    param_names: tuple
    estimate: np.ndarray
    intervals: dict
    level: float
    n_resamples: int
    n_failed: int
    seed: int

    def to_json(self) -> str:
        payload = {
            "model": self.model,
            "estimate": {n: float(v) for n, v in zip(self.param_names, self.estimate)},
            "intervals": {n: [float(a), float(b)] for n, (a, b) in self.intervals.items()},
            "level": self.level,
            "n_resamples": self.n_resamples,
            "n_failed": self.n_failed,
            "seed": self.seed,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def bootstrap(model: FitModel, data, n_resamples: int, seed: int, theta0=None,
              level: float = 0.95, workers: int = 1) -> BootstrapReport:
    """Residual-resampling bootstrap with percentile intervals.

    Each resample draws from its own child of ``SeedSequence(seed)`` so the
    report does not depend on ``workers``.
    """
    if n_resamples < 100:
        raise ValueError(f"n_resamples must be >= 100, got {n_resamples}")
    x, y = _xy(data)
    base = fit(model, (x, y), theta0)
    fitted = model(x, base.theta)
    resid = y - fitted
    children = np.random.SeedSequence(seed).spawn(n_resamples)

    def one(child):
        rng = np.random.default_rng(child)
        y_star = fitted + rng.choice(resid, size=resid.size, replace=True)
        res = fit(model, (x, y_star), base.theta)
        return res.theta if res.converged else None

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            draws = list(pool.map(one, children))
    else:
        draws = [one(c) for c in children]
    good = np.array([d for d in draws if d is not None])
    n_failed = n_resamples - len(good)
    if n_failed > 0.2 * n_resamples:
        raise BootstrapError(f"{n_failed} of {n_resamples} bootstrap refits failed to converge")
    lo, hi = 50 * (1 - level), 50 * (1 + level)
    fixed = model.fixed or (False,) * model.n_params
    intervals = {}
    for i, name in enumerate(model.param_names):
        if fixed[i]:
            continue
        a, b = np.percentile(good[:, i], [lo, hi])
        intervals[name] = (float(a), float(b))
    return BootstrapReport(model.name, tuple(model.param_names), base.theta, intervals, level,
                           n_resamples, n_failed, int(seed))
