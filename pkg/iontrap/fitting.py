"""
Least-squares fits of profiles, resonance scans and noise sweeps
"""

from __future__ import annotations

from dataclasses import dataclass, field
from logging import getLogger
from typing import Any, Callable, NamedTuple, Sequence

import numpy as np
from scipy.optimize import bisect, least_squares
from scipy.signal import find_peaks

from .errors import (ConfigError, ConvergenceError, DegenerateDataError, InsufficientDataError,
                     NotBracketedError, OutOfRangeError)
from .helper import _fwhm, _jsonable
from .imaging import AxialProfile, ProfileParams, bin_counts, profile_driven_closed, profile_thermal
from .physics import resonance_amplitude, two_ion_eigenfrequencies

_log = getLogger(__name__)

MAX_ITERATIONS = 500
FTOL = 1e-10
XTOL = 1e-12
GTOL = 1e-10
# residual substituted for non-finite model values
_NOT_FINITE = 1e100

# Fractions of the profile FWHM assigned to the oscillation amplitude when guessing.
_SPLITS = (0.05, 0.2, 0.35, 0.5, 0.65, 0.8, 0.95)
# Half-separations of the symmetric two-ion guesses, in units of the profile FWHM.
_LOBE_OFFSETS = (0.0, 0.025, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4)


@dataclass
class FitResult:
    """
    :param model:           Name of the fitted model.
    :param params:          Best-fit values by name.
    :param uncertainties:   1 sigma per parameter (0 for fixed ones).
    :param chi2_per_dof:    Weighted chi^2 per degree of freedom.
    :param converged:       Whether the convergence criteria were met.
    :param n_iterations:    Model evaluations spent by the optimizer.
    :param residuals:       data - model, same length as the data.
    :param covariance:      Covariance of the free parameters, in the order of `free`.
    :param free:            Names of the fitted (not fixed) parameters.
    :param derived:         Derived quantities with their 1 sigma, e.g. {'separation': (v, err)}.
    :param history:         Objective at every improving evaluation, starting with the initial guess.
    :param config:          Echo of the inputs for provenance.
    """
    model: str
    params: dict[str, float]
    uncertainties: dict[str, float]
    chi2_per_dof: float
    converged: bool
    n_iterations: int
    residuals: np.ndarray
    covariance: np.ndarray
    free: list[str]
    derived: dict[str, tuple[float, float]] = field(default_factory=dict)
    history: list[float] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, name: str) -> float:
        return self.params[name]

    def error(self, name: str) -> float:
        return self.uncertainties[name]

    def to_dict(self) -> dict[str, Any]:
        return _jsonable({
            'model': self.model,
            'params': self.params,
            'uncertainties': self.uncertainties,
            'chi2_per_dof': self.chi2_per_dof,
            'converged': self.converged,
            'n_iterations': self.n_iterations,
            'residuals': self.residuals,
            'covariance': self.covariance,
            'free': self.free,
            'derived': {k: list(v) for k, v in self.derived.items()},
            'history': self.history,
            'config': self.config,
        })


@dataclass(frozen=True)
class ResonanceScan:
    """
    :param frequencies:     Drive angular frequencies (rad/s), strictly increasing.
    :param rho_max:         Steady-state amplitudes (m).
    :param uncertainties:   1 sigma of rho_max; None for unweighted fits scaled by the residual spread.
    """
    frequencies: np.ndarray
    rho_max: np.ndarray
    uncertainties: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.frequencies, dtype=float)
        rho = np.asarray(self.rho_max, dtype=float)
        if w.ndim != 1 or w.shape != rho.shape:
            raise ConfigError('ResonanceScan: frequencies and rho_max must be 1-D of equal length.')
        if not np.all(np.diff(w) > 0):
            raise ConfigError('ResonanceScan: frequencies must be strictly increasing.')
        object.__setattr__(self, 'frequencies', w)
        object.__setattr__(self, 'rho_max', rho)
        if self.uncertainties is not None:
            err = np.asarray(self.uncertainties, dtype=float)
            if err.shape != rho.shape or np.any(err <= 0):
                raise ConfigError('ResonanceScan: uncertainties must match rho_max and be positive.')
            object.__setattr__(self, 'uncertainties', err)


@dataclass(frozen=True)
class NoiseSweep:
    """
    :param v2:              Squared noise amplitudes (V^2).
    :param sigma2:          Position variances (m^2).
    :param uncertainties:   1 sigma of sigma2; None for unweighted fits.
    """
    v2: np.ndarray
    sigma2: np.ndarray
    uncertainties: np.ndarray | None = None

    def __post_init__(self):
        v2 = np.asarray(self.v2, dtype=float)
        s2 = np.asarray(self.sigma2, dtype=float)
        if v2.ndim != 1 or v2.shape != s2.shape:
            raise ConfigError('NoiseSweep: v2 and sigma2 must be 1-D of equal length.')
        if np.any(v2 < 0):
            raise ConfigError('NoiseSweep: v2 must be >= 0.')
        object.__setattr__(self, 'v2', v2)
        object.__setattr__(self, 'sigma2', s2)
        if self.uncertainties is not None:
            err = np.asarray(self.uncertainties, dtype=float)
            if err.shape != s2.shape or np.any(err <= 0):
                raise ConfigError('NoiseSweep: uncertainties must match sigma2 and be positive.')
            object.__setattr__(self, 'uncertainties', err)


@dataclass(frozen=True)
class PlateauResult:
    """
    :param found:               A three-segment model with a flatter middle segment is preferred,
                                or the data are constant.
    :param degenerate:          The data are constant; the plateau spans the whole sweep.
    :param breakpoints:         (start, end) of the plateau in V^2, empty when not found.
    :param breakpoint_errors:   1 sigma of the breakpoints.
    :param slopes:              Slopes of the segments (one entry for a single line).
    :param bic_line:            Bayesian information criterion of a single line.
    :param bic_segmented:       Same for the three-segment model.
    :param message:             Human-readable verdict.
    """
    found: bool
    degenerate: bool
    breakpoints: tuple[float, ...]
    breakpoint_errors: tuple[float, ...]
    slopes: tuple[float, ...]
    bic_line: float
    bic_segmented: float
    message: str


class MassRatio(NamedTuple):
    mu: float
    mu_err: float


class _Solution(NamedTuple):
    x: np.ndarray
    cov: np.ndarray
    chi2: float
    n_iter: int
    converged: bool
    history: list[float]


def _least_squares(residuals: Callable[[np.ndarray], np.ndarray], x0: np.ndarray, scale: np.ndarray) -> _Solution:
    """
    Minimizes sum(residuals(x)^2) with MINPACK Levenberg-Marquardt on the scaled parameters x / scale.
    The objective is recorded whenever an evaluation improves on the best so far.
    """
    scale = np.where(scale != 0, np.abs(scale), 1.0)
    p0 = np.asarray(x0, dtype=float) / scale
    if not np.all(np.isfinite(residuals(p0 * scale))):
        raise DegenerateDataError('fit: the model is not finite at the initial guess.')
    history: list[float] = []

    def func(p: np.ndarray) -> np.ndarray:
        r = np.nan_to_num(residuals(p * scale), nan=_NOT_FINITE, posinf=_NOT_FINITE, neginf=-_NOT_FINITE)
        chi2 = float(r @ r)
        if not history or chi2 < history[-1]:
            history.append(chi2)
        return r

    res = least_squares(func, p0, method='lm', x_scale='jac', ftol=FTOL, xtol=XTOL, gtol=GTOL,
                        max_nfev=MAX_ITERATIONS * (p0.size + 1))
    chi2 = float(res.fun @ res.fun)
    _log.debug('fit: %s after %d evaluations, chi2 %.10g', res.message, res.nfev, chi2)
    cov_p = np.linalg.pinv(res.jac.T @ res.jac)
    return _Solution(res.x * scale, cov_p * np.outer(scale, scale), chi2, int(res.nfev), bool(res.success), history)


def _run_fit(model: str,
             names: Sequence[str],
             predict: Callable[[dict[str, float]], np.ndarray],
             data: np.ndarray,
             sigma: np.ndarray | None,
             guess: dict[str, float],
             scale: dict[str, float],
             fixed: dict[str, float] | None,
             positive: Sequence[str] = (),
             config: dict[str, Any] | None = None) -> FitResult:
    fixed = dict(fixed or {})
    unknown = set(fixed) - set(names)
    if unknown:
        raise ConfigError(f'{model}: cannot fix unknown parameters {sorted(unknown)}.')
    free = [n for n in names if n not in fixed]
    dof = data.size - len(free)
    if dof < 1:
        raise InsufficientDataError(f'{model}: {data.size} points cannot constrain {len(free)} parameters.')
    weight = 1 / sigma if sigma is not None else np.ones_like(data)

    def unpack(x: np.ndarray) -> dict[str, float]:
        values = dict(fixed)
        values.update(zip(free, x))
        for n in positive:
            values[n] = abs(values[n])
        return values

    def residuals(x: np.ndarray) -> np.ndarray:
        return (predict(unpack(x)) - data) * weight

    x0 = np.array([guess[n] for n in free], dtype=float)
    sol = _least_squares(residuals, x0, np.array([scale[n] for n in free], dtype=float))
    chi2_dof = sol.chi2 / dof
    cov = sol.cov if sigma is not None else sol.cov * chi2_dof

    params = unpack(sol.x)
    errors = dict.fromkeys(names, 0.0)
    errors.update(zip(free, np.sqrt(np.clip(np.diag(cov), 0, None))))
    return FitResult(
        model=model,
        params={n: float(params[n]) for n in names},
        uncertainties={n: float(errors[n]) for n in names},
        chi2_per_dof=float(chi2_dof),
        converged=sol.converged,
        n_iterations=sol.n_iter,
        residuals=data - predict(params),
        covariance=cov,
        free=free,
        history=sol.history,
        config=config or {},
    )


def _settle(fit: FitResult, strict: bool) -> FitResult:
    if not fit.converged:
        if strict:
            raise ConvergenceError(f'{fit.model}: no convergence after {fit.n_iterations} evaluations.')
        _log.warning('%s: returning an unconverged fit after %d evaluations.', fit.model, fit.n_iterations)
    return fit


def _cov(fit: FitResult, a: str, b: str) -> float:
    if a not in fit.free or b not in fit.free:
        return 0.0
    return float(fit.covariance[fit.free.index(a), fit.free.index(b)])


def _profile_data(profile: AxialProfile, model: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    counts = profile.counts
    if np.count_nonzero(counts) < 10:
        raise InsufficientDataError(f'{model}: need at least 10 nonzero bins, got {np.count_nonzero(counts)}.')
    if np.ptp(counts) <= 1e-12 * counts.max():
        raise DegenerateDataError(f'{model}: the profile is flat.')
    err = profile.uncertainties
    floor = err[err > 0].min() if np.any(err > 0) else 1.0
    return profile.bin_centers, counts, np.where(err > 0, err, floor)


def _linear_scale(shape: np.ndarray, data: np.ndarray, sigma: np.ndarray) -> tuple[float, float]:
    """Least-squares amplitude of a fixed shape, and the resulting chi^2."""
    w = 1 / sigma**2
    denom = float(np.sum(w * shape * shape))
    amp = float(np.sum(w * shape * data)) / denom if denom > 0 else 0.0
    return amp, float(np.sum(w * (data - amp * shape)**2))


def _moments(z: np.ndarray, counts: np.ndarray) -> tuple[float, float, float]:
    total = counts.sum()
    center = float(np.sum(z * counts) / total)
    rms = float(np.sqrt(np.sum((z - center)**2 * counts) / total))
    width = _fwhm(z, counts)
    return center, rms, max(width, 2 * (z[1] - z[0]))


def _single_counts(z: np.ndarray, p: dict[str, float]) -> np.ndarray:
    params = ProfileParams(gamma=p['gamma'], z0=p['z0'], rho_max=p['rho'], a0=p['a0'])
    return bin_counts(lambda x: profile_driven_closed(params, x), z)


def _two_ion_counts(z: np.ndarray, p: dict[str, float]) -> np.ndarray:
    ion1 = ProfileParams(gamma=p['gamma'], z0=p['z1'], rho_max=p['rho'], a0=p['a0'])
    ion2 = ProfileParams(gamma=p['gamma'], z0=p['z2'], rho_max=p['rho'], a0=p['a0'])
    return bin_counts(lambda x: profile_driven_closed(ion1, x) + profile_driven_closed(ion2, x), z)


def _thermal_counts(z: np.ndarray, p: dict[str, float]) -> np.ndarray:
    return bin_counts(lambda x: profile_thermal(p['sigma'], p['gamma'], p['z0'], p['a0'], x), z)


def _best_split(z, counts, sigma, build, widths, fixed) -> dict[str, float]:
    """
    Tries splits of a lobe width between oscillation amplitude and PSF width
    and returns the candidate with the lowest chi^2 after solving a0 linearly.
    """
    best, best_chi2 = None, np.inf
    for width in widths:
        for frac in _SPLITS:
            cand = build(width, frac)
            cand.update({k: v for k, v in fixed.items() if k != 'a0'})
            shape = cand.pop('_shape')(z, {**cand, 'a0': 1.0})
            amp, chi2 = _linear_scale(shape, counts, sigma)
            if amp > 0 and chi2 < best_chi2:
                best, best_chi2 = {**cand, 'a0': amp}, chi2
    if best is None:
        raise DegenerateDataError('fit: no initial guess reproduces the profile.')
    return best


def fit_profile_single(profile: AxialProfile,
                       initial: dict[str, float] | None = None,
                       fixed: dict[str, float] | None = None,
                       strict: bool = True) -> FitResult:
    """
    Fits the driven single-ion profile, parameters gamma, z0, rho and a0.

    :param profile:     Axial counts.
    :param initial:     Overrides of the automatic initial guess.
    :param fixed:       Parameters held constant, e.g. {'rho': 0} for a pure Lorentzian.
    :param strict:      Raise ConvergenceError instead of returning an unconverged fit.
    """
    model = 'fit_profile_single'
    z, counts, sigma = _profile_data(profile, model)
    fixed = dict(fixed or {})
    center, rms, width = _moments(z, counts)

    def build(w: float, frac: float) -> dict[str, Any]:
        return {'gamma': (1 - frac) * w, 'z0': center, 'rho': frac * w / 2, '_shape': _single_counts}

    guess = _best_split(z, counts, sigma, build, (width,), fixed)
    guess.update(initial or {})
    scale = {'gamma': width, 'z0': width, 'rho': width, 'a0': guess['a0']}
    fit = _run_fit(model, ('gamma', 'z0', 'rho', 'a0'), lambda p: _single_counts(z, p), counts, sigma, guess,
                   scale, fixed, positive=('gamma', 'rho', 'a0'),
                   config={'n_bins': z.size, 'bin_width': profile.bin_width, 'fixed': fixed, 'initial': guess})
    return _settle(fit, strict)


def _lobe_guess(z: np.ndarray, counts: np.ndarray, center: float, width: float) -> list[tuple[float, float]]:
    """Candidate (z1, z2) pairs: the two strongest peaks, plus symmetric splits down to coincident ions."""
    pairs = [(center - f * width, center + f * width) for f in _LOBE_OFFSETS]
    peaks, props = find_peaks(counts, prominence=0.05 * counts.max())
    if peaks.size >= 2:
        two = np.sort(peaks[np.argsort(props['prominences'])[-2:]])
        pairs.insert(0, (float(z[two[0]]), float(z[two[1]])))
    return pairs


def fit_profile_two_ion(profile: AxialProfile,
                        initial: dict[str, float] | None = None,
                        fixed: dict[str, float] | None = None,
                        strict: bool = True) -> FitResult:
    """
    Fits the sum of two driven profiles with shared gamma, rho and a0 and free centers z1 < z2.

    Every lobe guess is refined to completion and the fit with the lowest chi^2 is kept.

    Derived: separation z2 - z1, its half z0 and the crystal center.
    """
    model = 'fit_profile_two_ion'
    names = ('gamma', 'z1', 'z2', 'rho', 'a0')
    z, counts, sigma = _profile_data(profile, model)
    fixed = dict(fixed or {})
    center, rms, width = _moments(z, counts)

    starts = []
    for z1, z2 in _lobe_guess(z, counts, center, width):
        lobe = max(width - (z2 - z1), 2 * (z[1] - z[0]))

        def build(w: float, frac: float) -> dict[str, Any]:
            return {'gamma': (1 - frac) * w, 'z1': z1, 'z2': z2, 'rho': frac * w / 2, '_shape': _two_ion_counts}

        cand = _best_split(z, counts, sigma, build, (lobe, 0.5 * width, width), fixed)
        _, chi2 = _linear_scale(_two_ion_counts(z, {**cand, 'a0': 1.0}), counts, sigma)
        starts.append((chi2, cand))
    starts.sort(key=lambda s: s[0])
    if initial:
        starts = [(0.0, {**starts[0][1], **initial})]

    fit = None
    for _, guess in starts:
        scale = {'gamma': width, 'z1': width, 'z2': width, 'rho': width, 'a0': guess['a0']}
        try:
            trial = _run_fit(model, names, lambda p: _two_ion_counts(z, p), counts, sigma, guess, scale, fixed,
                             positive=('gamma', 'rho', 'a0'),
                             config={'n_bins': z.size, 'bin_width': profile.bin_width, 'fixed': fixed,
                                     'initial': guess, 'n_starts': len(starts)})
        except DegenerateDataError:
            continue
        _log.debug('%s: start z1=%.4g z2=%.4g ends at chi2/dof %.6g', model, guess['z1'], guess['z2'],
                   trial.chi2_per_dof)
        if fit is None or trial.chi2_per_dof < fit.chi2_per_dof:
            fit = trial
    if fit is None:
        raise DegenerateDataError(f'{model}: no lobe guess gives a finite model.')
    _settle(fit, strict)

    if fit.params['z1'] > fit.params['z2']:
        _swap(fit, 'z1', 'z2')
    var_sep = fit.error('z1')**2 + fit.error('z2')**2 - 2 * _cov(fit, 'z1', 'z2')
    var_mid = (fit.error('z1')**2 + fit.error('z2')**2 + 2 * _cov(fit, 'z1', 'z2')) / 4
    sep = fit['z2'] - fit['z1']
    sep_err = float(np.sqrt(max(var_sep, 0.0)))
    fit.derived = {
        'separation': (sep, sep_err),
        'z0': (sep / 2, sep_err / 2),
        'center': ((fit['z1'] + fit['z2']) / 2, float(np.sqrt(max(var_mid, 0.0)))),
    }
    return fit


def _swap(fit: FitResult, a: str, b: str) -> None:
    fit.params[a], fit.params[b] = fit.params[b], fit.params[a]
    fit.uncertainties[a], fit.uncertainties[b] = fit.uncertainties[b], fit.uncertainties[a]
    if a in fit.free and b in fit.free:
        i, j = fit.free.index(a), fit.free.index(b)
        order = list(range(len(fit.free)))
        order[i], order[j] = j, i
        fit.covariance = fit.covariance[np.ix_(order, order)]


def fit_profile_thermal(profile: AxialProfile,
                        initial: dict[str, float] | None = None,
                        fixed: dict[str, float] | None = None,
                        strict: bool = True) -> FitResult:
    """
    Fits the Gaussian-Lorentzian profile of a thermal ion, parameters sigma, gamma, z0 and a0.
    """
    model = 'fit_profile_thermal'
    z, counts, sigma = _profile_data(profile, model)
    fixed = dict(fixed or {})
    center, rms, width = _moments(z, counts)

    def build(w: float, frac: float) -> dict[str, Any]:
        # FWHM of a Gaussian is 2.3548 sigma
        return {'sigma': frac * w / 2.3548, 'gamma': (1 - frac) * w, 'z0': center, '_shape': _thermal_counts}

    guess = _best_split(z, counts, sigma, build, (width,), fixed)
    guess.update(initial or {})
    scale = {'sigma': width, 'gamma': width, 'z0': width, 'a0': guess['a0']}
    fit = _run_fit(model, ('sigma', 'gamma', 'z0', 'a0'), lambda p: _thermal_counts(z, p), counts, sigma, guess,
                   scale, fixed, positive=('sigma', 'gamma', 'a0'),
                   config={'n_bins': z.size, 'bin_width': profile.bin_width, 'fixed': fixed, 'initial': guess})
    return _settle(fit, strict)


def _resonance_guess(scan: ResonanceScan, mass: float, model: str) -> dict[str, float]:
    w, rho = scan.frequencies, scan.rho_max
    if w.size < 5:
        raise InsufficientDataError(f'{model}: need at least 5 frequencies, got {w.size}.')
    top = int(np.argmax(rho))
    if rho[top] <= 0 or top in (0, w.size - 1) or rho[top] < 2 * max(rho[0], rho[-1]):
        raise NotBracketedError(f'{model}: the scan does not bracket a resonance '
                                f'(maximum at {w[top] / (2 * np.pi):.6g} Hz).')
    omega_z = float(w[top])
    # amplitude FWHM of the resonance is 2 sqrt(3) gamma
    gamma = max(_fwhm(w, rho) / (2 * np.sqrt(3)), np.min(np.diff(w)) / 10)
    return {'f_e': float(rho[top]) * mass * 2 * gamma * omega_z, 'omega_z': omega_z, 'gamma_z': gamma}


def fit_resonance(scan: ResonanceScan,
                  mass: float,
                  initial: dict[str, float] | None = None,
                  fixed: dict[str, float] | None = None,
                  strict: bool = True) -> FitResult:
    """
    Fits the driven-oscillator response rho(w) = (F_e/m) / sqrt((2 gamma w)^2 + (w_z^2 - w^2)^2),
    parameters f_e (N), omega_z (rad/s) and gamma_z (1/s).

    Derived: the amplitude maximum sqrt(w_z^2 - 2 gamma^2) and f_z = w_z / 2 pi.
    """
    model = 'fit_resonance'
    if not mass > 0:
        raise ConfigError(f'{model}: mass must be positive.')
    guess = _resonance_guess(scan, mass, model)
    guess.update(initial or {})
    fixed = dict(fixed or {})

    def predict(p: dict[str, float]) -> np.ndarray:
        return resonance_amplitude(scan.frequencies, p['omega_z'], p['gamma_z'], p['f_e'], mass)

    scale = {'f_e': guess['f_e'], 'omega_z': guess['omega_z'], 'gamma_z': guess['gamma_z']}
    fit = _run_fit(model, ('f_e', 'omega_z', 'gamma_z'), predict, scan.rho_max, scan.uncertainties, guess, scale,
                   fixed, positive=('f_e', 'omega_z', 'gamma_z'),
                   config={'mass': mass, 'n_points': scan.frequencies.size, 'fixed': fixed, 'initial': guess})
    _resonance_derived(fit, 'omega_z', 'gamma_z', '')
    return _settle(fit, strict)


def _resonance_derived(fit: FitResult, w_name: str, g_name: str, suffix: str) -> None:
    w, g = fit[w_name], fit[g_name]
    peak = resonance_peak(fit, w_name, g_name)
    dw = w / peak if peak > 0 else 0.0
    dg = -2 * g / peak if peak > 0 else 0.0
    var = (dw * fit.error(w_name))**2 + (dg * fit.error(g_name))**2 + 2 * dw * dg * _cov(fit, w_name, g_name)
    fit.derived[f'omega_peak{suffix}'] = (peak, float(np.sqrt(max(var, 0.0))))
    fit.derived[f'f_z{suffix}'] = (w / (2 * np.pi), fit.error(w_name) / (2 * np.pi))


def resonance_peak(fit: FitResult, w_name: str = 'omega_z', g_name: str = 'gamma_z') -> float:
    """
    Drive frequency of maximum amplitude, sqrt(w_z^2 - 2 gamma^2), 0 when overdamped.
    """
    radicand = fit[w_name]**2 - 2 * fit[g_name]**2
    return float(np.sqrt(radicand)) if radicand > 0 else 0.0


def fit_resonance_joint(scans: Sequence[ResonanceScan],
                        mass: float,
                        strict: bool = True) -> FitResult:
    """
    Fits several scans with one shared force f_e and per-scan omega_z_i, gamma_z_i.
    """
    model = 'fit_resonance_joint'
    if len(scans) < 2:
        raise ConfigError(f'{model}: need at least 2 scans, got {len(scans)}.')
    if not mass > 0:
        raise ConfigError(f'{model}: mass must be positive.')
    weighted = [s.uncertainties is not None for s in scans]
    if any(weighted) and not all(weighted):
        raise ConfigError(f'{model}: either all or none of the scans must carry uncertainties.')

    guesses = [_resonance_guess(s, mass, model) for s in scans]
    names = ['f_e']
    guess = {'f_e': float(np.mean([g['f_e'] for g in guesses]))}
    scale = {'f_e': guess['f_e']}
    for i, g in enumerate(guesses):
        names += [f'omega_z_{i}', f'gamma_z_{i}']
        guess.update({f'omega_z_{i}': g['omega_z'], f'gamma_z_{i}': g['gamma_z']})
        scale.update({f'omega_z_{i}': g['omega_z'], f'gamma_z_{i}': g['gamma_z']})

    def predict(p: dict[str, float]) -> np.ndarray:
        return np.concatenate([resonance_amplitude(s.frequencies, p[f'omega_z_{i}'], p[f'gamma_z_{i}'], p['f_e'], mass)
                               for i, s in enumerate(scans)])

    data = np.concatenate([s.rho_max for s in scans])
    sigma = np.concatenate([s.uncertainties for s in scans]) if all(weighted) else None
    fit = _run_fit(model, names, predict, data, sigma, guess, scale, None, positive=names,
                   config={'mass': mass, 'n_scans': len(scans), 'initial': guess})
    for i in range(len(scans)):
        _resonance_derived(fit, f'omega_z_{i}', f'gamma_z_{i}', f'_{i}')
    return _settle(fit, strict)


def fit_noise_line(sweep: NoiseSweep, window: tuple[float, float] | None = None) -> FitResult:
    """
    Weighted straight line sigma2 = c0 + c1 * v2 over the points with v2 inside window.

    Derived: r_squared of the line.
    """
    model = 'fit_noise_line'
    lo, hi = window if window is not None else (-np.inf, np.inf)
    keep = (sweep.v2 >= lo) & (sweep.v2 <= hi)
    n = int(keep.sum())
    if n < 4:
        raise InsufficientDataError(f'{model}: need at least 4 points in the window, got {n}.')
    x, y = sweep.v2[keep], sweep.sigma2[keep]
    sigma = sweep.uncertainties[keep] if sweep.uncertainties is not None else np.ones(n)
    if np.ptp(x) == 0:
        raise DegenerateDataError(f'{model}: all points share v2 = {x[0]:g}.')

    design = np.column_stack([np.ones(n), x]) / sigma[:, None]
    coef, *_ = np.linalg.lstsq(design, y / sigma, rcond=None)
    resid = y - (coef[0] + coef[1] * x)
    chi2_dof = float(np.sum((resid / sigma)**2) / (n - 2))
    cov = np.linalg.inv(design.T @ design)
    if sweep.uncertainties is None:
        cov = cov * chi2_dof
    ss_tot = float(np.sum((y - y.mean())**2))
    r2 = 1 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0

    err = np.sqrt(np.diag(cov))
    return FitResult(
        model=model,
        params={'c0': float(coef[0]), 'c1': float(coef[1])},
        uncertainties={'c0': float(err[0]), 'c1': float(err[1])},
        chi2_per_dof=chi2_dof,
        converged=True,
        n_iterations=1,
        residuals=resid,
        covariance=cov,
        free=['c0', 'c1'],
        derived={'r_squared': (r2, 0.0)},
        config={'window': [float(lo), float(hi)], 'n_points': n},
    )


def slope_ratio(fit_a: FitResult, fit_b: FitResult) -> tuple[float, float]:
    """
    Ratio of the slopes of two noise lines, fit_a over fit_b, with its 1 sigma.
    """
    a, b = fit_a['c1'], fit_b['c1']
    if b == 0:
        raise DegenerateDataError('slope_ratio: the reference slope is zero.')
    ratio = a / b
    err = abs(ratio) * np.hypot(fit_a.error('c1') / a if a else 0.0, fit_b.error('c1') / b)
    return float(ratio), float(err)


def zeta_from_slope(slope: float, mass: float, omega_z: float, gamma_z: float) -> float:
    """
    Heating coefficient zeta (J s^-1 V^-2) from the slope d(sigma^2)/d(V^2) of a noise line,
    using k_B T = m omega_z^2 sigma^2 and T = zeta V^2 / (gamma_z k_B).
    """
    return slope * gamma_z * mass * omega_z**2


def _bic(sse: float, n: int, k: int, floor: float) -> float:
    return n * np.log(max(sse, floor) / n) + k * np.log(n)


def _hinge_design(x: np.ndarray, b1: float, b2: float) -> np.ndarray:
    return np.column_stack([np.ones_like(x), x, np.clip(x - b1, 0, None), np.clip(x - b2, 0, None)])


def detect_plateau(sweep: NoiseSweep, min_segment: int = 3) -> PlateauResult:
    """
    Splits a noise sweep into a linear rise, a plateau and a second rise.

    A continuous three-segment line is fitted for every pair of breakpoints on the data grid, the
    best pair is refined by least squares, and the model is kept when its Bayesian information
    criterion beats a single line and its middle segment is flatter than the first.

    :param sweep:           At least 12 points.
    :param min_segment:     Minimum points per segment.
    """
    model = 'detect_plateau'
    order = np.argsort(sweep.v2, kind='stable')
    x, y = sweep.v2[order], sweep.sigma2[order]
    n = x.size
    if n < 12:
        raise InsufficientDataError(f'{model}: need at least 12 points, got {n}.')
    w = 1 / sweep.uncertainties[order] if sweep.uncertainties is not None else np.ones(n)

    span = float(np.max(np.abs(y)))
    floor = n * (1e-12 * span * float(np.max(w)))**2 + 1e-300
    if np.ptp(y) <= 1e-12 * span:
        return PlateauResult(True, True, (float(x[0]), float(x[-1])), (0.0, 0.0), (0.0,), 0.0, 0.0,
                             'constant data, plateau everywhere')

    line = np.column_stack([np.ones(n), x]) * w[:, None]
    coef1, *_ = np.linalg.lstsq(line, y * w, rcond=None)
    sse1 = float(np.sum((line @ coef1 - y * w)**2))
    bic1 = _bic(sse1, n, 2, floor)

    best = (np.inf, 0, 0, None)
    for i in range(min_segment - 1, n - 2 * min_segment + 1):
        for j in range(i + min_segment, n - min_segment + 1):
            design = _hinge_design(x, x[i], x[j]) * w[:, None]
            coef, *_ = np.linalg.lstsq(design, y * w, rcond=None)
            sse = float(np.sum((design @ coef - y * w)**2))
            if sse < best[0]:
                best = (sse, i, j, coef)
    sse3, i, j, coef = best

    def residuals(p: np.ndarray) -> np.ndarray:
        return (_hinge_design(x, p[4], p[5]) @ p[:4] - y) * w

    p0 = np.append(coef, [x[i], x[j]])
    scale = np.array([span] + [span / np.ptp(x)] * 3 + [np.ptp(x)] * 2)
    errors = (0.0, 0.0)
    try:
        sol = _least_squares(residuals, p0, scale)
        if sol.chi2 <= sse3 and x[0] < sol.x[4] < sol.x[5] < x[-1]:
            p0, sse3 = sol.x, sol.chi2
            errors = tuple(float(np.sqrt(max(sol.cov[k, k], 0.0))) for k in (4, 5))
    except (np.linalg.LinAlgError, DegenerateDataError):
        _log.debug('%s: breakpoint refinement failed, keeping the grid optimum.', model)
    if errors == (0.0, 0.0):
        errors = (float(np.diff(x).mean()) / 2,) * 2

    bic3 = _bic(sse3, n, 6, floor)
    slopes = (float(p0[1]), float(p0[1] + p0[2]), float(p0[1] + p0[2] + p0[3]))
    if bic3 < bic1 - 2 and abs(slopes[1]) < 0.5 * abs(slopes[0]):
        return PlateauResult(True, False, (float(p0[4]), float(p0[5])), errors, slopes, float(bic1), float(bic3),
                             'plateau found')
    return PlateauResult(False, False, (), (), (float(coef1[1]),), float(bic1), float(bic3),
                         'no plateau, a single line describes the sweep')


def invert_mass_ratio(omega: float,
                      omega_ref: float,
                      branch: str = 'minus',
                      omega_err: float = 0.0,
                      omega_ref_err: float = 0.0) -> MassRatio:
    """
    Mass ratio mu of a two-ion crystal from one of its axial eigenfrequencies.

    :param omega:           Measured eigenfrequency (rad/s).
    :param omega_ref:       COM frequency of the equal-mass crystal (rad/s).
    :param branch:          'minus' (in-phase, below sqrt(1.5) omega_ref) or 'plus' (above sqrt(2) omega_ref).
    :param omega_err:       1 sigma of omega.
    :param omega_ref_err:   1 sigma of omega_ref.
    """
    if branch not in ('minus', 'plus'):
        raise ConfigError(f"invert_mass_ratio: branch must be 'minus' or 'plus', got '{branch}'.")
    if not omega > 0 or not omega_ref > 0:
        raise OutOfRangeError('invert_mass_ratio: frequencies must be positive.')
    k = 0 if branch == 'minus' else 1
    ratio = omega / omega_ref

    def branch_ratio(log_mu: float) -> float:
        return two_ion_eigenfrequencies(np.exp(log_mu), 1.0)[k]

    lo, hi = -50.0, 50.0
    f_lo, f_hi = branch_ratio(lo) - ratio, branch_ratio(hi) - ratio
    if f_lo * f_hi > 0:
        bounds = ('0', 'sqrt(1.5)') if k == 0 else ('sqrt(2)', 'inf')
        raise OutOfRangeError(f'invert_mass_ratio: omega/omega_ref = {ratio:.8g} is outside the {branch} branch '
                              f'range ({bounds[0]}, {bounds[1]}).')
    if f_lo == 0 or f_hi == 0:
        log_mu = lo if f_lo == 0 else hi
    else:
        log_mu = bisect(lambda u: branch_ratio(u) - ratio, lo, hi, xtol=1e-15, rtol=8.9e-16, maxiter=500)
    mu = float(np.exp(log_mu))

    h = 1e-6
    slope = (branch_ratio(log_mu + h) - branch_ratio(log_mu - h)) / (2 * h)
    rel = np.hypot(omega_err / omega, omega_ref_err / omega_ref)
    mu_err = float(mu * abs(ratio * rel / slope)) if slope != 0 else float('inf')
    return MassRatio(mu, mu_err)
