"""
Fits of profiles, resonance scans and noise sweeps.

 Group 1 - Profile fits
   Noiseless recovery for every model, fixed parameters, two-ion separation,
   merged lobes, Poisson coverage, degenerate input
 Group 2 - Resonance fits
   Noiseless recovery, joint fit, peak position, unbracketed scans,
   coverage and damping resolution under noise
 Group 3 - Noise sweeps
   Straight line, slope ratio, zeta, plateau detection
 Group 4 - Mass ratio inversion
"""

from __future__ import annotations

import json

import numpy as np
import pytest

from iontrap import (AxialProfile, ConfigError, ConvergenceError, DegenerateDataError, InsufficientDataError,
                     IonSpecies, NoiseSweep, NotBracketedError, OutOfRangeError, ProfileParams, ResonanceScan,
                     bin_counts, detect_plateau, fit_noise_line, fit_profile_single, fit_profile_thermal,
                     fit_profile_two_ion, fit_resonance, fit_resonance_joint, invert_mass_ratio, profile_driven_closed,
                     profile_thermal, resonance_amplitude, resonance_peak, slope_ratio, two_ion_eigenfrequencies,
                     two_ion_profile, zeta_from_calibration, zeta_from_slope)

UM = 1e-6
Z = (np.arange(64) - 31.5) * 2.4 * UM
CA = IonSpecies.from_label('Ca40+')

OMEGA_Z = 2 * np.pi * 79.7e3
SCAN = 2 * np.pi * np.linspace(77e3, 83e3, 25)
# 25 points over +-3 amplitude linewidths of the 309 /s line
LINE = 2 * np.pi * np.linspace(79.2e3, 80.2e3, 25)
FORCE = 1e-22


def _single(gamma: float, z0: float, rho: float, total: float) -> np.ndarray:
    params = ProfileParams(gamma=gamma, z0=z0, rho_max=rho, a0=total * gamma**2)
    return bin_counts(lambda z: profile_driven_closed(params, z), Z)


def _pair(gamma: float, z1: float, z2: float, rho: float, total: float) -> np.ndarray:
    a0 = total / 2 * gamma**2
    density = two_ion_profile(ProfileParams(gamma=gamma, z0=z1, rho_max=rho, a0=a0),
                              ProfileParams(gamma=gamma, z0=z2, rho_max=rho, a0=a0))
    return bin_counts(density, Z)


def _scan(gamma: float, omega_z: float = OMEGA_Z, frequencies: np.ndarray = SCAN) -> np.ndarray:
    return resonance_amplitude(frequencies, omega_z, gamma, FORCE, CA.mass)


# --- Group 1 ---

def test_single_noiseless():
    fit = fit_profile_single(AxialProfile(Z, _single(6 * UM, 1 * UM, 10 * UM, 1e5)))
    assert fit.converged
    assert fit['gamma'] == pytest.approx(6 * UM, rel=1e-6)
    assert fit['rho'] == pytest.approx(10 * UM, rel=1e-6)
    assert fit['z0'] == pytest.approx(1 * UM, abs=1e-11)
    assert fit['a0'] == pytest.approx(1e5 * (6 * UM)**2, rel=1e-6)
    assert fit.chi2_per_dof < 1e-8


def test_single_history_non_increasing():
    fit = fit_profile_single(AxialProfile(Z, _single(5 * UM, 0.0, 4 * UM, 1e5)))
    assert np.all(np.diff(fit.history) <= 0)
    json.dumps(fit.to_dict())


def test_lorentzian_with_fixed_amplitude():
    fit = fit_profile_single(AxialProfile(Z, _single(7 * UM, -2 * UM, 0.0, 5e4)), fixed={'rho': 0.0})
    assert fit['rho'] == 0.0
    assert fit.error('rho') == 0.0
    assert fit['gamma'] == pytest.approx(7 * UM, rel=1e-6)
    assert fit['z0'] == pytest.approx(-2 * UM, abs=1e-11)


def test_fixing_unknown_parameter():
    with pytest.raises(ConfigError):
        fit_profile_single(AxialProfile(Z, _single(6 * UM, 0.0, 5 * UM, 1e5)), fixed={'sigma': 1.0})


def test_thermal_noiseless():
    a0 = 8e4
    counts = bin_counts(lambda z: profile_thermal(3 * UM, 6 * UM, 0.5 * UM, a0, z), Z)
    fit = fit_profile_thermal(AxialProfile(Z, counts))
    assert fit['sigma'] == pytest.approx(3 * UM, rel=1e-5)
    assert fit['gamma'] == pytest.approx(6 * UM, rel=1e-5)
    assert fit['a0'] == pytest.approx(a0, rel=1e-6)


def test_two_ion_noiseless():
    fit = fit_profile_two_ion(AxialProfile(Z, _pair(6 * UM, -16 * UM, 14 * UM, 5 * UM, 1e5)))
    assert fit['z1'] == pytest.approx(-16 * UM, abs=1e-10)
    assert fit['z2'] == pytest.approx(14 * UM, abs=1e-10)
    sep, _ = fit.derived['separation']
    assert sep == pytest.approx(30 * UM, rel=1e-6)
    assert fit.derived['center'][0] == pytest.approx(-1 * UM, abs=1e-10)


def test_two_ion_poisson_separation():
    rng = np.random.default_rng(1)
    counts = rng.poisson(_pair(6 * UM, -15 * UM, 15 * UM, 5 * UM, 1e5)).astype(float)
    fit = fit_profile_two_ion(AxialProfile(Z, counts))
    sep, err = fit.derived['separation']
    assert err < 0.1 * UM
    assert abs(sep - 30 * UM) < 4 * err
    assert fit['z1'] < fit['z2']


def test_two_ion_merged_lobes():
    rng = np.random.default_rng(2)
    counts = rng.poisson(_pair(6 * UM, -5 * UM, 5 * UM, 20 * UM, 1e5)).astype(float)
    fit = fit_profile_two_ion(AxialProfile(Z, counts))
    assert fit.converged
    assert fit.chi2_per_dof < 2
    assert fit.derived['separation'][0] == pytest.approx(10 * UM, abs=2 * UM)
    assert fit['rho'] == pytest.approx(20 * UM, abs=2 * UM)


def test_two_ion_keeps_lowest_minimum():
    rng = np.random.default_rng(3)
    counts = rng.poisson(_pair(6 * UM, -4 * UM, 4 * UM, 12 * UM, 1e5)).astype(float)
    profile = AxialProfile(Z, counts)
    fit = fit_profile_two_ion(profile)
    # a start far from the merged optimum must not win
    wide = fit_profile_two_ion(profile, initial={'z1': -14 * UM, 'z2': 14 * UM}, strict=False)
    assert fit.chi2_per_dof <= wide.chi2_per_dof * (1 + 1e-6)
    assert fit.derived['separation'][0] == pytest.approx(8 * UM, abs=2 * UM)


def test_two_ion_coincident():
    counts = _pair(6 * UM, 0.0, 0.0, 5 * UM, 1e5)
    fit = fit_profile_two_ion(AxialProfile(Z, counts), strict=False)
    assert abs(fit.derived['separation'][0]) < 1 * UM
    assert fit.chi2_per_dof < 1e-6
    assert fit['gamma'] == pytest.approx(6 * UM, rel=1e-3)


def test_iteration_cap_is_not_convergence(monkeypatch):
    monkeypatch.setattr('iontrap.fitting.MAX_ITERATIONS', 1)
    profile = AxialProfile(Z, _single(6 * UM, 1 * UM, 10 * UM, 1e5))
    with pytest.raises(ConvergenceError):
        fit_profile_single(profile)
    fit = fit_profile_single(profile, strict=False)
    assert not fit.converged


def test_flat_profile():
    with pytest.raises(DegenerateDataError):
        fit_profile_single(AxialProfile(Z, np.full(Z.size, 50.0)))


def test_empty_profile():
    counts = np.zeros(Z.size)
    counts[30:33] = 10.0
    with pytest.raises(InsufficientDataError):
        fit_profile_single(AxialProfile(Z, counts))


@pytest.mark.slow
def test_single_poisson_coverage():
    rng = np.random.default_rng(11)
    mean = _single(6 * UM, 0.0, 10 * UM, 1e5)
    inside = 0
    for _ in range(200):
        fit = fit_profile_single(AxialProfile(Z, rng.poisson(mean).astype(float)))
        inside += abs(fit['rho'] - 10 * UM) < 3 * fit.error('rho')
    assert inside >= 190


# --- Group 2 ---

def test_resonance_noiseless():
    fit = fit_resonance(ResonanceScan(SCAN, _scan(309.0)), CA.mass)
    assert fit.converged
    assert fit['omega_z'] == pytest.approx(OMEGA_Z, rel=1e-8)
    assert fit['gamma_z'] == pytest.approx(309.0, rel=1e-7)
    assert fit['f_e'] == pytest.approx(FORCE, rel=1e-7)
    assert fit.derived['f_z'][0] == pytest.approx(79.7e3, rel=1e-8)


def test_resonance_peak():
    fit = fit_resonance(ResonanceScan(SCAN, _scan(309.0)), CA.mass)
    peak = resonance_peak(fit)
    assert peak == pytest.approx(np.sqrt(OMEGA_Z**2 - 2 * 309.0**2), rel=1e-8)
    top = resonance_amplitude(peak, fit['omega_z'], fit['gamma_z'], fit['f_e'], CA.mass)
    for step in (-1.0, 1.0):
        assert resonance_amplitude(peak + step, fit['omega_z'], fit['gamma_z'], fit['f_e'], CA.mass) < top


def test_resonance_joint():
    scans = [ResonanceScan(SCAN, _scan(309.0)), ResonanceScan(SCAN, _scan(354.0, 2 * np.pi * 80.3e3))]
    fit = fit_resonance_joint(scans, CA.mass)
    assert fit['f_e'] == pytest.approx(FORCE, rel=1e-6)
    assert fit['gamma_z_0'] == pytest.approx(309.0, rel=1e-6)
    assert fit['gamma_z_1'] == pytest.approx(354.0, rel=1e-6)
    assert fit['omega_z_1'] == pytest.approx(2 * np.pi * 80.3e3, rel=1e-8)


def test_resonance_not_bracketed():
    below = 2 * np.pi * np.linspace(70e3, 76e3, 13)
    with pytest.raises(NotBracketedError):
        fit_resonance(ResonanceScan(below, resonance_amplitude(below, OMEGA_Z, 309.0, FORCE, CA.mass)), CA.mass)
    with pytest.raises(NotBracketedError):
        fit_resonance(ResonanceScan(SCAN, np.zeros(SCAN.size)), CA.mass)
    with pytest.raises(NotBracketedError):
        fit_resonance(ResonanceScan(SCAN, np.full(SCAN.size, 1e-7)), CA.mass)


def test_resonance_too_few_points():
    with pytest.raises(InsufficientDataError):
        fit_resonance(ResonanceScan(SCAN[10:14], _scan(309.0)[10:14]), CA.mass)


def test_resonance_errors_are_absolute():
    rng = np.random.default_rng(5)
    clean = _scan(309.0, frequencies=LINE)
    noise = 0.01 * clean.max()
    rho = clean + rng.normal(0, noise, clean.size)
    one = fit_resonance(ResonanceScan(LINE, rho, np.full(rho.size, noise)), CA.mass)
    two = fit_resonance(ResonanceScan(LINE, rho, np.full(rho.size, 2 * noise)), CA.mass)
    assert two['gamma_z'] == pytest.approx(one['gamma_z'], rel=1e-6)
    assert two.error('gamma_z') == pytest.approx(2 * one.error('gamma_z'), rel=1e-3)
    assert one.error('gamma_z') < 0.03 * 309.0


def _noisy_fits(gamma: float, n: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    clean = _scan(gamma, frequencies=LINE)
    noise = 0.01 * clean.max()
    return [fit_resonance(ResonanceScan(LINE, clean + rng.normal(0, noise, clean.size), np.full(clean.size, noise)),
                          CA.mass) for _ in range(n)]


@pytest.mark.slow
def test_resonance_coverage():
    fits = _noisy_fits(309.0, 200, seed=21)
    inside = np.mean([abs(f['gamma_z'] - 309.0) < f.error('gamma_z') for f in fits])
    assert 0.58 <= inside <= 0.78


@pytest.mark.slow
def test_damping_rates_resolved():
    low = _noisy_fits(309.0, 50, seed=22)
    high = _noisy_fits(354.0, 50, seed=23)
    apart = [a['gamma_z'] + a.error('gamma_z') < b['gamma_z'] - b.error('gamma_z') for a, b in zip(low, high)]
    assert np.mean(apart) >= 0.8


# --- Group 3 ---

V2 = np.linspace(0, 1e-3, 9)


def test_noise_line_exact():
    fit = fit_noise_line(NoiseSweep(V2, 2e-15 + 3e-10 * V2))
    assert fit['c0'] == pytest.approx(2e-15, rel=1e-9)
    assert fit['c1'] == pytest.approx(3e-10, rel=1e-9)
    assert fit.derived['r_squared'][0] == pytest.approx(1.0)


def test_noise_line_window():
    sigma2 = np.where(V2 <= 5e-4, 1e-15 + 2e-10 * V2, 5e-15)
    fit = fit_noise_line(NoiseSweep(V2, sigma2), window=(0.0, 5e-4))
    assert fit['c1'] == pytest.approx(2e-10, rel=1e-9)
    assert fit.config['n_points'] == 5
    with pytest.raises(InsufficientDataError):
        fit_noise_line(NoiseSweep(V2, sigma2), window=(0.0, 2e-4))


def test_noise_line_weighted():
    rng = np.random.default_rng(4)
    err = np.full(V2.size, 1e-16)
    fit = fit_noise_line(NoiseSweep(V2, 1e-15 + 2e-10 * V2 + rng.normal(0, 1e-16, V2.size), err))
    assert abs(fit['c1'] - 2e-10) < 5 * fit.error('c1')


def test_slope_ratio():
    a = fit_noise_line(NoiseSweep(V2, 6e-10 * V2))
    b = fit_noise_line(NoiseSweep(V2, 3e-10 * V2))
    ratio, err = slope_ratio(a, b)
    assert ratio == pytest.approx(2.0, rel=1e-9)
    assert err == pytest.approx(0.0, abs=1e-6)


def test_zeta_from_slope_matches_calibration():
    psd, gamma = 3e-51, 309.0
    slope = psd / (8 * CA.mass**2 * gamma * (2 * np.pi * 80e3)**2)
    zeta = zeta_from_slope(slope, CA.mass, 2 * np.pi * 80e3, gamma)
    assert zeta == pytest.approx(zeta_from_calibration(CA, psd), rel=1e-12)


def _three_segments(x: np.ndarray) -> np.ndarray:
    return np.where(x <= 1e-3, x, np.where(x <= 4e-3, 1e-3, 1e-3 + 0.3 * (x - 4e-3)))


def test_plateau_found():
    x = np.arange(25) * 250e-6
    result = detect_plateau(NoiseSweep(x, _three_segments(x)))
    assert result.found and not result.degenerate
    assert result.breakpoints[0] == pytest.approx(1e-3, rel=0.2)
    assert result.breakpoints[1] == pytest.approx(4e-3, rel=0.2)
    assert abs(result.slopes[1]) < 0.05
    assert result.bic_segmented < result.bic_line


def test_plateau_absent_on_line():
    x = np.arange(25) * 250e-6
    result = detect_plateau(NoiseSweep(x, 2e-4 + 0.5 * x))
    assert not result.found
    assert result.breakpoints == ()


def test_plateau_constant():
    x = np.arange(15) * 1e-4
    result = detect_plateau(NoiseSweep(x, np.full(x.size, 3e-15)))
    assert result.found and result.degenerate
    assert result.breakpoints == (x[0], x[-1])


def test_plateau_too_short():
    x = np.arange(8) * 1e-4
    with pytest.raises(InsufficientDataError):
        detect_plateau(NoiseSweep(x, x))


# --- Group 4 ---

def test_mass_ratio_round_trip():
    rng = np.random.default_rng(5)
    for mu in np.exp(rng.uniform(np.log(0.1), np.log(100.0), 50)):
        minus, plus = two_ion_eigenfrequencies(mu, 1.0)
        assert invert_mass_ratio(minus, 1.0).mu == pytest.approx(mu, rel=1e-8)
        assert invert_mass_ratio(plus, 1.0, branch='plus').mu == pytest.approx(mu, rel=1e-8)


def test_mass_ratio_calcium_rhenium():
    assert invert_mass_ratio(0.5494, 1.0).mu == pytest.approx(187 / 40, rel=1e-3)
    assert invert_mass_ratio(np.sqrt(3), 1.0, branch='plus').mu == pytest.approx(1.0, rel=1e-8)


def test_mass_ratio_uncertainty():
    result = invert_mass_ratio(0.5494, 1.0, omega_err=1e-4)
    # mu falls roughly as omega^-2 on the lower branch
    assert result.mu_err == pytest.approx(2 * result.mu * 1e-4 / 0.5494, rel=0.3)


def test_mass_ratio_out_of_range():
    with pytest.raises(OutOfRangeError):
        invert_mass_ratio(1.3, 1.0)
    with pytest.raises(OutOfRangeError):
        invert_mass_ratio(1.3, 1.0, branch='plus')
    with pytest.raises(ConfigError):
        invert_mass_ratio(0.5, 1.0, branch='middle')
