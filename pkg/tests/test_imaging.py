"""
Fluorescence profiles and synthetic images.

 Group 1 - Driven single-ion profile
   Closed form against quadrature, symmetry, normalization, small-amplitude and
   narrow-PSF limits, turning-point peaks
 Group 2 - Thermal and two-ion profiles
 Group 3 - Images
   Zero rate, reproducibility, total counts, trajectory rendering against the closed form
"""

from __future__ import annotations

import numpy as np
import pytest
from scipy.integrate import quad

from iontrap import (AxialProfile, ConfigError, CrystalConfig, DriveSpec, IonSpecies, NoiseSpec, OpticsConfig,
                     ProfileParams, SimConfig, TrapConfig, bin_counts, expected_image, profile_driven_closed,
                     profile_driven_quadrature, profile_fwhm, profile_lorentzian, profile_thermal, project_axial,
                     render_image, simulate, steady_state_amplitude, trajectory_density, two_ion_profile)

UM = 1e-6
GAMMA_PSF = 6 * UM
OPTICS = OpticsConfig(lorentzian_fwhm=GAMMA_PSF, photon_rate=1e4, exposure=2.0)

OMEGA_RF = 2 * np.pi * 1.47e6
OMEGA_Z = 2 * np.pi * 80e3
TRAP = TrapConfig(omega_rf=OMEGA_RF, q_z=0.25, a_z=(2 * OMEGA_Z / OMEGA_RF) ** 2 - 0.25**2 / 2)
CA = IonSpecies.from_label('Ca40+')


def _arcsine(u: np.ndarray, rho: float) -> np.ndarray:
    return 1 / (np.pi * np.sqrt(rho**2 - u**2))


def _psf_density(z: np.ndarray) -> np.ndarray:
    return profile_lorentzian(GAMMA_PSF, 0.0, GAMMA_PSF**2, z)


# --- Group 1 ---

def test_closed_matches_quadrature():
    rng = np.random.default_rng(7)
    for gamma, rho in zip(rng.uniform(1, 10, 25) * UM, rng.uniform(0.5, 30, 25) * UM):
        params = ProfileParams(gamma=gamma, z0=0.3 * UM, rho_max=rho, a0=2.0)
        z = np.linspace(-1.5, 1.5, 21) * (rho + 2 * gamma)
        closed = profile_driven_closed(params, z)
        numeric = profile_driven_quadrature(params, z)
        assert closed == pytest.approx(numeric, rel=1e-6)


def test_closed_matches_quadrature_at_center():
    params = ProfileParams(gamma=5 * UM, z0=0.0, rho_max=5 * UM)
    assert float(profile_driven_closed(params, 0.0)) == pytest.approx(float(profile_driven_quadrature(params, 0.0)),
                                                                      rel=1e-8)


def test_profile_symmetric():
    params = ProfileParams(gamma=4 * UM, rho_max=9 * UM)
    u = np.linspace(0, 40, 81) * UM
    assert profile_driven_closed(params, u) == pytest.approx(profile_driven_closed(params, -u), rel=1e-12)


@pytest.mark.parametrize('gamma, rho', [(6 * UM, 0.5 * UM), (6 * UM, 10 * UM), (1 * UM, 30 * UM)])
def test_profile_normalized(gamma, rho):
    params = ProfileParams(gamma=gamma, rho_max=rho, a0=3.0)
    reach = 1e4 * (rho + gamma)
    points = [-rho - 5 * gamma, -rho, 0.0, rho, rho + 5 * gamma]
    inner = quad(lambda z: float(profile_driven_closed(params, z)), -reach, reach, points=points,
                 epsabs=0, epsrel=1e-10, limit=2000)[0]
    # far tails of a unit Lorentzian
    tails = gamma / (np.pi * reach) * params.a0 / gamma**2
    assert (inner + tails) * gamma**2 / params.a0 == pytest.approx(1.0, rel=1e-6)


def test_small_amplitude_is_lorentzian():
    z = np.linspace(-30, 30, 61) * UM
    params = ProfileParams(gamma=GAMMA_PSF, z0=UM, rho_max=1e-9 * GAMMA_PSF, a0=1.5)
    assert profile_driven_closed(params, z) == pytest.approx(profile_lorentzian(GAMMA_PSF, UM, 1.5, z), rel=1e-6)


def test_zero_amplitude_is_lorentzian():
    z = np.linspace(-30, 30, 61) * UM
    params = ProfileParams(gamma=GAMMA_PSF, rho_max=0.0)
    assert np.array_equal(profile_driven_closed(params, z), profile_lorentzian(GAMMA_PSF, 0.0, 1.0, z))
    assert np.array_equal(profile_driven_quadrature(params, z), profile_lorentzian(GAMMA_PSF, 0.0, 1.0, z))


def test_narrow_psf_is_arcsine():
    rho = 10 * UM
    gamma = 1e-4 * rho
    params = ProfileParams(gamma=gamma, rho_max=rho)
    u = np.array([-0.7, -0.5, 0.0, 0.3, 0.5]) * rho
    assert profile_driven_closed(params, u) * gamma**2 == pytest.approx(_arcsine(u, rho), rel=1e-3)


def test_turning_point_peaks():
    rho, gamma = 10 * UM, 0.5 * UM
    z = np.linspace(0, 20, 4001) * UM
    values = profile_driven_closed(ProfileParams(gamma=gamma, rho_max=rho), z)
    assert z[np.argmax(values)] == pytest.approx(rho, abs=gamma)


def test_lorentzian_fwhm():
    z = np.linspace(-50, 50, 20001) * UM
    width = profile_fwhm(lambda x: profile_lorentzian(GAMMA_PSF, 0.0, 1.0, x), z)
    assert width == pytest.approx(GAMMA_PSF, rel=1e-3)


def test_invalid_params():
    with pytest.raises(ConfigError):
        ProfileParams(gamma=0.0)
    with pytest.raises(ConfigError):
        ProfileParams(gamma=UM, rho_max=-UM)


# --- Group 2 ---

def test_thermal_normalized():
    total = quad(lambda z: float(profile_thermal(1.0, 0.5, 0.2, 2.5, z)), -np.inf, np.inf, epsabs=0,
                 epsrel=1e-10, limit=500)[0]
    assert total == pytest.approx(2.5, rel=1e-6)


def test_thermal_is_convolution():
    sigma, gamma = 1.0, 0.8
    for z in (-3.0, -0.5, 0.0, 1.2, 4.0):
        conv = quad(lambda x: np.exp(-x * x / (2 * sigma**2)) / np.sqrt(2 * np.pi) / sigma
                    * (gamma / 2) / np.pi / ((gamma / 2)**2 + (z - x)**2), -np.inf, np.inf,
                    epsabs=0, epsrel=1e-11, limit=500)[0]
        assert float(profile_thermal(sigma, gamma, 0.0, 1.0, z)) == pytest.approx(conv, rel=1e-6)


def test_thermal_limits():
    z = np.linspace(-5, 5, 41)
    gauss = np.exp(-z**2 / 2) / np.sqrt(2 * np.pi)
    assert profile_thermal(1.0, 0.0, 0.0, 1.0, z) == pytest.approx(gauss, rel=1e-10)
    lorentz = profile_lorentzian(0.7, 0.0, 1.0, z) * 0.7**2
    assert profile_thermal(0.0, 0.7, 0.0, 1.0, z) == pytest.approx(lorentz, rel=1e-10)
    with pytest.raises(ConfigError):
        profile_thermal(0.0, 0.0, 0.0, 1.0, z)


def test_two_ion_coincident():
    ion = ProfileParams(gamma=GAMMA_PSF, z0=2 * UM, rho_max=5 * UM)
    z = np.linspace(-40, 40, 81) * UM
    assert two_ion_profile(ion, ion)(z) == pytest.approx(2 * profile_driven_closed(ion, z), rel=1e-15)


def test_two_ion_requires_shared_shape():
    with pytest.raises(ConfigError):
        two_ion_profile(ProfileParams(gamma=GAMMA_PSF), ProfileParams(gamma=2 * GAMMA_PSF))


def test_two_ion_lobes():
    left = ProfileParams(gamma=GAMMA_PSF, z0=-15 * UM, rho_max=2 * UM)
    right = ProfileParams(gamma=GAMMA_PSF, z0=15 * UM, rho_max=2 * UM)
    z = np.linspace(-40, 40, 801) * UM
    values = two_ion_profile(left, right)(z)
    assert values[400] < 0.3 * values.max()


# --- Group 3 ---

def test_axial_profile_validation():
    with pytest.raises(ConfigError):
        AxialProfile(np.array([0.0, 1.0, 3.0]), np.ones(3))
    with pytest.raises(ConfigError):
        AxialProfile(np.arange(3.0), np.array([1.0, -1.0, 1.0]))
    profile = AxialProfile(np.arange(3.0), np.array([4.0, 9.0, 0.0]))
    assert profile.uncertainties == pytest.approx([2.0, 3.0, 0.0])


def test_bin_counts_cover_profile():
    params = ProfileParams(gamma=GAMMA_PSF, rho_max=10 * UM, a0=GAMMA_PSF**2)
    z = (np.arange(2001) - 1000) * UM
    assert bin_counts(lambda x: profile_driven_closed(params, x), z).sum() == pytest.approx(1.0, abs=3e-3)


def test_zero_rate_renders_zeros():
    optics = OpticsConfig(lorentzian_fwhm=GAMMA_PSF, photon_rate=0.0)
    image = render_image(_psf_density, optics, seed=1)
    assert image.shape == (optics.n_pixels_radial, optics.n_pixels_axial)
    assert not image.any()


def test_render_reproducible():
    a = render_image(_psf_density, OPTICS, seed=3)
    b = render_image(_psf_density, OPTICS, seed=3)
    c = render_image(_psf_density, OPTICS, seed=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_render_total_counts():
    mean = expected_image(_psf_density, OPTICS)
    assert 0.5 * OPTICS.photon_rate * OPTICS.exposure < mean.sum() < OPTICS.photon_rate * OPTICS.exposure
    image = render_image(_psf_density, OPTICS, seed=5)
    assert abs(image.sum() - mean.sum()) < 5 * np.sqrt(mean.sum())


def test_project_axial():
    image = np.arange(OPTICS.n_pixels_radial * OPTICS.n_pixels_axial).reshape(OPTICS.n_pixels_radial, -1)
    profile = project_axial(image, OPTICS)
    assert profile.counts == pytest.approx(image.sum(axis=0))
    assert profile.bin_width == pytest.approx(OPTICS.pixel_size_effective)
    with pytest.raises(ConfigError):
        project_axial(image.T, OPTICS)


@pytest.fixture(scope='module')
def driven_trajectory():
    gamma = 0.02 * OMEGA_Z
    crystal = CrystalConfig((CA,), gamma_z=gamma)
    # amplitude of about 10 um on resonance
    drive = DriveSpec(f_e=10 * UM * CA.mass * 2 * gamma * OMEGA_Z, omega_dip=OMEGA_Z)
    return simulate(crystal, TRAP, drive, NoiseSpec(), SimConfig(duration=60 / gamma, record_stride=5))


def test_trajectory_density_matches_closed(driven_trajectory):
    rho = steady_state_amplitude(driven_trajectory, OMEGA_Z)
    center = driven_trajectory.positions[driven_trajectory.positions.shape[0] // 2:, 0].mean()
    closed = ProfileParams(gamma=GAMMA_PSF, z0=center, rho_max=rho, a0=GAMMA_PSF**2)
    z = np.linspace(-30, 30, 121) * UM
    sampled = trajectory_density(driven_trajectory, GAMMA_PSF, settle_fraction=0.5)(z)
    expected = profile_driven_closed(closed, z)
    assert np.abs(sampled - expected).max() < 1e-2 * expected.max()


def test_rendered_trajectory_fits_closed(driven_trajectory):
    rho = steady_state_amplitude(driven_trajectory, OMEGA_Z)
    closed = ProfileParams(gamma=GAMMA_PSF, rho_max=rho, a0=GAMMA_PSF**2)
    settled = trajectory_density(driven_trajectory, GAMMA_PSF, settle_fraction=0.5)
    observed = project_axial(render_image(settled, OPTICS, seed=9), OPTICS).counts
    mean = expected_image(lambda z: profile_driven_closed(closed, z), OPTICS).sum(axis=0)
    keep = mean > 10
    chi2 = np.sum((observed[keep] - mean[keep])**2 / mean[keep])
    assert chi2 / keep.sum() < 1.5
