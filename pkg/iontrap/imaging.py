"""
Fluorescence profiles and synthetic detector images
"""

from __future__ import annotations

from dataclasses import dataclass
from logging import getLogger
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import quad
from scipy.special import voigt_profile

from .dynamics import Trajectory
from .errors import ConfigError, NumericalError
from .helper import _bin_integrals, _fwhm, _generator, _lorentzian, _lorentzian_cdf

_log = getLogger(__name__)

Density = Callable[[np.ndarray], np.ndarray]

QUAD_TOLERANCE = 1e-10
_TRAJ_CHUNK = 4096


@dataclass(frozen=True)
class OpticsConfig:
    """
    Imaging system, lengths in the object plane.

    :param lorentzian_fwhm:         Width Gamma of the Lorentzian point spread function (m).
    :param magnification:           Optical magnification, recorded only.
    :param pixel_size_effective:    Pixel pitch referred to the object plane (m).
    :param photon_rate:             Detected photons per second per ion.
    :param exposure:                Exposure time (s).
    :param n_pixels_axial:          Image columns (along the trap axis).
    :param n_pixels_radial:         Image rows.
    """
    lorentzian_fwhm: float
    magnification: float = 6.75
    pixel_size_effective: float = 2.4e-6
    photon_rate: float = 1e4
    exposure: float = 1.0
    n_pixels_axial: int = 64
    n_pixels_radial: int = 16

    def __post_init__(self):
        if not self.lorentzian_fwhm > 0:
            raise ConfigError('OpticsConfig: lorentzian_fwhm must be positive.')
        if not self.pixel_size_effective > 0:
            raise ConfigError('OpticsConfig: pixel_size_effective must be positive.')
        if not self.magnification > 0:
            raise ConfigError('OpticsConfig: magnification must be positive.')
        if not self.photon_rate >= 0:
            raise ConfigError('OpticsConfig: photon_rate must be >= 0.')
        if not self.exposure > 0:
            raise ConfigError('OpticsConfig: exposure must be positive.')
        if self.n_pixels_axial < 2 or self.n_pixels_radial < 1:
            raise ConfigError('OpticsConfig: need at least 2 axial pixels and 1 radial pixel.')

    @property
    def pixel_size_camera(self) -> float:
        return self.pixel_size_effective * self.magnification

    def pixel_centers(self, center: float = 0.0) -> np.ndarray:
        """Axial pixel centers (m)."""
        n = self.n_pixels_axial
        return center + (np.arange(n) - (n - 1) / 2) * self.pixel_size_effective

    def pixel_edges(self, center: float = 0.0) -> np.ndarray:
        n = self.n_pixels_axial
        return center + (np.arange(n + 1) - n / 2) * self.pixel_size_effective


@dataclass(frozen=True)
class AxialProfile:
    """
    Photon counts binned along the trap axis.

    :param bin_centers:     Uniformly spaced bin centers (m).
    :param counts:          Counts per bin.
    :param uncertainties:   1 sigma per bin, sqrt(counts) when not supplied.
    """
    bin_centers: np.ndarray
    counts: np.ndarray
    uncertainties: np.ndarray | None = None

    def __post_init__(self):
        z = np.asarray(self.bin_centers, dtype=float)
        counts = np.asarray(self.counts, dtype=float)
        if z.ndim != 1 or z.shape != counts.shape or z.size < 2:
            raise ConfigError('AxialProfile: bin_centers and counts must be 1-D of equal length >= 2.')
        steps = np.diff(z)
        if not np.all(steps > 0) or not np.allclose(steps, steps[0], rtol=1e-6, atol=0):
            raise ConfigError('AxialProfile: bins must be uniform and increasing.')
        if np.any(counts < 0):
            raise ConfigError('AxialProfile: counts must be >= 0.')
        err = np.sqrt(counts) if self.uncertainties is None else np.asarray(self.uncertainties, dtype=float)
        if err.shape != counts.shape or np.any(err < 0):
            raise ConfigError('AxialProfile: uncertainties must match counts and be >= 0.')
        object.__setattr__(self, 'bin_centers', z)
        object.__setattr__(self, 'counts', counts)
        object.__setattr__(self, 'uncertainties', err)

    @property
    def bin_width(self) -> float:
        return float(self.bin_centers[1] - self.bin_centers[0])

    @property
    def total(self) -> float:
        return float(self.counts.sum())


@dataclass(frozen=True)
class ProfileParams:
    """
    :param gamma:           Lorentzian width Gamma (m).
    :param z0:              Center of the oscillation (m).
    :param rho_max:         Oscillation amplitude (m).
    :param a0:              Scale (counts m).
    :param sigma_thermal:   Gaussian width of the thermal model (m).
    """
    gamma: float
    z0: float = 0.0
    rho_max: float = 0.0
    a0: float = 1.0
    sigma_thermal: float = 0.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError('ProfileParams: gamma must be positive.')
        if not self.rho_max >= 0:
            raise ConfigError('ProfileParams: rho_max must be >= 0.')
        if not self.a0 > 0:
            raise ConfigError('ProfileParams: a0 must be positive.')
        if not self.sigma_thermal >= 0:
            raise ConfigError('ProfileParams: sigma_thermal must be >= 0.')


def profile_lorentzian(gamma: float, z0: float, a0: float, z: np.ndarray) -> np.ndarray:
    """
    Zero-amplitude limit of the driven profile, (a0/gamma^2) times a unit Lorentzian.
    """
    z = np.asarray(z, dtype=float)
    return a0 / gamma**2 * _lorentzian(z - z0, gamma)


def profile_driven_closed(params: ProfileParams, z: np.ndarray) -> np.ndarray:
    """
    Closed-form profile of an ion oscillating with amplitude rho_max, seen through a Lorentzian PSF.

    F(z) = (2/(pi G^2)) (A0/(2 rho)) Im[i / sqrt(1 - G^2 (2(z-z0)/G + i)^2 / (4 rho^2))]

    Its integral over z is a0/gamma^2.
    """
    z = np.asarray(z, dtype=float)
    gamma, rho = params.gamma, params.rho_max
    if rho == 0:
        return profile_lorentzian(gamma, params.z0, params.a0, z)
    w = (z - params.z0 + 0.5j * gamma) / rho
    # Im w > 0 keeps 1 - w^2 off the principal branch cut.
    val = (1j / np.sqrt(1 - w * w)).imag
    return params.a0 / (np.pi * gamma**2 * rho) * val


def profile_driven_quadrature(params: ProfileParams, z: np.ndarray) -> np.ndarray:
    """
    Same profile as profile_driven_closed(), by adaptive quadrature of the Lorentzian PSF
    over the arcsine position density of the oscillation.

    The substitution f = rho sin(theta) removes the turning-point singularities.
    """
    z = np.asarray(z, dtype=float)
    gamma, rho = params.gamma, params.rho_max
    if rho == 0:
        return profile_lorentzian(gamma, params.z0, params.a0, z)

    def integrand(theta: float, u: float) -> float:
        return _lorentzian(u - rho * np.sin(theta), gamma) / np.pi

    flat = z.ravel()
    out = np.empty(flat.shape)
    for i, u in enumerate(flat - params.z0):
        points = [np.arcsin(u / rho)] if abs(u) < rho else None
        val, err, info = quad(integrand, -np.pi / 2, np.pi / 2, args=(u,), points=points, epsabs=0,
                              epsrel=QUAD_TOLERANCE, limit=500, full_output=1)[:3]
        if err > QUAD_TOLERANCE * abs(val) + 1e-300:
            raise NumericalError(f'profile_driven_quadrature: no convergence at z - z0 = {u:.6g} m '
                                 f'(error estimate {err:.3g}, {info["neval"]} evaluations).')
        out[i] = val
    return (params.a0 / gamma**2 * out).reshape(z.shape)


def profile_thermal(sigma_thermal: float, gamma: float, z0: float, a0: float, z: np.ndarray) -> np.ndarray:
    """
    Gaussian position density of a thermal ion convolved with the Lorentzian PSF, integrating to a0.
    """
    if sigma_thermal < 0 or gamma < 0 or sigma_thermal == gamma == 0:
        raise ConfigError('profile_thermal: need sigma_thermal >= 0, gamma >= 0, not both zero.')
    z = np.asarray(z, dtype=float)
    return a0 * voigt_profile(z - z0, sigma_thermal, gamma / 2)


def two_ion_profile(ion1: ProfileParams, ion2: ProfileParams) -> Density:
    """
    Sum of the driven profiles of two ions that share gamma and rho_max.
    """
    if ion1.gamma != ion2.gamma or ion1.rho_max != ion2.rho_max:
        raise ConfigError('two_ion_profile: both ions must share gamma and rho_max.')

    def density(z: np.ndarray) -> np.ndarray:
        return profile_driven_closed(ion1, z) + profile_driven_closed(ion2, z)

    return density


def trajectory_density(traj: Trajectory, gamma: float, settle_fraction: float = 0.0,
                       ions: Sequence[int] | None = None) -> Density:
    """
    Time-averaged emitter density of a trajectory seen through a Lorentzian PSF of width gamma.
    Integrates to the number of selected ions.
    """
    if not gamma > 0:
        raise ConfigError('trajectory_density: gamma must be positive.')
    keep = traj.times >= traj.times[0] + settle_fraction * traj.duration
    idx = list(range(traj.n_ions)) if ions is None else list(ions)
    pos = traj.positions[keep][:, idx].ravel()
    n_samples = int(keep.sum())

    def density(z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        flat = z.ravel()
        acc = np.zeros(flat.shape)
        for start in range(0, pos.size, _TRAJ_CHUNK):
            acc += _lorentzian(flat[:, None] - pos[None, start:start + _TRAJ_CHUNK], gamma).sum(axis=1)
        return (acc / n_samples).reshape(z.shape)

    return density


def bin_counts(density: Density, bin_centers: np.ndarray) -> np.ndarray:
    """
    Integral of a density over each bin of a uniform grid.
    """
    z = np.asarray(bin_centers, dtype=float)
    half = (z[1] - z[0]) / 2
    return _bin_integrals(density, np.append(z - half, z[-1] + half))


def expected_image(source: Density | Trajectory, optics: OpticsConfig, center: float = 0.0) -> np.ndarray:
    """
    Mean counts per pixel, shape (n_pixels_radial, n_pixels_axial).

    Axial pixels integrate the emitter density with 8-point Gauss-Legendre; the radial
    spread is the Lorentzian PSF of an ion on the axis.
    """
    density = trajectory_density(source, optics.lorentzian_fwhm) if isinstance(source, Trajectory) else source
    axial = _bin_integrals(density, optics.pixel_edges(center))
    n_r = optics.n_pixels_radial
    r_edges = (np.arange(n_r + 1) - n_r / 2) * optics.pixel_size_effective
    radial = np.diff(_lorentzian_cdf(r_edges, optics.lorentzian_fwhm))
    return optics.exposure * optics.photon_rate * np.outer(radial, np.clip(axial, 0, None))


def render_image(source: Density | Trajectory, optics: OpticsConfig, seed: int, key: Sequence[int] = (),
                 center: float = 0.0) -> np.ndarray:
    """
    Synthetic camera frame with Poisson shot noise.

    :param source:      Emitter density along the axis (integrating to the number of ions), or a trajectory.
    :param optics:      Imaging system.
    :param seed:        Master seed.
    :param key:         Stream key for independent frames from one seed.
    :param center:      Axial position of the image center (m).
    """
    mean = expected_image(source, optics, center)
    rng = _generator(seed, tuple(key))
    image = rng.poisson(mean)
    _log.debug('render_image: %d counts', int(image.sum()))
    return image


def project_axial(image: np.ndarray, optics: OpticsConfig, center: float = 0.0) -> AxialProfile:
    """
    Sums the radial rows of an image into an axial profile.
    """
    image = np.asarray(image)
    if image.ndim != 2 or image.shape[1] != optics.n_pixels_axial:
        raise ConfigError(f'project_axial: image shape {image.shape} does not match {optics.n_pixels_axial} '
                          'axial pixels.')
    counts = image.sum(axis=0).astype(float)
    return AxialProfile(optics.pixel_centers(center), counts)


def profile_fwhm(density: Density | np.ndarray, z_grid: np.ndarray) -> float:
    """
    Full width at half maximum (m) of a profile sampled on z_grid.
    """
    z_grid = np.asarray(z_grid, dtype=float)
    values = density(z_grid) if callable(density) else np.asarray(density, dtype=float)
    return _fwhm(z_grid, values)
