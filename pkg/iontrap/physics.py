"""
Trap and crystal formulas
"""

from __future__ import annotations

from dataclasses import dataclass
from logging import getLogger
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .constants import ATOMIC_MASS, BOLTZMANN, COULOMB_K, ELEMENTARY_CHARGE, EPSILON_0, HBAR
from .constants import ion_mass_u, is_laser_cooled
from .errors import ConfigError, UnstableTrapError

_log = getLogger(__name__)

# Below this |q| the pseudopotential picture of the secular motion holds.
ADIABATIC_Q_LIMIT = 0.4


@dataclass(frozen=True)
class TrapConfig:
    """
    RF/DC drive of a Paul trap and its Mathieu parameters for the reference species.

    :param omega_rf:        RF angular frequency (rad/s).
    :param q_z:             Axial Mathieu q parameter.
    :param a_z:             Axial Mathieu a parameter.
    :param v_rf:            RF amplitude (V, peak-to-peak), recorded only.
    :param u_dc:            DC voltage (V), recorded only.
    :param geometry_q:      q_z per volt of v_rf, when the parameters came from voltages.
    :param geometry_a:      a_z per volt of u_dc, when the parameters came from voltages.
    """
    omega_rf: float
    q_z: float
    a_z: float = 0.0
    v_rf: float = 0.0
    u_dc: float = 0.0
    geometry_q: float = 0.0
    geometry_a: float = 0.0

    def __post_init__(self):
        if not self.omega_rf > 0:
            raise ConfigError('TrapConfig: omega_rf must be positive.')
        if not self.is_adiabatic:
            _log.warning('TrapConfig: |q_z| = %.3g is outside the adiabatic range (< %.1f).',
                         abs(self.q_z), ADIABATIC_Q_LIMIT)

    @classmethod
    def from_voltages(cls, omega_rf: float, v_rf: float, u_dc: float,
                      geometry_q: float, geometry_a: float) -> TrapConfig:
        """
        Builds the trap from its voltages through the configurable geometry factors
        (q_z = geometry_q * v_rf, a_z = geometry_a * u_dc).
        """
        return cls(omega_rf=omega_rf, q_z=geometry_q * v_rf, a_z=geometry_a * u_dc,
                   v_rf=v_rf, u_dc=u_dc, geometry_q=geometry_q, geometry_a=geometry_a)

    @property
    def is_adiabatic(self) -> bool:
        return abs(self.q_z) < ADIABATIC_Q_LIMIT

    @property
    def is_confining(self) -> bool:
        return self.a_z + self.q_z**2 / 2 > 0


@dataclass(frozen=True)
class IonSpecies:
    """
    :param mass:            Mass (kg).
    :param charge:          Charge (C).
    :param label:           Name used in tables and outputs.
    :param laser_cooled:    False for dark ions, which receive no damping.
    """
    mass: float
    charge: float = ELEMENTARY_CHARGE
    label: str = ''
    laser_cooled: bool = True

    def __post_init__(self):
        if not self.mass > 0:
            raise ConfigError(f'IonSpecies: mass must be positive, got {self.mass}.')
        if self.charge == 0:
            raise ConfigError('IonSpecies: charge must be nonzero.')

    @classmethod
    def from_label(cls, label: str, charge_state: int = 1) -> IonSpecies:
        """
        Species from the built-in table, e.g. ``IonSpecies.from_label('Ca40+')``.
        """
        try:
            mass = ion_mass_u(label, charge_state) * ATOMIC_MASS
        except KeyError as err:
            raise ConfigError(str(err.args[0])) from None
        return cls(mass=mass, charge=charge_state * ELEMENTARY_CHARGE,
                   label=label if label.endswith('+') else label + '+',
                   laser_cooled=is_laser_cooled(label))


@dataclass(frozen=True)
class CrystalConfig:
    """
    One ion or a two-ion crystal. The first species is the reference (sensor) ion.

    :param species:     One or two IonSpecies.
    :param gamma_z:     Axial damping coefficient (1/s) of the laser-cooled ions.
    """
    species: tuple[IonSpecies, ...]
    gamma_z: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'species', tuple(self.species))
        if not 1 <= len(self.species) <= 2:
            raise ConfigError(f'CrystalConfig: 1 or 2 ions are supported, got {len(self.species)}.')
        if not self.gamma_z >= 0:
            raise ConfigError('CrystalConfig: gamma_z must be >= 0.')

    @property
    def n_ions(self) -> int:
        return len(self.species)

    @property
    def reference(self) -> IonSpecies:
        return self.species[0]

    @property
    def masses(self) -> np.ndarray:
        return np.array([s.mass for s in self.species])

    @property
    def charges(self) -> np.ndarray:
        return np.array([s.charge for s in self.species])

    @property
    def mu(self) -> float:
        """Mass ratio M/m of the second ion to the reference ion (1 for a single ion)."""
        return self.species[-1].mass / self.species[0].mass

    @property
    def dampings(self) -> np.ndarray:
        return np.array([self.gamma_z if s.laser_cooled else 0.0 for s in self.species])


@dataclass(frozen=True)
class HeatingModel:
    """
    :param s_e:         Single-sided electric-field noise density at the secular frequency (V^2 m^-2 Hz^-1).
    :param zeta:        Heating rate per squared noise amplitude (J s^-1 V^-2).
    :param k_const:     Recoil heating constant K (J/s).
    """
    s_e: float = 0.0
    zeta: float = 0.0
    k_const: float = 0.0

    def __post_init__(self):
        for name in ('s_e', 'zeta', 'k_const'):
            if not getattr(self, name) >= 0:
                raise ConfigError(f'HeatingModel: {name} must be >= 0.')


def mathieu_frequency(omega_rf: float, a: float, q: float) -> float:
    """
    Lowest-order secular frequency (omega_rf/2) * sqrt(a + q^2/2) for any trap axis.
    """
    radicand = a + q * q / 2
    if radicand < 0:
        raise UnstableTrapError(f'secular_frequency: a + q^2/2 = {radicand:.6g} gives no confinement.')
    return omega_rf / 2 * np.sqrt(radicand)


def secular_frequency(trap: TrapConfig) -> float:
    return mathieu_frequency(trap.omega_rf, trap.a_z, trap.q_z)


def secular_frequency_series(trap: TrapConfig) -> float:
    """
    Secular frequency from the expansion of beta^2 up to q^6, more accurate than
    secular_frequency() when q_z approaches the adiabatic limit.
    """
    a, q = trap.a_z, trap.q_z
    beta2 = a
    beta2 += (1 / 2 + a / 2) * q**2
    beta2 += (25 / 128 + 273 * a / 512) * q**4
    beta2 += (317 / 2304 + 59525 * a / 82944) * q**6
    if beta2 < 0:
        raise UnstableTrapError(f'secular_frequency_series: beta^2 = {beta2:.6g} gives no confinement.')
    return trap.omega_rf / 2 * np.sqrt(beta2)


def axial_spring_constants(crystal: CrystalConfig, omega_z: float) -> np.ndarray:
    """
    Axial spring constant of each ion (N/m). The trap confines the reference ion at omega_z;
    the electrostatic well acts on every ion in proportion to its charge.
    """
    ref = crystal.reference
    return ref.mass * omega_z**2 * crystal.charges / ref.charge


def equilibrium_separation(species: IonSpecies, omega_z: float) -> float:
    """
    Distance between two identical ions where Coulomb repulsion balances the trap.
    """
    if not omega_z > 0:
        raise ConfigError('equilibrium_separation: omega_z must be positive.')
    return (species.charge**2 / (2 * np.pi * EPSILON_0 * species.mass * omega_z**2)) ** (1 / 3)


def equilibrium_positions(crystal: CrystalConfig, omega_z: float, numerical: bool = False) -> np.ndarray:
    """
    Axial equilibrium positions (m), sorted.

    :param crystal:     Ions in the trap.
    :param omega_z:     Secular frequency of the reference ion.
    :param numerical:   Minimize the trap + Coulomb energy instead of using the closed form.
    """
    if not omega_z > 0:
        raise ConfigError('equilibrium_positions: omega_z must be positive.')
    if crystal.n_ions == 1:
        return np.zeros(1)

    k = axial_spring_constants(crystal, omega_z)
    qq = COULOMB_K * crystal.charges[0] * crystal.charges[1]
    dist = (qq * (1 / k[0] + 1 / k[1])) ** (1 / 3)

    if not numerical:
        z2 = qq / dist**2 / k[1]
        return np.array([z2 - dist, z2])

    scale = dist
    e_scale = k[0] * scale**2

    def energy(u: np.ndarray) -> float:
        z = u * scale
        return (0.5 * np.sum(k * z**2) + qq / abs(z[1] - z[0])) / e_scale

    def gradient(u: np.ndarray) -> np.ndarray:
        z = u * scale
        d = z[1] - z[0]
        fc = qq * np.sign(d) / d**2
        return (k * z + np.array([fc, -fc])) * scale / e_scale

    out = minimize(energy, np.array([-0.4, 0.6]), jac=gradient, method='BFGS', options={'gtol': 1e-13})
    return np.sort(out.x * scale)


def stiffness_matrix(crystal: CrystalConfig, omega_z: float) -> np.ndarray:
    """
    Hessian of the axial potential energy at equilibrium (N/m).
    """
    k = axial_spring_constants(crystal, omega_z)
    if crystal.n_ions == 1:
        return k.reshape(1, 1)
    z = equilibrium_positions(crystal, omega_z)
    c = 2 * COULOMB_K * crystal.charges[0] * crystal.charges[1] / abs(z[1] - z[0]) ** 3
    return np.array([[k[0] + c, -c], [-c, k[1] + c]])


def normal_modes(crystal: CrystalConfig, omega_z: float) -> tuple[np.ndarray, np.ndarray]:
    """
    Axial normal modes from the mass-weighted Hessian.

    Returns the angular frequencies in ascending order and the eigenvectors (columns)
    in mass-weighted coordinates, signed so that the first ion's component is positive.
    """
    inv_sqrt_m = 1 / np.sqrt(crystal.masses)
    hess = stiffness_matrix(crystal, omega_z) * np.outer(inv_sqrt_m, inv_sqrt_m)
    eigvals, eigvecs = np.linalg.eigh(hess)
    eigvecs = eigvecs * np.where(eigvecs[0] < 0, -1.0, 1.0)
    return np.sqrt(eigvals), eigvecs


def two_ion_eigenfrequencies(mu: float, omega_ref: float) -> tuple[float, float]:
    """
    Axial eigenfrequencies (Omega-, Omega+) of a two-ion crystal with mass ratio mu = M/m,
    omega_ref being the COM frequency of two ions of mass m.
    """
    if not mu > 0:
        raise ConfigError('two_ion_eigenfrequencies: mu must be positive.')
    if not omega_ref > 0:
        raise ConfigError('two_ion_eigenfrequencies: omega_ref must be positive.')
    a = 1 + 1 / mu
    root = np.sqrt(1 + 1 / mu**2 - 1 / mu)
    minus2 = (3 / mu) / (a + root)
    plus2 = a + root
    return omega_ref * np.sqrt(minus2), omega_ref * np.sqrt(plus2)


def resonance_amplitude(omega_dip: float | np.ndarray, omega_z: float, gamma_z: float,
                        f_e: float, mass: float) -> float | np.ndarray:
    """
    Steady-state amplitude of a driven, damped oscillator.
    """
    omega_dip = np.asarray(omega_dip, dtype=float)
    return f_e / mass / np.sqrt((2 * gamma_z * omega_dip)**2 + (omega_z**2 - omega_dip**2)**2)


def crystal_response(crystal: CrystalConfig, omega_z: float, omega_dip: float | Sequence[float],
                     f_e: float) -> np.ndarray:
    """
    Complex steady-state amplitude of every ion under a uniform force f_e*cos(omega_dip*t).

    Returns an array of shape (len(omega_dip), n_ions); z_i(t) = Re[x_i exp(i omega_dip t)].
    """
    omegas = np.atleast_1d(np.asarray(omega_dip, dtype=float))
    stiff = stiffness_matrix(crystal, omega_z)
    mass = np.diag(crystal.masses)
    damp = np.diag(2 * crystal.masses * crystal.dampings)
    force = np.full(crystal.n_ions, f_e, dtype=complex)
    out = np.empty((omegas.size, crystal.n_ions), dtype=complex)
    for i, w in enumerate(omegas):
        out[i] = np.linalg.solve(stiff - w**2 * mass + 1j * w * damp, force)
    return out


def energy_heating_rate(species: IonSpecies, s_e: float) -> float:
    """
    Energy gained per second (J/s) from electric-field noise of single-sided density s_e.
    """
    if not s_e >= 0:
        raise ConfigError('energy_heating_rate: s_e must be >= 0.')
    return species.charge**2 * s_e / (4 * species.mass)


def heating_rate_single(species: IonSpecies, omega_z: float, s_e: float) -> float:
    """
    Heating rate in motional quanta per second of a single ion.
    """
    if not omega_z > 0:
        raise ConfigError('heating_rate_single: omega_z must be positive.')
    if not s_e >= 0:
        raise ConfigError('heating_rate_single: s_e must be >= 0.')
    return species.charge**2 * s_e / (4 * species.mass * HBAR * omega_z)


def heating_rate_com(n_ions: int, single_rate: float) -> float:
    """
    COM-mode heating rate of n_ions under spatially correlated noise.
    """
    if n_ions not in (1, 2):
        raise ConfigError(f'heating_rate_com: n_ions must be 1 or 2, got {n_ions}.')
    return n_ions * single_rate


def doppler_limit_temperature(model: HeatingModel, gamma_z: float, v_noise: float) -> float:
    """
    Steady-state temperature (K) where laser cooling balances recoil and noise heating.

    :param model:       K and zeta of the heating model.
    :param gamma_z:     Damping coefficient (1/s).
    :param v_noise:     Noise amplitude (V).
    """
    if gamma_z == 0:
        raise ZeroDivisionError('doppler_limit_temperature: gamma_z must be nonzero.')
    if gamma_z < 0:
        raise ConfigError('doppler_limit_temperature: gamma_z must be positive.')
    return (model.k_const + model.zeta * v_noise**2) / (gamma_z * BOLTZMANN)


def zeta_from_calibration(species: IonSpecies, psd_per_v2: float) -> float:
    """
    Coefficient zeta (J s^-1 V^-2) of doppler_limit_temperature() for an ion whose force noise
    density is psd_per_v2 (N^2 Hz^-1 V^-2) per squared noise amplitude.

    The damping force -2 m gamma_z v removes energy at the rate 2 gamma_z, so zeta is half of
    the energy heating rate per V^2.
    """
    return psd_per_v2 / (8 * species.mass)
