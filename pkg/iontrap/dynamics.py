"""
Stochastic simulation of the axial motion of one or two ions
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from logging import getLogger
from typing import TYPE_CHECKING, Sequence

import numpy as np
from joblib import Parallel, delayed
from numba import jit
from scipy.ndimage import uniform_filter1d
from scipy.signal import find_peaks

from .constants import BOLTZMANN, COULOMB_K
from .errors import (ConfigError, ConfigMismatchError, DivergenceError, InsufficientDataError,
                     IonCollisionError)
from .helper import _config_id, _generator
from .physics import (CrystalConfig, TrapConfig, axial_spring_constants, equilibrium_positions,
                      normal_modes, secular_frequency)

if TYPE_CHECKING:
    from .imaging import AxialProfile

_log = getLogger(__name__)

MODES = ('secular', 'full-mathieu')
CORRELATIONS = ('correlated', 'independent')

COLLISION_DISTANCE = 1e-9
# Positions beyond this are taken as a diverging integration (m).
_Z_LIMIT = 1e-2
_CHUNK = 1 << 16


@dataclass(frozen=True)
class DriveSpec:
    """
    Uniform dipolar force f_e * cos(omega_dip * t + phase) on every ion.
    """
    f_e: float = 0.0
    omega_dip: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        if not self.f_e >= 0:
            raise ConfigError('DriveSpec: f_e must be >= 0.')
        if not self.omega_dip >= 0:
            raise ConfigError('DriveSpec: omega_dip must be >= 0.')


@dataclass(frozen=True)
class NoiseSpec:
    """
    White-noise force on the ions.

    :param v_noise:         Noise signal amplitude (V, peak-to-peak).
    :param psd_per_v2:      Calibration of the single-sided force density per squared amplitude (N^2 Hz^-1 V^-2).
    :param correlation:     'correlated' (same force on every ion) or 'independent'.
    """
    v_noise: float = 0.0
    psd_per_v2: float = 0.0
    correlation: str = 'correlated'

    def __post_init__(self):
        if not self.psd_per_v2 >= 0:
            raise ConfigError('NoiseSpec: psd_per_v2 must be >= 0.')
        if self.correlation not in CORRELATIONS:
            raise ConfigError(f"NoiseSpec: correlation must be one of {CORRELATIONS}, got '{self.correlation}'.")

    @classmethod
    def from_force_psd(cls, force_psd: float, correlation: str = 'correlated') -> NoiseSpec:
        return cls(v_noise=1.0, psd_per_v2=force_psd, correlation=correlation)

    @property
    def force_psd(self) -> float:
        """Single-sided force noise density S_F (N^2/Hz)."""
        return self.psd_per_v2 * self.v_noise**2


@dataclass(frozen=True)
class SimConfig:
    """
    :param duration:        Simulated time (s).
    :param dt:              Time step (s), None for 1/200 of the fastest period.
    :param seed:            Master seed, fully determines the output.
    :param mode:            'secular' (pseudopotential) or 'full-mathieu' (time-dependent RF potential).
    :param ensemble_size:   Members of an ensemble run.
    :param record_stride:   Keep every n-th step.
    :param settle_fraction: Fraction of the run discarded before steady-state estimates.
    :param n_jobs:          Worker processes for ensembles.
    """
    duration: float
    dt: float | None = None
    seed: int = 0
    mode: str = 'secular'
    ensemble_size: int = 1
    record_stride: int = 1
    settle_fraction: float = 0.5
    n_jobs: int = 1

    def __post_init__(self):
        if not self.duration > 0:
            raise ConfigError('SimConfig: duration must be positive.')
        if self.dt is not None and not self.dt > 0:
            raise ConfigError('SimConfig: dt must be positive.')
        if self.mode not in MODES:
            raise ConfigError(f"SimConfig: mode must be one of {MODES}, got '{self.mode}'.")
        if self.ensemble_size < 1 or self.record_stride < 1:
            raise ConfigError('SimConfig: ensemble_size and record_stride must be >= 1.')
        if not 0 <= self.settle_fraction < 1:
            raise ConfigError('SimConfig: settle_fraction must be in [0, 1).')
        if not 0 <= self.seed < 2**64:
            raise ConfigError('SimConfig: seed must be a 64-bit unsigned integer.')


@dataclass(frozen=True)
class Trajectory:
    """
    Uniformly sampled positions and velocities, shape (n_samples, n_ions).
    """
    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    mode: str = 'secular'
    config_id: str = ''

    def __post_init__(self):
        if self.positions.shape != self.velocities.shape or self.positions.shape[0] != self.times.shape[0]:
            raise ConfigError('Trajectory: array lengths are inconsistent.')

    @property
    def n_ions(self) -> int:
        return self.positions.shape[1]

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def sample_interval(self) -> float:
        return float(self.times[1] - self.times[0])


@dataclass(frozen=True)
class EnsembleStats:
    """
    :param sigma2:              Position variance per ion (m^2).
    :param sigma2_err:          Standard error of sigma2 from the spread between members.
    :param temperature:         Equipartition temperature per normal mode, ascending frequency (K).
    :param mode_frequencies:    Normal-mode angular frequencies (rad/s).
    :param sigma2_com:          Mass-weighted COM variance k_B T_COM / (m_ref omega_COM^2) (m^2).
    :param sigma2_com_err:      Standard error of sigma2_com.
    :param rho_max:             Coherent amplitude of the reference ion at the drive frequency (m).
    :param rho_max_err:         Standard error of rho_max.
    :param com_energy_rate:     Growth rate of the ensemble-mean COM energy (J/s).
    """
    sigma2: np.ndarray
    sigma2_err: np.ndarray
    temperature: np.ndarray
    mode_frequencies: np.ndarray
    sigma2_com: float
    sigma2_com_err: float
    rho_max: float
    rho_max_err: float
    com_energy_rate: float


@jit(nopython=True, cache=True)
def _acceleration(z, t, inv_mass, k_static, k_rf, omega_rf, f_e, omega_dip, phase, coulomb, out):
    n_ions = z.shape[0]
    drive = f_e * np.cos(omega_dip * t + phase)
    rf = np.cos(omega_rf * t)
    for i in range(n_ions):
        out[i] = -(k_static[i] + k_rf[i] * rf) * z[i] + drive
    if n_ions == 2:
        d = z[0] - z[1]
        if abs(d) < 1e-9:
            return 1
        f = coulomb * np.sign(d) / (d * d)
        out[0] += f
        out[1] -= f
    for i in range(n_ions):
        out[i] *= inv_mass[i]
        if not abs(z[i]) < 1e-2:
            return 2
    return 0


@jit(nopython=True, cache=True)
def _verlet_kernel(z, v, step0, n_steps, dt, stride, inv_mass, k_static, k_rf, omega_rf,
                   damping, f_e, omega_dip, phase, coulomb, kicks, out_z, out_v):
    n_ions = z.shape[0]
    shrink = 1.0 / (1.0 + damping * dt)
    acc = np.empty(n_ions)
    status = _acceleration(z, step0 * dt, inv_mass, k_static, k_rf, omega_rf, f_e, omega_dip, phase,
                           coulomb, acc)
    if status != 0:
        return status, step0
    noisy = kicks.shape[0] > 0
    for s in range(n_steps):
        for i in range(n_ions):
            v[i] = (v[i] + 0.5 * dt * acc[i]) * shrink[i]
            z[i] += dt * v[i]
        step = step0 + s + 1
        status = _acceleration(z, step * dt, inv_mass, k_static, k_rf, omega_rf, f_e, omega_dip, phase,
                               coulomb, acc)
        if status != 0:
            return status, step
        for i in range(n_ions):
            v[i] = (v[i] + 0.5 * dt * acc[i]) * shrink[i]
            if noisy:
                v[i] += kicks[s, i]
        if step % stride == 0:
            k = step // stride
            for i in range(n_ions):
                out_z[k, i] = z[i]
                out_v[k, i] = v[i]
    return 0, step0 + n_steps


def _max_frequency(crystal: CrystalConfig, trap: TrapConfig, drive: DriveSpec, mode: str) -> float:
    omega_z = secular_frequency(trap)
    freqs = [drive.omega_dip, normal_modes(crystal, omega_z)[0].max()]
    if mode == 'full-mathieu':
        freqs.append(trap.omega_rf)
    return max(freqs)


def default_dt(crystal: CrystalConfig, trap: TrapConfig, drive: DriveSpec, mode: str) -> float:
    """
    1/200 of the fastest period among the drive, the normal modes of the crystal and,
    in full-mathieu mode, the RF.
    """
    return 2 * np.pi / _max_frequency(crystal, trap, drive, mode) / 200


def _trap_springs(crystal: CrystalConfig, trap: TrapConfig, mode: str) -> tuple[np.ndarray, np.ndarray]:
    charge_ratio = crystal.charges / crystal.reference.charge
    if mode == 'full-mathieu':
        scale = crystal.reference.mass * trap.omega_rf**2 / 4 * charge_ratio
        return scale * trap.a_z, -2 * scale * trap.q_z
    return axial_spring_constants(crystal, secular_frequency(trap)), np.zeros(crystal.n_ions)


def simulate(crystal: CrystalConfig,
             trap: TrapConfig,
             drive: DriveSpec,
             noise: NoiseSpec,
             sim: SimConfig,
             key: Sequence[int] = (),
             initial: tuple[Sequence[float], Sequence[float]] | None = None) -> Trajectory:
    """
    Integrates the axial equations of motion of the crystal.

    Each ion feels the trap, viscous damping -2 m gamma_z v (laser-cooled ions only), the dipolar
    drive, the white-noise force and, for two ions, their Coulomb repulsion.

    :param crystal:     Ions and damping.
    :param trap:        Trap drive; gives the secular frequency or, in full-mathieu mode, the RF potential.
    :param drive:       Coherent dipolar force.
    :param noise:       White-noise force.
    :param sim:         Step, duration, seed and mode.
    :param key:         Stream key appended to the seed, e.g. (point, member), for independent realizations.
    :param initial:     (positions, velocities) at t = 0. Defaults to rest at the equilibrium positions.
    """
    omega_z = secular_frequency(trap)
    if not omega_z > 0:
        raise ConfigError('simulate: the trap does not confine the ions.')

    dt = sim.dt if sim.dt is not None else default_dt(crystal, trap, drive, sim.mode)
    limit = 2 * np.pi / (100 * _max_frequency(crystal, trap, drive, sim.mode))
    if dt > limit * (1 + 1e-12):
        raise ConfigError(f'simulate: dt = {dt:.4g} s exceeds 1/100 of the fastest period ({limit:.4g} s).')

    gamma = crystal.gamma_z
    if gamma > 0 and sim.duration < 20 / gamma and (drive.f_e > 0 or noise.force_psd > 0):
        _log.warning('simulate: duration %.4g s is shorter than 20/gamma_z = %.4g s, '
                     'the run may not reach steady state.', sim.duration, 20 / gamma)

    n_ions = crystal.n_ions
    n_steps = int(round(sim.duration / dt))
    stride = sim.record_stride
    n_records = n_steps // stride + 1

    if initial is None:
        z = equilibrium_positions(crystal, omega_z).astype(float)
        v = np.zeros(n_ions)
    else:
        z = np.array(initial[0], dtype=float)
        v = np.array(initial[1], dtype=float)
        if z.shape != (n_ions,) or v.shape != (n_ions,):
            raise ConfigError(f'simulate: initial state must hold {n_ions} positions and velocities.')

    k_static, k_rf = _trap_springs(crystal, trap, sim.mode)
    inv_mass = 1 / crystal.masses
    coulomb = COULOMB_K * crystal.charges[0] * crystal.charges[-1] if n_ions == 2 else 0.0
    kick_sigma = np.sqrt(noise.force_psd * dt / 2) * inv_mass

    out_z = np.empty((n_records, n_ions))
    out_v = np.empty((n_records, n_ions))
    out_z[0], out_v[0] = z, v

    streams = []
    if noise.force_psd > 0:
        n_streams = 1 if noise.correlation == 'correlated' or n_ions == 1 else n_ions
        streams = [_generator(sim.seed, tuple(key) + (i,)) for i in range(n_streams)]
    no_kicks = np.zeros((0, n_ions))

    step = 0
    while step < n_steps:
        chunk = min(_CHUNK, n_steps - step)
        if streams:
            normals = np.column_stack([g.standard_normal(chunk) for g in streams])
            kicks = np.ascontiguousarray(np.broadcast_to(normals, (chunk, n_ions)) * kick_sigma)
        else:
            kicks = no_kicks
        status, at = _verlet_kernel(z, v, step, chunk, dt, stride, inv_mass, k_static, k_rf, trap.omega_rf,
                                    crystal.dampings, drive.f_e, drive.omega_dip, drive.phase, coulomb,
                                    kicks, out_z, out_v)
        if status == 1:
            raise IonCollisionError(f'simulate: ions closer than {COLLISION_DISTANCE:g} m at t = {at * dt:.6g} s.')
        if status == 2:
            raise DivergenceError(f'simulate: motion diverged at t = {at * dt:.6g} s.')
        step += chunk
        _log.debug('simulate: %d/%d steps', step, n_steps)

    times = np.arange(n_records) * (dt * stride)
    config_id = _config_id(crystal, trap, drive, noise, replace(sim, seed=0, ensemble_size=1, n_jobs=1))
    return Trajectory(times, out_z, out_v, mode=sim.mode, config_id=config_id)


def simulate_ensemble(crystal: CrystalConfig,
                      trap: TrapConfig,
                      drive: DriveSpec,
                      noise: NoiseSpec,
                      sim: SimConfig,
                      key: Sequence[int] = ()) -> list[Trajectory]:
    """
    sim.ensemble_size independent realizations; member m uses the stream key (*key, m).
    """
    _log.info('simulate_ensemble: %d members, %d jobs', sim.ensemble_size, sim.n_jobs)
    return Parallel(n_jobs=sim.n_jobs)(
        delayed(simulate)(crystal, trap, drive, noise, sim, tuple(key) + (m,))
        for m in range(sim.ensemble_size))


def _window(traj: Trajectory, settle_fraction: float) -> np.ndarray:
    return traj.times >= traj.times[0] + settle_fraction * traj.duration


def demodulate(traj: Trajectory, omega: float, settle_fraction: float = 0.5, ion: int = 0) -> complex:
    """
    Lock-in quadrature c of one ion at omega over the post-settle window,
    so that the motion contains Re[c * exp(i omega t)].
    """
    if not omega > 0:
        raise ConfigError('demodulate: omega must be positive.')
    t = traj.times[_window(traj, settle_fraction)]
    period = 2 * np.pi / omega
    n_cycles = int(np.floor((t[-1] - t[0]) / period)) if t.size > 1 else 0
    if n_cycles < 20:
        raise InsufficientDataError(f'demodulate: window covers {n_cycles} drive cycles, need 20.')
    keep = t < t[0] + n_cycles * period
    t = t[keep]
    z = traj.positions[_window(traj, settle_fraction), ion][keep]
    z = z - z.mean()
    return complex(2 * np.mean(z * np.exp(-1j * omega * t)))


def steady_state_amplitude(traj: Trajectory, omega_dip: float, settle_fraction: float = 0.5, ion: int = 0) -> float:
    """
    Steady-state oscillation amplitude at the drive frequency.
    """
    return abs(demodulate(traj, omega_dip, settle_fraction, ion))


def ensemble_amplitude(trajs: Sequence[Trajectory], omega_dip: float, settle_fraction: float = 0.5,
                       ion: int = 0) -> tuple[float, float]:
    """
    Coherent ensemble average of the drive-frequency quadratures: (amplitude, standard error).
    """
    c = np.array([demodulate(tr, omega_dip, settle_fraction, ion) for tr in trajs])
    mean = c.mean()
    if c.size < 2:
        return abs(mean), 0.0
    err = np.sqrt((c.real.var(ddof=1) + c.imag.var(ddof=1)) / c.size)
    return float(abs(mean)), float(err)


def micromotion_ratio(traj: Trajectory, trap: TrapConfig, ion: int = 0) -> float:
    """
    Amplitude of the motion at the RF frequency relative to the secular amplitude.

    The secular motion is the running mean over one RF period; the remainder is projected on
    the secular motion modulated at omega_rf.
    """
    if traj.mode != 'full-mathieu':
        raise ConfigError('micromotion_ratio: needs a full-mathieu trajectory, got a secular one.')
    step = traj.sample_interval
    per_rf = 2 * np.pi / trap.omega_rf / step
    if per_rf < 4:
        raise InsufficientDataError(f'micromotion_ratio: {per_rf:.1f} samples per RF period, need 4.')
    width = int(round(per_rf))

    z = traj.positions[:, ion] - traj.positions[:, ion].mean()
    secular = uniform_filter1d(z, size=width, mode='nearest')
    inner = slice(width, z.size - width)
    t = traj.times[inner]
    sec = secular[inner]
    if not np.any(sec != 0):
        raise InsufficientDataError('micromotion_ratio: no secular motion to compare with.')
    basis = np.column_stack([sec * np.cos(trap.omega_rf * t), sec * np.sin(trap.omega_rf * t)])
    coef = np.linalg.lstsq(basis, z[inner] - sec, rcond=None)[0]
    return float(np.hypot(*coef))


def mode_coordinates(traj: Trajectory, crystal: CrystalConfig, omega_z: float,
                     center: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Mass-weighted normal-mode coordinates and velocities, shape (n_samples, n_modes),
    and the mode frequencies. Displacements are taken from center (default: equilibrium).
    """
    freqs, vecs = normal_modes(crystal, omega_z)
    if center is None:
        center = equilibrium_positions(crystal, omega_z)
    sqrt_m = np.sqrt(crystal.masses)
    q = ((traj.positions - center) * sqrt_m) @ vecs
    p = (traj.velocities * sqrt_m) @ vecs
    return q, p, freqs


def com_energy(traj: Trajectory, crystal: CrystalConfig, omega_z: float) -> np.ndarray:
    """
    Energy (J) in the lowest (in-phase) axial mode.
    """
    q, p, freqs = mode_coordinates(traj, crystal, omega_z)
    return 0.5 * (p[:, 0]**2 + freqs[0]**2 * q[:, 0]**2)


def ensemble_stats(trajs: Sequence[Trajectory],
                   crystal: CrystalConfig,
                   trap: TrapConfig,
                   settle_fraction: float = 0.5,
                   omega_dip: float = 0.0) -> EnsembleStats:
    """
    Variances, equipartition temperatures and COM heating of an ensemble.

    :param trajs:           At least two members of the same configuration.
    :param crystal:         Crystal they were simulated with.
    :param trap:            Trap they were simulated with.
    :param settle_fraction: Fraction of each run discarded before the variance estimates.
    :param omega_dip:       If positive, also estimate the coherent amplitude at this frequency.
    """
    if len(trajs) < 2:
        raise InsufficientDataError(f'ensemble_stats: need at least 2 trajectories, got {len(trajs)}.')
    ids = {tr.config_id for tr in trajs}
    if len(ids) > 1:
        raise ConfigMismatchError('ensemble_stats: trajectories come from different configurations.')

    omega_z = secular_frequency(trap)
    win = _window(trajs[0], settle_fraction)
    center = np.mean([tr.positions[win].mean(axis=0) for tr in trajs], axis=0)

    per_ion = np.array([((tr.positions[win] - center)**2).mean(axis=0) for tr in trajs])
    modes = [mode_coordinates(tr, crystal, omega_z, center)[0][win] for tr in trajs]
    per_mode = np.array([(q**2).mean(axis=0) for q in modes])
    freqs = normal_modes(crystal, omega_z)[0]
    n = len(trajs)

    com = per_mode[:, 0] / crystal.reference.mass
    energy = np.mean([com_energy(tr, crystal, omega_z) for tr in trajs], axis=0)
    rate = float(np.polyfit(trajs[0].times, energy, 1)[0])

    rho, rho_err = (ensemble_amplitude(trajs, omega_dip, settle_fraction) if omega_dip > 0 else (0.0, 0.0))
    return EnsembleStats(
        sigma2=per_ion.mean(axis=0),
        sigma2_err=per_ion.std(axis=0, ddof=1) / np.sqrt(n),
        temperature=freqs**2 * per_mode.mean(axis=0) / BOLTZMANN,
        mode_frequencies=freqs,
        sigma2_com=float(com.mean()),
        sigma2_com_err=float(com.std(ddof=1) / np.sqrt(n)),
        rho_max=rho,
        rho_max_err=rho_err,
        com_energy_rate=rate,
    )


def lobe_distinguishability(profile: AxialProfile) -> float:
    """
    Depth of the valley between the two strongest lobes relative to their mean height;
    1 for fully separated lobes, 0 for a single lobe.
    """
    counts = np.asarray(profile.counts, dtype=float)
    top = int(np.argmax(counts))
    if counts[top] <= 0:
        return 0.0
    floor = max(0.02 * counts[top], 2 * float(np.asarray(profile.uncertainties)[top]))
    peaks, props = find_peaks(counts, prominence=floor)
    if peaks.size < 2:
        return 0.0
    best = np.sort(peaks[np.argsort(props['prominences'])[-2:]])
    valley = counts[best[0]:best[1] + 1].min()
    height = counts[best].mean()
    return float(np.clip((height - valley) / height, 0.0, 1.0))
