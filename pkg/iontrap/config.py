"""
Experiment configuration files
"""

from __future__ import annotations

import configparser
import os
import re
from dataclasses import dataclass, field, replace
from logging import getLogger
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .dynamics import DriveSpec, NoiseSpec, SimConfig
from .errors import ConfigError, InputError, UnstableTrapError
from .helper import _config_id
from .imaging import OpticsConfig
from .physics import CrystalConfig, IonSpecies, TrapConfig, mathieu_frequency

_log = getLogger(__name__)

OUTPUT_ROOT_ENV = 'IONTRAP_OUTPUT_ROOT'

KHZ = 2 * np.pi * 1e3
MHZ = 2 * np.pi * 1e6

# Allowed keys per section; values are in the unit named by the key suffix.
SCHEMA: dict[str, tuple[str, ...]] = {
    'run': ('seed', 'output_root', 'label'),
    'trap': ('rf_mhz', 'q_z', 'a_z', 'secular_khz', 'v_rf_v', 'u_dc_v', 'geometry_q_per_v', 'geometry_a_per_v'),
    'crystal': ('species', 'gamma_z_per_s'),
    'drive': ('force_n', 'amplitude_mv', 'force_per_mv_n', 'frequency_khz', 'phase_rad'),
    'noise': ('v_noise_mv', 'psd_per_mv2', 'correlation'),
    'optics': ('gamma_um', 'magnification', 'pixel_um', 'photon_rate_per_s', 'exposure_ms',
               'n_pixels_axial', 'n_pixels_radial'),
    'sim': ('duration_ms', 'dt_ns', 'mode', 'ensemble_size', 'record_stride', 'settle_fraction', 'n_jobs'),
    'analysis': ('mu', 'omega_ref_khz', 'window_low_mv2', 'window_high_mv2', 'profile_model'),
    'scan': ('f_start_khz', 'f_stop_khz', 'n_points'),
    'sweep': ('v2_mv2',),
}

PROFILE_MODELS = ('single', 'two-ion', 'thermal')


@dataclass(frozen=True)
class AnalysisConfig:
    """
    :param mu:              Mass ratio for spectrum predictions.
    :param omega_ref:       COM frequency of the equal-mass crystal (rad/s), None for the trap's secular frequency.
    :param window:          V^2 window of the noise line fit (V^2).
    :param profile_model:   Model fitted to rendered profiles, None for single or two-ion by crystal size.
    """
    mu: float = 1.0
    omega_ref: float | None = None
    window: tuple[float, float] | None = None
    profile_model: str | None = None

    def __post_init__(self):
        if not self.mu > 0:
            raise ConfigError('AnalysisConfig: mu must be positive.')
        if self.omega_ref is not None and not self.omega_ref > 0:
            raise ConfigError('AnalysisConfig: omega_ref must be positive.')
        if self.window is not None and not self.window[0] < self.window[1]:
            raise ConfigError('AnalysisConfig: window low must be below window high.')
        if self.profile_model is not None and self.profile_model not in PROFILE_MODELS:
            raise ConfigError(f"AnalysisConfig: profile_model must be one of {PROFILE_MODELS}.")


@dataclass(frozen=True)
class ScanConfig:
    """Drive frequencies (rad/s) of a resonance scan."""
    omega_start: float
    omega_stop: float
    n_points: int = 25

    def __post_init__(self):
        if not 0 < self.omega_start < self.omega_stop:
            raise ConfigError('ScanConfig: need 0 < start < stop.')
        if self.n_points < 2:
            raise ConfigError('ScanConfig: n_points must be >= 2.')

    @property
    def frequencies(self) -> np.ndarray:
        return np.linspace(self.omega_start, self.omega_stop, self.n_points)


@dataclass(frozen=True)
class SweepConfig:
    """Squared noise amplitudes (V^2) of a noise sweep."""
    v2: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, 'v2', tuple(float(v) for v in self.v2))
        if not self.v2:
            raise ConfigError('SweepConfig: the v2 list is empty.')
        if any(v < 0 for v in self.v2):
            raise ConfigError('SweepConfig: v2 values must be >= 0.')


@dataclass(frozen=True)
class ExperimentConfig:
    trap: TrapConfig
    crystal: CrystalConfig
    drive: DriveSpec
    noise: NoiseSpec
    sim: SimConfig
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    optics: OpticsConfig | None = None
    scan: ScanConfig | None = None
    sweep: SweepConfig | None = None
    seed: int = 0
    output_root: str = 'runs'
    label: str = ''

    def with_seed(self, seed: int) -> ExperimentConfig:
        return replace(self, seed=seed, sim=replace(self.sim, seed=seed))

    def to_dict(self) -> dict[str, Any]:
        return {
            'trap': self.trap, 'crystal': self.crystal, 'drive': self.drive, 'noise': self.noise,
            'sim': replace(self.sim, n_jobs=1), 'analysis': self.analysis, 'optics': self.optics, 'scan': self.scan,
            'sweep': self.sweep, 'seed': self.seed, 'label': self.label,
        }

    @property
    def config_hash(self) -> str:
        return _config_id(self.to_dict())


def _line_numbers(text: str) -> dict[tuple[str, str], int]:
    """Maps (section, key) and (section, '') to the line they appear on."""
    lines: dict[tuple[str, str], int] = {}
    section = ''
    for n, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped[0] in '#;':
            continue
        head = re.match(r'^\[([^\]]+)\]', stripped)
        if head:
            section = head.group(1).strip()
            lines[(section, '')] = n
            continue
        key = re.split(r'[=:]', stripped, maxsplit=1)[0].strip().lower()
        lines.setdefault((section, key), n)
    return lines


class _Section:
    """Typed access to one config section with line-numbered diagnostics."""

    def __init__(self, parser: configparser.ConfigParser, name: str, lines: dict[tuple[str, str], int]):
        self.name = name
        self.values = dict(parser[name]) if parser.has_section(name) else {}
        self.lines = lines

    def where(self, key: str = '') -> str:
        line = self.lines.get((self.name, key)) or self.lines.get((self.name, ''))
        loc = f'[{self.name}] {key}'.rstrip()
        return f'{loc} (line {line})' if line else loc

    def has(self, key: str) -> bool:
        return key in self.values

    def _get(self, key: str, default: Any, conv: Callable[[str], Any], kind: str) -> Any:
        if key not in self.values:
            return default
        raw = self.values[key].strip()
        try:
            return conv(raw)
        except ValueError:
            raise ConfigError(f"load_config: {self.where(key)}: cannot parse '{raw}' as {kind}.") from None

    def float(self, key: str, default: float | None = None) -> float | None:
        return self._get(key, default, float, 'a number')

    def int(self, key: str, default: int | None = None) -> int | None:
        return self._get(key, default, int, 'an integer')

    def str(self, key: str, default: str | None = None) -> str | None:
        return self._get(key, default, str, 'text')

    def floats(self, key: str) -> list[float] | None:
        return self._get(key, None, lambda s: [float(v) for v in s.replace(';', ',').split(',') if v.strip()],
                         'a comma-separated list of numbers')


def _build(section: _Section, factory: Callable[..., Any], **kwargs: Any) -> Any:
    try:
        return factory(**kwargs)
    except ConfigError as err:
        raise type(err)(f'load_config: {section.where()}: {err}') from None


def _trap(s: _Section) -> TrapConfig:
    omega_rf = s.float('rf_mhz')
    if omega_rf is None:
        raise ConfigError(f'load_config: {s.where()}: rf_mhz is required.')
    omega_rf *= MHZ
    if s.has('v_rf_v'):
        if s.has('q_z') or s.has('a_z') or s.has('secular_khz'):
            raise ConfigError(f'load_config: {s.where("v_rf_v")}: give either voltages or Mathieu parameters.')
        gq, ga = s.float('geometry_q_per_v'), s.float('geometry_a_per_v', 0.0)
        if gq is None:
            raise ConfigError(f'load_config: {s.where("v_rf_v")}: geometry_q_per_v is required with voltages.')
        trap = _build(s, TrapConfig.from_voltages, omega_rf=omega_rf, v_rf=s.float('v_rf_v'),
                      u_dc=s.float('u_dc_v', 0.0), geometry_q=gq, geometry_a=ga)
    else:
        q = s.float('q_z')
        if q is None:
            raise ConfigError(f'load_config: {s.where()}: q_z is required.')
        if s.has('a_z') and s.has('secular_khz'):
            raise ConfigError(f'load_config: {s.where("secular_khz")}: give either a_z or secular_khz.')
        if s.has('secular_khz'):
            a = (2 * s.float('secular_khz') * KHZ / omega_rf)**2 - q * q / 2
        else:
            a = s.float('a_z', 0.0)
        trap = _build(s, TrapConfig, omega_rf=omega_rf, q_z=q, a_z=a)
    if not trap.is_confining:
        raise UnstableTrapError(f'load_config: {s.where()}: a_z + q_z^2/2 = {trap.a_z + trap.q_z**2 / 2:.6g} '
                                'gives no axial confinement.')
    return trap


def _crystal(s: _Section) -> CrystalConfig:
    labels = [v.strip() for v in s.str('species', 'Ca40+').split(',') if v.strip()]
    species = []
    for label in labels:
        try:
            species.append(IonSpecies.from_label(label))
        except ConfigError as err:
            raise ConfigError(f'load_config: {s.where("species")}: {err}') from None
    return _build(s, CrystalConfig, species=tuple(species), gamma_z=s.float('gamma_z_per_s', 0.0))


def _drive(s: _Section) -> DriveSpec:
    if s.has('force_n') and s.has('amplitude_mv'):
        raise ConfigError(f'load_config: {s.where("amplitude_mv")}: give either force_n or amplitude_mv.')
    if s.has('amplitude_mv'):
        per_mv = s.float('force_per_mv_n')
        if per_mv is None:
            raise ConfigError(f'load_config: {s.where("amplitude_mv")}: force_per_mv_n is required.')
        force = s.float('amplitude_mv') * per_mv
    else:
        force = s.float('force_n', 0.0)
    return _build(s, DriveSpec, f_e=force, omega_dip=s.float('frequency_khz', 0.0) * KHZ,
                  phase=s.float('phase_rad', 0.0))


def _noise(s: _Section) -> NoiseSpec:
    v = s.float('v_noise_mv', 0.0)
    return _build(s, NoiseSpec, v_noise=v * 1e-3, psd_per_v2=s.float('psd_per_mv2', 0.0) * 1e6,
                  correlation=s.str('correlation', 'correlated'))


def _optics(s: _Section) -> OpticsConfig | None:
    if not s.values:
        return None
    gamma = s.float('gamma_um')
    if gamma is None:
        raise ConfigError(f'load_config: {s.where()}: gamma_um is required.')
    return _build(s, OpticsConfig, lorentzian_fwhm=gamma * 1e-6, magnification=s.float('magnification', 6.75),
                  pixel_size_effective=s.float('pixel_um', 2.4) * 1e-6,
                  photon_rate=s.float('photon_rate_per_s', 1e4), exposure=s.float('exposure_ms', 1000.0) * 1e-3,
                  n_pixels_axial=s.int('n_pixels_axial', 64), n_pixels_radial=s.int('n_pixels_radial', 16))


def _sim(s: _Section, seed: int) -> SimConfig:
    dt = s.float('dt_ns')
    return _build(s, SimConfig, duration=s.float('duration_ms', 100.0) * 1e-3,
                  dt=dt * 1e-9 if dt is not None else None, seed=seed, mode=s.str('mode', 'secular'),
                  ensemble_size=s.int('ensemble_size', 1), record_stride=s.int('record_stride', 1),
                  settle_fraction=s.float('settle_fraction', 0.5), n_jobs=s.int('n_jobs', 1))


def _analysis(s: _Section) -> AnalysisConfig:
    ref = s.float('omega_ref_khz')
    lo, hi = s.float('window_low_mv2'), s.float('window_high_mv2')
    if (lo is None) != (hi is None):
        raise ConfigError(f'load_config: {s.where()}: give both window_low_mv2 and window_high_mv2.')
    return _build(s, AnalysisConfig, mu=s.float('mu', 1.0), omega_ref=ref * KHZ if ref is not None else None,
                  window=(lo * 1e-6, hi * 1e-6) if lo is not None else None,
                  profile_model=s.str('profile_model'))


def _scan(s: _Section) -> ScanConfig | None:
    if not s.values:
        return None
    start, stop = s.float('f_start_khz'), s.float('f_stop_khz')
    if start is None or stop is None:
        raise ConfigError(f'load_config: {s.where()}: f_start_khz and f_stop_khz are required.')
    return _build(s, ScanConfig, omega_start=start * KHZ, omega_stop=stop * KHZ, n_points=s.int('n_points', 25))


def _sweep(s: _Section) -> SweepConfig | None:
    if not s.values:
        return None
    values = s.floats('v2_mv2')
    if values is None:
        raise ConfigError(f'load_config: {s.where()}: v2_mv2 is required.')
    return _build(s, SweepConfig, v2=tuple(v * 1e-6 for v in values))


def parse_config(text: str, source: str = '<string>') -> ExperimentConfig:
    """
    Parses and validates a configuration. Every section and key is checked before anything is computed.
    """
    parser = configparser.ConfigParser(strict=True, interpolation=None, default_section='__defaults__')
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as err:
        raise InputError(f'load_config: {source} line {err.lineno}: key outside of a section.') from None
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as err:
        raise InputError(f'load_config: {source} line {err.lineno}: {err.message}.') from None
    except configparser.ParsingError as err:
        lineno = err.errors[0][0] if err.errors else '?'
        raise InputError(f'load_config: {source} line {lineno}: cannot parse.') from None

    lines = _line_numbers(text)
    for name in parser.sections():
        if name not in SCHEMA:
            raise ConfigError(f"load_config: {source} line {lines.get((name, ''), '?')}: unknown section "
                              f"[{name}], expected one of {sorted(SCHEMA)}.")
        for key in parser[name]:
            if key not in SCHEMA[name]:
                raise ConfigError(f"load_config: {source} line {lines.get((name, key), '?')}: unknown key "
                                  f"'{key}' in [{name}].")

    sections = {name: _Section(parser, name, lines) for name in SCHEMA}
    run = sections['run']
    seed = run.int('seed', 0)
    if not 0 <= seed < 2**64:
        raise ConfigError(f'load_config: {run.where("seed")}: seed must be a 64-bit unsigned integer.')

    trap = _trap(sections['trap'])
    cfg = ExperimentConfig(
        trap=trap,
        crystal=_crystal(sections['crystal']),
        drive=_drive(sections['drive']),
        noise=_noise(sections['noise']),
        sim=_sim(sections['sim'], seed),
        analysis=_analysis(sections['analysis']),
        optics=_optics(sections['optics']),
        scan=_scan(sections['scan']),
        sweep=_sweep(sections['sweep']),
        seed=seed,
        output_root=run.str('output_root', os.environ.get(OUTPUT_ROOT_ENV, 'runs')),
        label=run.str('label', ''),
    )
    _log.info('load_config: %s, secular frequency %.6g kHz', source,
              mathieu_frequency(trap.omega_rf, trap.a_z, trap.q_z) / KHZ)
    return cfg


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        raise InputError(f'load_config: {path} is empty.')
    return parse_config(text, str(path))
