"""
Command-line interface
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from dataclasses import replace
from logging import getLogger
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .config import KHZ, ExperimentConfig, load_config
from .dynamics import ensemble_amplitude, ensemble_stats, lobe_distinguishability, simulate, simulate_ensemble
from .errors import ConfigError, ConfigMismatchError, IonTrapError, NumericalError
from .fitting import (NoiseSweep, ResonanceScan, detect_plateau, fit_noise_line, fit_profile_single,
                      fit_profile_thermal, fit_profile_two_ion, fit_resonance, zeta_from_slope)
from .helper import _config_id
from .imaging import (AxialProfile, ProfileParams, expected_image, profile_driven_closed, profile_fwhm,
                      project_axial, render_image, trajectory_density)
from .physics import (CrystalConfig, HeatingModel, IonSpecies, crystal_response, doppler_limit_temperature,
                      equilibrium_positions, equilibrium_separation, heating_rate_com, heating_rate_single,
                      normal_modes, secular_frequency, secular_frequency_series, two_ion_eigenfrequencies,
                      zeta_from_calibration)
from .util import RunManifest, read_profile_csv, write_csv, write_image_csv, write_json, write_pgm

_log = getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

COMMANDS = ('modes', 'scan', 'noise-sweep', 'predict-spectrum', 'fit', 'render')
FIT_MODELS = {'single': fit_profile_single, 'two-ion': fit_profile_two_ion, 'thermal': fit_profile_thermal}

# Trajectories used for the time-averaged profile of a noise level.
_PROFILE_MEMBERS = 4


class Run:
    """Output directory of one command with its manifest."""

    def __init__(self, command: str, run_dir: Path, config_hash: str, seed: int, force: bool):
        if (run_dir / 'manifest.json').exists() and not force:
            raise ConfigError(f'{command}: {run_dir} holds a previous run, use --force to overwrite.')
        run_dir.mkdir(parents=True, exist_ok=True)
        self.dir = run_dir
        self.manifest = RunManifest(command=command, config_hash=config_hash, version=__version__, seed=seed)

    def path(self, name: str) -> Path:
        path = self.dir / name
        self.manifest.add(path)
        return path

    def finish(self) -> Path:
        return self.manifest.write(self.dir)

    def __enter__(self) -> Run:
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc is not None:
            self.manifest.status = 'failed'
            self.manifest.error = str(exc)
            _log.warning('%s: run failed, the manifest in %s records the error.', self.manifest.command, self.dir)
        self.finish()


def _open_run(command: str, cfg: ExperimentConfig, args: argparse.Namespace) -> Run:
    out = Path(args.out) if args.out else Path(cfg.output_root) / f'{command}-{cfg.config_hash[:12]}'
    run = Run(command, out, cfg.config_hash, cfg.seed, args.force)
    write_json(run.path('config.json'), cfg.to_dict())
    if args.config:
        shutil.copyfile(args.config, run.path('config.ini'))
    return run


def _point_context(label: str, func: Callable[[], Any]) -> Any:
    try:
        return func()
    except IonTrapError as err:
        raise type(err)(f'{label}: {err}') from err


def cmd_modes(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    """
    Secular frequency, ion separation, normal modes, two-ion eigenfrequencies and heating rates.
    """
    with _open_run('modes', cfg, args) as run:
        ref = cfg.crystal.reference
        omega_z = secular_frequency(cfg.trap)
        omega_ref = cfg.analysis.omega_ref or omega_z
        freqs, vecs = normal_modes(cfg.crystal, omega_z)

        s_e = cfg.noise.force_psd / ref.charge**2
        single = heating_rate_single(ref, omega_z, s_e)
        report: dict[str, Any] = {
            'omega_z': omega_z,
            'f_z_hz': omega_z / (2 * np.pi),
            'f_z_series_hz': secular_frequency_series(cfg.trap) / (2 * np.pi),
            'adiabatic': cfg.trap.is_adiabatic,
            'separation_m': equilibrium_separation(ref, omega_z),
            'positions_m': equilibrium_positions(cfg.crystal, omega_z),
            'mode_f_hz': freqs / (2 * np.pi),
            'mode_vectors': vecs,
            'omega_ref': omega_ref,
            'eigenfrequencies': [],
            'heating_rate_single_per_s': single,
            'heating_rate_com_per_s': heating_rate_com(cfg.crystal.n_ions, single),
        }
        for mu in sorted({1.0, cfg.analysis.mu}):
            lo, hi = two_ion_eigenfrequencies(mu, omega_ref)
            report['eigenfrequencies'].append({'mu': mu, 'f_minus_hz': lo / (2 * np.pi), 'f_plus_hz': hi / (2 * np.pi),
                                               'minus_over_ref': lo / omega_ref, 'plus_over_ref': hi / omega_ref})
        if cfg.crystal.gamma_z > 0:
            model = HeatingModel(s_e=s_e, zeta=zeta_from_calibration(ref, cfg.noise.psd_per_v2))
            report['doppler_temperature_k'] = doppler_limit_temperature(model, cfg.crystal.gamma_z, cfg.noise.v_noise)

        print(f"f_z          {report['f_z_hz'] / 1e3:12.4f} kHz (series {report['f_z_series_hz'] / 1e3:.4f} kHz)")
        print(f"separation   {report['separation_m'] * 1e6:12.4f} um")
        for i, f in enumerate(report['mode_f_hz']):
            print(f'mode {i}       {f / 1e3:12.4f} kHz')
        for row in report['eigenfrequencies']:
            print(f"mu {row['mu']:<9.6g} Omega- {row['f_minus_hz'] / 1e3:10.4f} kHz  "
                  f"Omega+ {row['f_plus_hz'] / 1e3:10.4f} kHz")
        print(f"heating      {single:12.6g} quanta/s (COM {report['heating_rate_com_per_s']:.6g})")
        write_json(run.path('modes.json'), report)
    return EXIT_OK


def cmd_scan(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    """
    Simulated resonance scan of the reference ion, fitted with the driven-oscillator response.
    """
    if cfg.scan is None:
        raise ConfigError('scan: the configuration has no [scan] section.')
    with _open_run('scan', cfg, args) as run:
        omegas = cfg.scan.frequencies
        rho = np.empty(omegas.size)
        err = np.empty(omegas.size)
        for i, w in enumerate(omegas):
            drive = replace(cfg.drive, omega_dip=float(w))

            def point() -> tuple[float, float]:
                trajs = simulate_ensemble(cfg.crystal, cfg.trap, drive, cfg.noise, cfg.sim, key=(i,))
                return ensemble_amplitude(trajs, w, cfg.sim.settle_fraction)

            rho[i], err[i] = _point_context(f'scan: point {i} ({w / (2 * np.pi):.6g} Hz)', point)
            _log.info('scan: %.6g Hz rho %.4g m', w / (2 * np.pi), rho[i])

        write_csv(run.path('scan.csv'), ('f_hz', 'rho_m', 'rho_err_m'), (omegas / (2 * np.pi), rho, err))
        scan = ResonanceScan(omegas, rho, err if np.all(err > 0) else None)
        fit = fit_resonance(scan, cfg.crystal.reference.mass)
        write_json(run.path('fit.json'), fit.to_dict())
        print(f"f_z {fit['omega_z'] / (2 * np.pi):.6g} +- {fit.error('omega_z') / (2 * np.pi):.3g} Hz, "
              f"gamma_z {fit['gamma_z']:.6g} +- {fit.error('gamma_z'):.3g} 1/s")
    return EXIT_OK


def cmd_noise_sweep(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    """
    COM variance against noise intensity, its linear fit and plateau segmentation.
    """
    if cfg.sweep is None:
        raise ConfigError('noise-sweep: the configuration has no [sweep] section.')
    if cfg.sim.ensemble_size < 2:
        raise ConfigError('noise-sweep: [sim] ensemble_size must be >= 2.')
    with _open_run('noise-sweep', cfg, args) as run:
        crystal = cfg.crystal
        omega_z = secular_frequency(cfg.trap)
        lobes = crystal.n_ions == 2 and cfg.optics is not None
        center = float(np.mean(equilibrium_positions(crystal, omega_z)))

        v2 = np.array(cfg.sweep.v2)
        rows: dict[str, list[float]] = {'sigma2': [], 'err': [], 'temp': [], 'dist': []}
        per_ion = []
        for i, level in enumerate(v2):
            noise = replace(cfg.noise, v_noise=float(np.sqrt(level)))

            def point():
                trajs = simulate_ensemble(crystal, cfg.trap, cfg.drive, noise, cfg.sim, key=(i,))
                return trajs, ensemble_stats(trajs, crystal, cfg.trap, cfg.sim.settle_fraction)

            trajs, stats = _point_context(f'noise-sweep: level {i} ({level:.6g} V^2)', point)
            rows['sigma2'].append(stats.sigma2_com)
            rows['err'].append(stats.sigma2_com_err)
            rows['temp'].append(float(stats.temperature[0]))
            per_ion.append(stats.sigma2)
            if lobes:
                densities = [trajectory_density(tr, cfg.optics.lorentzian_fwhm, cfg.sim.settle_fraction)
                             for tr in trajs[:_PROFILE_MEMBERS]]
                image = expected_image(lambda z: sum(d(z) for d in densities) / len(densities), cfg.optics, center)
                rows['dist'].append(lobe_distinguishability(project_axial(image, cfg.optics, center)))
            _log.info('noise-sweep: %.6g V^2 sigma2 %.4g m^2', level, stats.sigma2_com)

        header = ['v2_v2', 'sigma2_m2', 'sigma2_err_m2']
        columns = [v2, rows['sigma2'], rows['err']]
        per_ion = np.array(per_ion)
        for k in range(crystal.n_ions):
            header.append(f'sigma2_ion{k + 1}_m2')
            columns.append(per_ion[:, k])
        header.append('temperature_k')
        columns.append(rows['temp'])
        if lobes:
            header.append('distinguishability')
            columns.append(rows['dist'])
        write_csv(run.path('sweep.csv'), header, columns)

        err = np.array(rows['err'])
        sweep = NoiseSweep(v2, np.array(rows['sigma2']), err if np.all(err > 0) else None)
        fit = fit_noise_line(sweep, cfg.analysis.window)
        if crystal.gamma_z > 0:
            zeta = zeta_from_slope(fit['c1'], crystal.reference.mass, omega_z, crystal.gamma_z)
            fit.derived['zeta'] = (zeta, zeta * fit.error('c1') / abs(fit['c1']) if fit['c1'] else 0.0)
        write_json(run.path('fit.json'), fit.to_dict())
        print(f"slope {fit['c1']:.6g} +- {fit.error('c1'):.3g} m^2/V^2, R^2 {fit.derived['r_squared'][0]:.5f}")

        if v2.size >= 12:
            plateau = detect_plateau(sweep)
            write_json(run.path('plateau.json'), plateau)
            print(f'plateau: {plateau.message}')
        else:
            _log.warning('noise-sweep: %d levels, plateau detection needs 12.', v2.size)
    return EXIT_OK


def cmd_predict_spectrum(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    """
    Predicted amplitude and profile width of the reference ion against drive frequency,
    for an equal-mass crystal and for a crystal with mass ratio mu.
    """
    with _open_run('predict-spectrum', cfg, args) as run:
        ref = cfg.crystal.reference
        mu = cfg.analysis.mu
        omega_ref = cfg.analysis.omega_ref or secular_frequency(cfg.trap)
        gamma_psf = cfg.optics.lorentzian_fwhm if cfg.optics is not None else 6e-6
        if cfg.scan is not None:
            omegas = cfg.scan.frequencies
        else:
            omegas = np.linspace(0.3, 2.0, 401) * omega_ref
        if cfg.drive.f_e == 0:
            _log.warning('predict-spectrum: [drive] force is zero, all amplitudes vanish.')

        partner = IonSpecies(mass=mu * ref.mass, charge=ref.charge, label=f'mu={mu:g}', laser_cooled=mu == 1)
        crystals = {
            'ref': CrystalConfig((ref, ref), cfg.crystal.gamma_z),
            'mu': CrystalConfig((ref, partner), cfg.crystal.gamma_z),
        }
        columns = [omegas / (2 * np.pi)]
        for crystal in crystals.values():
            rho = np.abs(crystal_response(crystal, omega_ref, omegas, cfg.drive.f_e)[:, 0])
            widths = []
            for r in rho:
                grid = np.linspace(-(r + 10 * gamma_psf), r + 10 * gamma_psf, 4001)
                widths.append(profile_fwhm(lambda z: profile_driven_closed(ProfileParams(gamma_psf, 0.0, r), z), grid))
            columns += [rho, np.array(widths)]
        write_csv(run.path('spectrum.csv'), ('f_hz', 'rho_ref_m', 'width_ref_m', 'rho_m', 'width_m'), columns)

        lo, hi = two_ion_eigenfrequencies(mu, omega_ref)
        write_json(run.path('spectrum.json'), {
            'mu': mu, 'omega_ref': omega_ref, 'f_ref_hz': omega_ref / (2 * np.pi),
            'f_minus_hz': lo / (2 * np.pi), 'f_plus_hz': hi / (2 * np.pi),
            'lorentzian_fwhm_m': gamma_psf, 'f_e': cfg.drive.f_e, 'gamma_z': cfg.crystal.gamma_z,
        })
        print(f'mu {mu:.6g}: Omega- {lo / KHZ:.4f} kHz, Omega+ {hi / KHZ:.4f} kHz (ref {omega_ref / KHZ:.4f} kHz)')
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    """
    Fits a profile CSV with one of the profile models.
    """
    path = Path(args.profile)
    z, density, err = read_profile_csv(path)
    profile = AxialProfile(z, density, err)
    config_hash = _config_id({'input': path.read_bytes().hex(), 'model': args.model})
    out = Path(args.out) if args.out else path.parent
    if (out / 'fit.json').exists() and not args.force:
        raise ConfigError(f'fit: {out / "fit.json"} exists, use --force to overwrite.')
    with Run('fit', out, config_hash, 0, force=True) as run:
        fit = FIT_MODELS[args.model](profile)
        fit.config['input'] = str(path)
        write_json(run.path('fit.json'), fit.to_dict())
        write_csv(run.path('residuals.csv'), ('z_m', 'residual'), (z, fit.residuals))
        for name in fit.params:
            print(f'{name:8s} {fit[name]:.8g} +- {fit.error(name):.3g}')
        for name, (value, sigma) in fit.derived.items():
            print(f'{name:8s} {value:.8g} +- {sigma:.3g}')
        print(f'chi2/dof {fit.chi2_per_dof:.4g}')
    return EXIT_OK


def cmd_render(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    """
    Seeded synthetic camera frame of the simulated crystal, its axial projection and a fit of the
    projection with [analysis] profile_model.
    """
    if cfg.optics is None:
        raise ConfigError('render: the configuration has no [optics] section.')
    with _open_run('render', cfg, args) as run:
        omega_z = secular_frequency(cfg.trap)
        center = float(np.mean(equilibrium_positions(cfg.crystal, omega_z)))

        traj = simulate(cfg.crystal, cfg.trap, cfg.drive, cfg.noise, cfg.sim, key=(0,))
        density = trajectory_density(traj, cfg.optics.lorentzian_fwhm, cfg.sim.settle_fraction)
        image = render_image(density, cfg.optics, cfg.seed, key=(1,), center=center)
        profile = project_axial(image, cfg.optics, center)

        write_pgm(run.path('image.pgm'), image)
        write_image_csv(run.path('image.csv'), image)
        write_csv(run.path('profile.csv'), ('z_m', 'density', 'density_err'),
                  (profile.bin_centers, profile.counts, profile.uncertainties))
        summary = {
            'total_counts': int(image.sum()),
            'fwhm_m': profile_fwhm(profile.counts, profile.bin_centers),
            'distinguishability': lobe_distinguishability(profile) if cfg.crystal.n_ions == 2 else None,
        }
        model = cfg.analysis.profile_model or ('two-ion' if cfg.crystal.n_ions == 2 else 'single')
        summary['profile_model'] = model
        try:
            fit = FIT_MODELS[model](profile, strict=False)
        except NumericalError as err:
            _log.warning('render: the %s fit of the projected profile failed: %s', model, err)
            summary['chi2_per_dof'] = None
        else:
            write_json(run.path('fit.json'), fit.to_dict())
            summary['chi2_per_dof'] = fit.chi2_per_dof
        write_json(run.path('render.json'), summary)
        print(f"{summary['total_counts']} counts, FWHM {summary['fwhm_m'] * 1e6:.3f} um")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--out', help='Output directory (default: <output root>/<command>-<config hash>).')
    common.add_argument('--force', action='store_true', help='Overwrite a previous run in the output directory.')
    common.add_argument('-v', '--verbose', action='count', default=0, help='-v for progress, -vv for numerics.')

    configured = argparse.ArgumentParser(add_help=False)
    configured.add_argument('--config', required=True, help='Experiment configuration file.')
    configured.add_argument('--seed', type=int, help='Master seed, overrides [run] seed.')
    configured.add_argument('--n-jobs', type=int, dest='n_jobs', help='Worker processes, overrides [sim] n_jobs.')

    p = argparse.ArgumentParser(prog='iontrap', description='Trapped-ion axial motion simulator and analysis.')
    p.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = p.add_subparsers(dest='command', required=True)
    sub.add_parser('modes', parents=[common, configured], help='Frequencies, separation and heating rates.')
    sub.add_parser('scan', parents=[common, configured], help='Simulated resonance scan and fit.')
    sub.add_parser('noise-sweep', parents=[common, configured], help='Variance against noise intensity.')
    sub.add_parser('predict-spectrum', parents=[common, configured], help='Mixed-crystal motional spectrum.')
    sub.add_parser('render', parents=[common, configured], help='Synthetic camera frame and projection.')
    fit = sub.add_parser('fit', parents=[common], help='Fit a profile CSV.')
    fit.add_argument('profile', help="CSV with columns 'z_m,density[,density_err]'.")
    fit.add_argument('--model', choices=sorted(FIT_MODELS), default='single')
    return p


def _configure(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError('iontrap: --seed must be a 64-bit unsigned integer.')
        cfg = cfg.with_seed(args.seed)
    if args.n_jobs is not None:
        cfg = replace(cfg, sim=replace(cfg.sim, n_jobs=args.n_jobs))
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=max(logging.WARNING - 10 * args.verbose, logging.DEBUG),
                        format='%(levelname)s %(name)s: %(message)s')
    handlers = {
        'modes': cmd_modes,
        'scan': cmd_scan,
        'noise-sweep': cmd_noise_sweep,
        'predict-spectrum': cmd_predict_spectrum,
        'render': cmd_render,
    }
    try:
        if args.command == 'fit':
            return cmd_fit(args)
        return handlers[args.command](_configure(args), args)
    except (ConfigError, ConfigMismatchError) as err:
        print(f'error: {err}', file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ZeroDivisionError) as err:
        print(f'error: {err}', file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as err:
        print(f'error: {err}', file=sys.stderr)
        return EXIT_IO


if __name__ == '__main__':
    sys.exit(main())
