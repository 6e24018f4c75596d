"""
Physical constants and the built-in ion species table
"""

from __future__ import annotations

from math import pi

# CODATA 2018, pinned so results do not move with the installed scipy release.
ELEMENTARY_CHARGE = 1.602176634e-19  # C (exact)
EPSILON_0 = 8.8541878128e-12  # F/m
HBAR = 1.054571817e-34  # J s
BOLTZMANN = 1.380649e-23  # J/K (exact)
ATOMIC_MASS = 1.66053906660e-27  # kg
ELECTRON_MASS_U = 5.48579909065e-4  # u

COULOMB_K = 1.0 / (4.0 * pi * EPSILON_0)

# Atomic masses (u) of the neutral atoms; singly charged ions lose one electron.
_ATOMIC_MASS_U = {
    'Ca40': 39.962590863,
    'Ho163': 162.928734,
    'Re187': 186.9557501,
    'Os187': 186.9557474,
}

# Species that scatter photons on the cooling transition.
_LASER_COOLED = {'Ca40'}


def ion_mass_u(label: str, charge_state: int = 1) -> float:
    """
    Mass in u of an ion from the built-in table.

    :param label:           Isotope label, with or without a trailing '+' (e.g. 'Ca40+', 'Re187').
    :param charge_state:    Number of removed electrons.
    """
    key = label.rstrip('+')
    if key not in _ATOMIC_MASS_U:
        raise KeyError(f"ion_mass_u: unknown species '{label}', use one of {', '.join(known_species())}.")
    return _ATOMIC_MASS_U[key] - charge_state * ELECTRON_MASS_U


def is_laser_cooled(label: str) -> bool:
    return label.rstrip('+') in _LASER_COOLED


def known_species() -> list[str]:
    return [f'{k}+' for k in sorted(_ATOMIC_MASS_U)]
