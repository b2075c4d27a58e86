"""Shared helpers for the test suite: tiny hand-built scenes and vectors."""

import numpy as np

from irscov.scene import PathSpec, SceneConfig

DEFAULT_BI_PATH = (9.0, 1.1, 2.0)
DEFAULT_IU_PATH = (5.0, 0.7, 0.4)


def make_scene(d1=3.0, d2=3.0, grid_size=3.0, rows_y=2, rows_z=2,
               paths_bi=(DEFAULT_BI_PATH,), paths_iu=(DEFAULT_IU_PATH,),
               gain_bi=1.0, gain_iu=1.0, rician_bi=1.0, rician_iu=1.0,
               deterministic_only=False, wavelength=1.0):
    """Hand-built scene; paths are (length, azimuth, elevation) triples.

    `paths_iu`, `gain_iu` and `rician_iu` are shared by every grid unless a
    per-grid sequence (tuple of path tuples / tuple of floats) is given.
    """
    n_grids = round(d1 / grid_size) * round(d2 / grid_size)
    bi = tuple(PathSpec(*p) for p in paths_bi)
    per_grid = bool(paths_iu) and (not paths_iu[0] or isinstance(paths_iu[0][0], tuple))
    if per_grid:
        iu = tuple(tuple(PathSpec(*p) for p in grid_paths) for grid_paths in paths_iu)
    else:
        iu = (tuple(PathSpec(*p) for p in paths_iu),) * n_grids
    if np.isscalar(gain_iu):
        gain_iu = (float(gain_iu),) * n_grids
    if np.isscalar(rician_iu):
        rician_iu = (float(rician_iu),) * n_grids
    return SceneConfig(
        d1=d1, d2=d2, grid_size=grid_size,
        irs_pos=(d1 / 2, -4.0, 3.0), bs_pos=(-30.0, -25.0, 15.0),
        rows_y=rows_y, rows_z=rows_z, wavelength=wavelength,
        paths_bi=bi, paths_iu=iu,
        gain_bi=gain_bi, gain_iu=tuple(gain_iu),
        rician_bi=rician_bi, rician_iu=tuple(rician_iu),
        deterministic_only=deterministic_only,
    )


def rand_unit_vector(rng, n):
    """Random unit-modulus complex vector (continuous phases)."""
    return np.exp(1j * rng.uniform(0.0, 2.0 * np.pi, size=n))


def rand_complex(rng, *shape):
    """Standard complex Gaussian draws."""
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
