import numpy as np
import pytest

from polmc import mie
from polmc.transport import MediumSpec

# Reference scatterer: 70 nm radius spheres at 632 nm in an index-1 host,
# relative index 1.2 -> size parameter x = 0.696.
WAVELENGTH = 0.632
RADIUS = 0.07
N_PARTICLE = 1.2


def medium_with_volume_fraction(f, thickness, **kw):
    density = f / ((4.0 / 3.0) * np.pi * RADIUS ** 3)
    return MediumSpec(particle_radius=RADIUS, n_particle=N_PARTICLE,
                      n_host=1.0, number_density=density,
                      thickness=thickness, **kw)


@pytest.fixture(scope="session")
def dilute_medium():
    # Volume fraction 1e-3: mu_s ~ 9.85e-5 / um, mean free path ~ 1 cm.
    return medium_with_volume_fraction(1e-3, thickness=60000.0)


@pytest.fixture(scope="session")
def imaging_medium():
    # Volume fraction 0.01 (the validity guard limit): mfp ~ 0.9 mm.
    return medium_with_volume_fraction(0.01, thickness=3000.0)


@pytest.fixture(scope="session")
def ref_table(dilute_medium):
    return mie.build_mie_table(dilute_medium, WAVELENGTH)


@pytest.fixture(scope="session")
def imaging_table(imaging_medium):
    return mie.build_mie_table(imaging_medium, WAVELENGTH)
