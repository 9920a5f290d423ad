"""polmc: polarized-light Monte Carlo for PSOCT in turbid single-layer media.

Subpackages: mie (sphere scattering tables), transport (photon walk and
polarization evolution), detection (binned Stokes grids and channels),
engine (parallel orchestration), oracle (effective-medium reflection
check), dataset (property sweeps), inverse (residual-encoder regression),
cli (command-line driver).
"""

__version__ = "0.1.0"

from .detection import (DetectorGrid, ExitRecord, accumulate, bscan_image,
                        channels, degree_of_coherence,
                        doc_weighted_cross_channels, stokes_from_jones)
from .engine import SimConfig, SimResult, merge, rng_stream, run
from .mie import (MieTable, amplitude_functions, build_mie_table,
                  mie_coefficients, mueller_elements)
from .transport import MediumSpec, Photon, TerminalEvent

__all__ = [
    "MediumSpec", "Photon", "TerminalEvent", "MieTable", "DetectorGrid",
    "ExitRecord", "SimConfig", "SimResult", "run", "merge", "rng_stream",
    "build_mie_table", "mie_coefficients", "amplitude_functions",
    "mueller_elements", "stokes_from_jones", "accumulate", "channels",
    "degree_of_coherence", "doc_weighted_cross_channels", "bscan_image",
]
