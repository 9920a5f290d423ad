"""Lorenz-Mie scattering for homogeneous spheres.

Computes the series coefficients a_n, b_n, the complex amplitude functions
S1(theta), S2(theta), the Mueller elements S11, S12, and a tabulated,
normalized single-scattering phase function over a uniform polar grid.
Spheres force the off-diagonal Jones amplitudes to zero, so the scattering
matrix applied in transport is diag(S2, S1).

Conventions follow Bohren & Huffman, "Absorption and Scattering of Light by
Small Particles" (1983): time dependence exp(-i w t), extinction given by
the optical theorem q_ext = (4/x^2) Re S(0).

The series is truncated at the Wiscombe cutoff n_max = ceil(x + 4 x^(1/3) + 2)
(Wiscombe, Appl. Opt. 19, 1505 (1980)).  The logarithmic derivative
D_n(mx) is generated by downward recurrence started at n_max + 15, which is
stable for complex relative index; the Riccati-Bessel functions psi_n and
chi_n of the real argument x use the standard upward recurrences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Margin above n_max where the downward recurrence for D_n is seeded.
LOG_DERIV_PAD = 15

# Default polar grid: 1801 points = 0.1 degree spacing, resolves the phase
# function for size parameters up to ~10 with Simpson error well below 1e-6.
DEFAULT_N_THETA = 1801

# Relative Richardson tolerance for the grid-resolution self check.
_SIMPSON_TOL = 1e-7


class MieError(ValueError):
    """Invalid input or an unconverged Mie table build."""


def wiscombe_n_max(size_param: float) -> int:
    """Series truncation order for a given size parameter."""
    x = float(size_param)
    return int(math.ceil(x + 4.0 * x ** (1.0 / 3.0) + 2.0))


def mie_coefficients(size_param, rel_index, n_max=None):
    """Mie series coefficients (a_n, b_n) for n = 1 .. n_max.

    Parameters
    ----------
    size_param : float
        x = 2 pi r n_host / wavelength, must be positive and finite.
    rel_index : complex
        m = n_particle / n_host.
    n_max : int, optional
        Truncation order; defaults to the Wiscombe cutoff.  Values below
        the cutoff are rejected since the series would not have converged.

    Returns
    -------
    ndarray of shape (n_max, 2), complex
        Column 0 holds a_n, column 1 holds b_n.
    """
    x = float(size_param)
    m = complex(rel_index)
    if not math.isfinite(x) or not (math.isfinite(m.real) and math.isfinite(m.imag)):
        raise MieError("size parameter and relative index must be finite")
    if x <= 0.0:
        raise MieError("size parameter must be > 0 (x = 0 scatters nothing)")
    cutoff = wiscombe_n_max(x)
    if n_max is None:
        n_max = cutoff
    n_max = int(n_max)
    if n_max < cutoff:
        raise MieError(f"n_max = {n_max} below Wiscombe cutoff {cutoff}")

    mx = m * x
    # Downward recurrence for D_n(mx) = psi_n'(mx) / psi_n(mx).
    n_start = n_max + LOG_DERIV_PAD
    d = np.zeros(n_start + 1, dtype=np.complex128)
    for n in range(n_start, 0, -1):
        rn = n / mx
        d[n - 1] = rn - 1.0 / (d[n] + rn)

    # Upward recurrences for psi_n(x) and chi_n(x); xi_n = psi_n - i chi_n.
    psi_nm1 = math.cos(x)   # psi_{-1}
    psi_n = math.sin(x)     # psi_0
    chi_nm1 = -math.sin(x)  # chi_{-1}
    chi_n = math.cos(x)     # chi_0

    coeffs = np.empty((n_max, 2), dtype=np.complex128)
    for n in range(1, n_max + 1):
        psi_np = (2 * n - 1) / x * psi_n - psi_nm1
        chi_np = (2 * n - 1) / x * chi_n - chi_nm1
        psi_nm1, psi_n = psi_n, psi_np
        chi_nm1, chi_n = chi_n, chi_np
        xi_n = complex(psi_n, -chi_n)
        xi_nm1 = complex(psi_nm1, -chi_nm1)
        dn = d[n]
        fa = dn / m + n / x
        fb = dn * m + n / x
        coeffs[n - 1, 0] = (fa * psi_n - psi_nm1) / (fa * xi_n - xi_nm1)
        coeffs[n - 1, 1] = (fb * psi_n - psi_nm1) / (fb * xi_n - xi_nm1)
    return coeffs


def _check_theta(theta):
    th = np.asarray(theta, dtype=np.float64)
    if np.any(~np.isfinite(th)) or np.any(th < 0.0) or np.any(th > np.pi):
        raise MieError("theta must lie in [0, pi]")
    return th


def amplitude_functions(theta, coeffs):
    """Complex amplitudes S1, S2 at polar angle(s) theta.

    Uses the upward recurrences for the angular functions pi_n, tau_n
    (B&H eq. 4.46-4.47).  Accepts a scalar or array of angles in [0, pi].
    """
    th = _check_theta(theta)
    scalar = th.ndim == 0
    mu = np.cos(np.atleast_1d(th))
    n_max = coeffs.shape[0]
    s1 = np.zeros(mu.shape, dtype=np.complex128)
    s2 = np.zeros(mu.shape, dtype=np.complex128)
    pi_nm1 = np.zeros_like(mu)  # pi_0
    pi_n = np.ones_like(mu)     # pi_1
    for n in range(1, n_max + 1):
        tau_n = n * mu * pi_n - (n + 1) * pi_nm1
        k = (2 * n + 1) / (n * (n + 1))
        a_n = coeffs[n - 1, 0]
        b_n = coeffs[n - 1, 1]
        s1 += k * (a_n * pi_n + b_n * tau_n)
        s2 += k * (a_n * tau_n + b_n * pi_n)
        pi_np = ((2 * n + 1) * mu * pi_n - (n + 1) * pi_nm1) / n
        pi_nm1, pi_n = pi_n, pi_np
    if scalar:
        return s1[0], s2[0]
    return s1, s2


def mueller_elements(theta, coeffs):
    """Mueller elements S11 = (|S2|^2 + |S1|^2)/2 and S12 = (|S2|^2 - |S1|^2)/2."""
    s1, s2 = amplitude_functions(theta, coeffs)
    a1 = np.abs(s1) ** 2
    a2 = np.abs(s2) ** 2
    return 0.5 * (a2 + a1), 0.5 * (a2 - a1)


def forward_amplitude(coeffs):
    """S(0) = S1(0) = S2(0) = (1/2) sum (2n+1)(a_n + b_n)."""
    n = np.arange(1, coeffs.shape[0] + 1)
    return 0.5 * np.sum((2 * n + 1) * (coeffs[:, 0] + coeffs[:, 1]))


def efficiencies(size_param, coeffs):
    """Scattering and extinction efficiencies (q_sca, q_ext) from the series."""
    x = float(size_param)
    n = np.arange(1, coeffs.shape[0] + 1)
    w = 2 * n + 1
    a = coeffs[:, 0]
    b = coeffs[:, 1]
    q_sca = (2.0 / (x * x)) * np.sum(w * (np.abs(a) ** 2 + np.abs(b) ** 2))
    q_ext = (2.0 / (x * x)) * np.sum(w * (a.real + b.real))
    return float(q_sca), float(q_ext)


def _simpson(y, h):
    """Composite Simpson rule on a uniform grid with an odd point count."""
    n = y.shape[0]
    if n < 3 or n % 2 == 0:
        raise MieError("Simpson rule needs an odd number of grid points >= 3")
    s = y[0] + y[-1] + 4.0 * np.sum(y[1:-1:2]) + 2.0 * np.sum(y[2:-2:2])
    return s * h / 3.0


@dataclass(frozen=True)
class MieTable:
    """Tabulated single-sphere scattering data on a uniform theta grid.

    ``phase_norm`` is the full solid-angle integral of the phase-function
    numerator for unit-intensity incident light: 2 pi * int S11 sin(theta)
    d(theta).  The azimuthal terms integrate to zero for any polarization,
    so the same normalization serves every incident Stokes vector; photon
    polarization enters through the numerator at sampling time.
    """

    size_param: float
    rel_index: complex
    theta: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    s11: np.ndarray
    s12: np.ndarray
    phase_norm: float
    max_s11: float
    q_sca: float
    q_ext: float
    g: float
    sigma_sca: float
    sigma_ext: float
    mu_s: float

    def __post_init__(self):
        for name in ("theta", "s1", "s2", "s11", "s12"):
            getattr(self, name).setflags(write=False)

    @property
    def n_theta(self) -> int:
        return self.theta.shape[0]

    def phase_density(self, theta, phi, stokes):
        """Phase-function density P(theta, phi) per steradian for a given
        incident Stokes vector (I, Q, U referenced to the local frame)."""
        i_o, q_o, u_o = stokes[0], stokes[1], stokes[2]
        s11 = np.interp(theta, self.theta, self.s11)
        s12 = np.interp(theta, self.theta, self.s12)
        num = s11 * i_o + s12 * (q_o * np.cos(2.0 * np.asarray(phi))
                                 + u_o * np.sin(2.0 * np.asarray(phi)))
        return num / (self.phase_norm * i_o)


def build_mie_table(medium, wavelength, n_theta=DEFAULT_N_THETA):
    """Build the scattering table for a medium's spheres at one wavelength.

    Parameters
    ----------
    medium : MediumSpec
        Needs particle_radius [um], n_particle, n_host, number_density [1/um^3].
    wavelength : float
        Vacuum wavelength in um.
    n_theta : int
        Polar grid size; must be odd and at least 1801.

    Raises
    ------
    MieError
        If the grid cannot resolve the phase-function oscillations at this
        size parameter (Richardson check on the Simpson normalization).
    """
    wavelength = float(wavelength)
    if wavelength <= 0.0:
        raise MieError("wavelength must be > 0")
    n_theta = int(n_theta)
    if n_theta < DEFAULT_N_THETA:
        raise MieError(f"n_theta must be >= {DEFAULT_N_THETA}")
    if n_theta % 2 == 0:
        raise MieError("n_theta must be odd for Simpson quadrature")

    radius = float(medium.particle_radius)
    x = 2.0 * math.pi * radius * float(medium.n_host) / wavelength
    m = complex(medium.n_particle) / complex(medium.n_host)
    coeffs = mie_coefficients(x, m)

    theta = np.linspace(0.0, math.pi, n_theta)
    s1, s2 = amplitude_functions(theta, coeffs)
    s11 = 0.5 * (np.abs(s2) ** 2 + np.abs(s1) ** 2)
    s12 = 0.5 * (np.abs(s2) ** 2 - np.abs(s1) ** 2)

    h = theta[1] - theta[0]
    integrand = s11 * np.sin(theta)
    norm_full = _simpson(integrand, h)
    norm_half = _simpson(integrand[::2], 2.0 * h)
    if abs(norm_full - norm_half) > _SIMPSON_TOL * abs(norm_full):
        raise MieError(
            f"theta grid too coarse to resolve the phase function at x = {x:.3g}; "
            f"increase n_theta above {n_theta}"
        )
    phase_norm = 2.0 * math.pi * norm_full
    g = _simpson(integrand * np.cos(theta), h) / norm_full

    q_sca, q_ext = efficiencies(x, coeffs)
    geom = math.pi * radius * radius
    sigma_sca = q_sca * geom
    sigma_ext = q_ext * geom
    mu_s = float(medium.number_density) * sigma_sca

    return MieTable(
        size_param=x,
        rel_index=m,
        theta=theta,
        s1=np.ascontiguousarray(s1),
        s2=np.ascontiguousarray(s2),
        s11=np.ascontiguousarray(s11),
        s12=np.ascontiguousarray(s12),
        phase_norm=phase_norm,
        max_s11=float(np.max(s11)),
        q_sca=q_sca,
        q_ext=q_ext,
        g=float(g),
        sigma_sca=sigma_sca,
        sigma_ext=sigma_ext,
        mu_s=mu_s,
    )


def table_header(table: MieTable) -> dict:
    """JSON-friendly summary used by the CLI table dump."""
    return {
        "size_param": table.size_param,
        "rel_index_re": table.rel_index.real,
        "rel_index_im": table.rel_index.imag,
        "q_sca": table.q_sca,
        "q_ext": table.q_ext,
        "g": table.g,
        "phase_norm": table.phase_norm,
        "sigma_sca_um2": table.sigma_sca,
        "mu_s_per_um": table.mu_s,
        "n_theta": table.n_theta,
    }
