"""Single-photon polarized transport through the slab.

A photon carries a unit Jones vector in a local orthonormal frame
(m_hat, n_hat) perpendicular to its direction, plus a scalar weight W.
Free paths are drawn from the scattering coefficient alone; absorption is
applied continuously as exp(-mu_a s), which keeps the walk unbiased while
letting W stay interpretable as survival probability.  Scattering rotates
the Jones basis into the scattering plane, multiplies by diag(S2, S1) and
renormalizes; the angular density already carries the intensity
redistribution, so no extra weight factor is applied at scattering.

Per free path, linear birefringence and optical activity act as a single
combined elliptic retarder-rotator: the matrix exponential of the summed
differential generators (retardance 2 pi dn s / lambda about the
birefringence axis projected into the local frame, circular rotation
chi s), not a retarder followed by a rotator.

Slab boundaries are index matched: no Fresnel reflection or refraction.

The hot loop is compiled with numba; the module-level operations are thin
wrappers over the same compiled helpers so tests exercise the exact code
the engine runs.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .rng import RngStream, uniform_draw

# Defaults for variance reduction and detection (all configurable).
ROULETTE_THRESHOLD = 1e-4
ROULETTE_SURVIVAL = 0.1
DETECTOR_SOLID_ANGLE = 0.01  # sr, about -z
MAX_STEPS = 1_000_000
DEPOSIT_ATTEN_CUTOFF = 1e-12
REJECTION_CAP = 1_000_000

# Geometric-optics validity guard: scatterer volume fraction above this
# makes independent-scattering assumptions dubious.
VOLUME_FRACTION_GUARD = 0.01

_EVENT_EXIT_TOP = 0
_EVENT_EXIT_BOTTOM = 1
_EVENT_ABSORBED = 2
_EVENT_ROULETTE = 3
_EVENT_STEP_CAP = 4
_EVENT_REJECTION_FAIL = 5

# Ledger slots.
_L_LAUNCHED = 0
_L_TOP = 1
_L_BOTTOM = 2
_L_ABSORBED = 3
_L_TERMINATED = 4
_L_DEPOSITED = 5

# Diagnostics slots.
_D_NTOP = 0
_D_NBOTTOM = 1
_D_NABSORBED = 2
_D_NROULETTE = 3
_D_NSTEPCAP = 4
_D_STEPS = 5
_D_REJ_TRIALS = 6
_D_REJ_EVENTS = 7
_D_NDEPOSITS = 8
_D_PROBE_RE = 9
_D_PROBE_IM = 10
_D_PROBE_RE2 = 11
_D_PROBE_IM2 = 12
_D_PROBE_N = 13
_D_SYM_POS_W = 14
_D_SYM_NEG_W = 15
_D_SYM_POS_N = 16
_D_SYM_NEG_N = 17
DIAG_SIZE = 18

# Parameter-vector layout shared by the kernel and the engine.
_P_MU_S = 0
_P_MU_A = 1
_P_THICKNESS = 2
_P_DELTA_N = 3
_P_CHI = 4
_P_AX = 5
_P_AY = 6
_P_AZ = 7
_P_WAVELENGTH = 8
_P_PHASE_NORM = 9
_P_MAX_S11 = 10
_P_DR = 11
_P_NRADIUS = 12
_P_DZ = 13
_P_NDEPTH = 14
_P_SOLID_ANGLE = 15
_P_COS_ACCEPT = 16
_P_PARTIAL = 17
_P_RThresh = 18
_P_RSURV = 19
_P_MAX_STEPS = 20
_P_LATERAL_MODE = 21
_P_PROBE_ON = 22
_P_PROBE_TX = 23
_P_PROBE_TY = 24
_P_PROBE_TZ = 25
_P_PROBE_PRE_RE = 26
_P_PROBE_PRE_IM = 27
_P_PROBE_AX = 28
_P_PROBE_AY = 29
_P_PROBE_AZ = 30
_P_LDX = 31
_P_LDY = 32
_P_LDZ = 33
_P_LMX = 34
_P_LMY = 35
_P_LMZ = 36
_P_LNX = 37
_P_LNY = 38
_P_LNZ = 39
_P_EP_RE = 40
_P_EP_IM = 41
_P_EQ_RE = 42
_P_EQ_IM = 43
PARAMS_SIZE = 44


class TransportError(RuntimeError):
    """Internal transport failure (broken rejection envelope)."""


class TerminalEvent(enum.IntEnum):
    EXIT_TOP = _EVENT_EXIT_TOP
    EXIT_BOTTOM = _EVENT_EXIT_BOTTOM
    ABSORBED = _EVENT_ABSORBED
    ROULETTE_KILLED = _EVENT_ROULETTE
    STEP_CAP = _EVENT_STEP_CAP


@dataclass
class MediumSpec:
    """Optical description of the single-layer slab.

    Lengths in um, coefficients in 1/um, chi in rad/um.  The host is
    non-absorbing at the Mie level; bulk absorption enters transport
    through mu_a only.
    """

    particle_radius: float
    n_particle: float
    n_host: float
    number_density: float
    thickness: float
    mu_a: float = 0.0
    delta_n: float = 0.0
    chi: float = 0.0
    birefringence_axis: tuple = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if self.particle_radius < 0 or self.number_density < 0 or self.mu_a < 0:
            raise ValueError("medium coefficients must be non-negative")
        if self.delta_n < 0 or self.thickness <= 0:
            raise ValueError("delta_n must be >= 0 and thickness > 0")
        if self.n_particle < 1.0 or self.n_host < 1.0:
            raise ValueError("refractive indices must be >= 1")
        ax = np.asarray(self.birefringence_axis, dtype=np.float64)
        norm = np.linalg.norm(ax)
        if norm == 0.0:
            raise ValueError("birefringence axis must be a nonzero vector")
        object.__setattr__(self, "birefringence_axis", tuple(ax / norm))

    @property
    def volume_fraction(self) -> float:
        return self.number_density * (4.0 / 3.0) * math.pi * self.particle_radius ** 3

    def check_validity(self):
        if self.volume_fraction > VOLUME_FRACTION_GUARD:
            warnings.warn(
                f"scatterer volume fraction {self.volume_fraction:.3g} exceeds "
                f"{VOLUME_FRACTION_GUARD}; independent-scattering transport is "
                "questionable at this density",
                stacklevel=2,
            )

    def to_dict(self) -> dict:
        return {
            "particle_radius": self.particle_radius,
            "n_particle": self.n_particle,
            "n_host": self.n_host,
            "number_density": self.number_density,
            "thickness": self.thickness,
            "mu_a": self.mu_a,
            "delta_n": self.delta_n,
            "chi": self.chi,
            "birefringence_axis": list(self.birefringence_axis),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MediumSpec":
        d = dict(d)
        if "birefringence_axis" in d:
            d["birefringence_axis"] = tuple(d["birefringence_axis"])
        return cls(**d)


SOURCE_JONES = {
    "linear_x": (1.0 + 0.0j, 0.0 + 0.0j),
    "linear_45": (1.0 / math.sqrt(2.0) + 0.0j, 1.0 / math.sqrt(2.0) + 0.0j),
    "circular_right": (1.0 / math.sqrt(2.0) + 0.0j, 1.0j / math.sqrt(2.0)),
    "circular_left": (1.0 / math.sqrt(2.0) + 0.0j, -1.0j / math.sqrt(2.0)),
}


@dataclass
class Photon:
    """Transport state: position, direction, local Jones frame, weight."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    frame_m: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    frame_n: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    jones: np.ndarray = field(default_factory=lambda: np.array([1.0 + 0.0j, 0.0j]))
    weight: float = 1.0
    path_length: float = 0.0
    max_depth: float = 0.0
    n_scatter: int = 0
    alive: bool = True

    @classmethod
    def launch(cls, polarization="linear_x", incidence_angle=0.0, custom_jones=None):
        """Fresh photon at the origin heading into the slab.

        For oblique incidence the plane of incidence is x-z; the frame is
        (m_hat in plane, n_hat = y_hat), so a TE launch is jones (0, 1).
        """
        th = float(incidence_angle)
        d = np.array([math.sin(th), 0.0, math.cos(th)])
        m = np.array([math.cos(th), 0.0, -math.sin(th)])
        n = np.array([0.0, 1.0, 0.0])
        if custom_jones is not None:
            j = np.asarray(custom_jones, dtype=np.complex128)
        else:
            j = np.array(SOURCE_JONES[polarization], dtype=np.complex128)
        norm = math.sqrt(float(np.sum(np.abs(j) ** 2)))
        if norm == 0.0:
            raise ValueError("source Jones vector must be nonzero")
        return cls(direction=d, frame_m=m, frame_n=n, jones=j / norm)

    def stokes_local(self):
        """(I, Q, U, V) of the Jones vector in the local frame."""
        ep, eq = self.jones[0], self.jones[1]
        return _stokes_pair(ep, eq)


# --------------------------------------------------------------------------
# Compiled helpers.  All geometry is scalar to keep the hot loop free of
# allocations; the Python operations below wrap the same functions.
# --------------------------------------------------------------------------

@njit(cache=True)
def _stokes_pair(ex, ey):
    i = (ex.real * ex.real + ex.imag * ex.imag
         + ey.real * ey.real + ey.imag * ey.imag)
    q = (ex.real * ex.real + ex.imag * ex.imag
         - ey.real * ey.real - ey.imag * ey.imag)
    c = ex * np.conj(ey)
    return i, q, 2.0 * c.real, -2.0 * c.imag


@njit(cache=True)
def _interp_real(theta, tab, inv_dtheta):
    t = theta * inv_dtheta
    i = int(t)
    if i >= tab.shape[0] - 1:
        i = tab.shape[0] - 2
    f = t - i
    return tab[i] * (1.0 - f) + tab[i + 1] * f


@njit(cache=True)
def _interp_complex(theta, tab, inv_dtheta):
    t = theta * inv_dtheta
    i = int(t)
    if i >= tab.shape[0] - 1:
        i = tab.shape[0] - 2
    f = t - i
    return tab[i] * (1.0 - f) + tab[i + 1] * f


@njit(cache=True)
def _rotate_jones(ep, eq, phi):
    # Rotate the Jones reference frame by phi about the propagation axis.
    c = math.cos(phi)
    s = math.sin(phi)
    return c * ep + s * eq, -s * ep + c * eq


@njit(cache=True)
def _deflect(dx, dy, dz, mx, my, mz, nx, ny, nz, theta, phi):
    """Deflect direction by (theta, phi) and parallel-transport the frame.

    The frame is first rotated by phi about the direction so the new m_hat
    spans the scattering plane, then tilted by theta.  Output is explicitly
    re-orthonormalized to stop drift over long walks.
    """
    cp = math.cos(phi)
    sp = math.sin(phi)
    rmx = cp * mx + sp * nx
    rmy = cp * my + sp * ny
    rmz = cp * mz + sp * nz
    rnx = -sp * mx + cp * nx
    rny = -sp * my + cp * ny
    rnz = -sp * mz + cp * nz

    ct = math.cos(theta)
    st = math.sin(theta)
    ndx = ct * dx + st * rmx
    ndy = ct * dy + st * rmy
    ndz = ct * dz + st * rmz
    nmx = ct * rmx - st * dx
    nmy = ct * rmy - st * dy
    nmz = ct * rmz - st * dz

    inv = 1.0 / math.sqrt(ndx * ndx + ndy * ndy + ndz * ndz)
    ndx *= inv
    ndy *= inv
    ndz *= inv
    dot = nmx * ndx + nmy * ndy + nmz * ndz
    nmx -= dot * ndx
    nmy -= dot * ndy
    nmz -= dot * ndz
    inv = 1.0 / math.sqrt(nmx * nmx + nmy * nmy + nmz * nmz)
    nmx *= inv
    nmy *= inv
    nmz *= inv
    nnx = ndy * nmz - ndz * nmy
    nny = ndz * nmx - ndx * nmz
    nnz = ndx * nmy - ndy * nmx
    return ndx, ndy, ndz, nmx, nmy, nmz, nnx, nny, nnz


@njit(cache=True)
def _retarder_rotator(ep, eq, delta, cos2a, sin2a, rho):
    """Combined elliptic retarder-rotator exp(G) acting on the Jones pair.

    G = -i (delta/2) [[cos2a, sin2a], [sin2a, -cos2a]] + rho [[0, -1], [1, 0]]
    is anti-Hermitian, so the map is unitary; G^2 = -kappa^2 I gives the
    closed form exp(G) = cos(kappa) I + sinc(kappa) G.
    """
    hd = 0.5 * delta
    kappa = math.sqrt(hd * hd + rho * rho)
    if kappa < 1e-8:
        sinc = 1.0 - kappa * kappa / 6.0
    else:
        sinc = math.sin(kappa) / kappa
    ck = math.cos(kappa)
    g00 = -1j * hd * cos2a
    g01 = -1j * hd * sin2a - rho
    g10 = -1j * hd * sin2a + rho
    m00 = ck + sinc * g00
    m01 = sinc * g01
    m10 = sinc * g10
    m11 = ck - sinc * g00
    return m00 * ep + m01 * eq, m10 * ep + m11 * eq


@njit(cache=True)
def _apply_optics_pair(ep, eq, step, mx, my, mz, nx, ny, nz,
                       delta_n, chi, ax, ay, az, wavelength):
    delta = 2.0 * math.pi * delta_n * step / wavelength
    rho = chi * step
    if delta == 0.0 and rho == 0.0:
        return ep, eq
    cos2a = 1.0
    sin2a = 0.0
    if delta != 0.0:
        bm = ax * mx + ay * my + az * mz
        bn = ax * nx + ay * ny + az * nz
        p2 = bm * bm + bn * bn
        if p2 < 1e-24:
            # Propagation along the optic axis: no transverse retardance.
            delta = 0.0
        else:
            cos2a = (bm * bm - bn * bn) / p2
            sin2a = 2.0 * bm * bn / p2
    ep2, eq2 = _retarder_rotator(ep, eq, delta, cos2a, sin2a, rho)
    inv = 1.0 / math.sqrt(ep2.real * ep2.real + ep2.imag * ep2.imag
                          + eq2.real * eq2.real + eq2.imag * eq2.imag)
    return ep2 * inv, eq2 * inv


@njit(cache=True)
def _sample_angles_core(q_loc, u_loc, s11, s12, inv_dtheta, max_s11,
                        seed, pidx, ctr):
    """Rejection-sample (theta, phi) from the polarized phase function.

    Candidate directions are uniform on the sphere; acceptance tests the
    numerator S11 + S12 (Q cos 2phi + U sin 2phi) against the static
    envelope max(S11) (1 + |Q| + |U|), so the table never needs rebuilding
    for the photon's polarization.
    """
    envelope = max_s11 * (1.0 + abs(q_loc) + abs(u_loc))
    trials = 0
    while trials < REJECTION_CAP:
        trials += 1
        u1 = uniform_draw(seed, pidx, ctr)
        ctr += np.uint64(1)
        u2 = uniform_draw(seed, pidx, ctr)
        ctr += np.uint64(1)
        u3 = uniform_draw(seed, pidx, ctr)
        ctr += np.uint64(1)
        mu = 2.0 * u1 - 1.0
        if mu > 1.0:
            mu = 1.0
        elif mu < -1.0:
            mu = -1.0
        theta = math.acos(mu)
        phi = 2.0 * math.pi * u2
        s11v = _interp_real(theta, s11, inv_dtheta)
        s12v = _interp_real(theta, s12, inv_dtheta)
        f = s11v + s12v * (q_loc * math.cos(2.0 * phi) + u_loc * math.sin(2.0 * phi))
        if u3 * envelope <= f:
            return theta, phi, ctr, trials, True
    return 0.0, 0.0, ctr, trials, False


@njit(cache=True)
def _lab_basis(dx, dy, dz):
    """Lab analyzer basis for a beam along d_hat.

    e1 is the x axis projected transverse to the beam (y axis fallback when
    the beam runs along x).  e2 = +/- d x e1 with the sign chosen so that a
    top-exiting beam keeps the incident lab handedness: the mirror flip on
    backscatter is absorbed, making single backscatter co-polarized in both
    the linear and the circular bookkeeping.
    """
    e1x = 1.0 - dx * dx
    e1y = -dx * dy
    e1z = -dx * dz
    n2 = e1x * e1x + e1y * e1y + e1z * e1z
    if n2 < 1e-18:
        e1x = -dy * dx
        e1y = 1.0 - dy * dy
        e1z = -dy * dz
        n2 = e1x * e1x + e1y * e1y + e1z * e1z
    inv = 1.0 / math.sqrt(n2)
    e1x *= inv
    e1y *= inv
    e1z *= inv
    e2x = dy * e1z - dz * e1y
    e2y = dz * e1x - dx * e1z
    e2z = dx * e1y - dy * e1x
    if dz < 0.0:
        e2x = -e2x
        e2y = -e2y
        e2z = -e2z
    return e1x, e1y, e1z, e2x, e2y, e2z


@njit(cache=True)
def _to_lab_jones(ep, eq, dx, dy, dz, mx, my, mz, nx, ny, nz):
    e1x, e1y, e1z, e2x, e2y, e2z = _lab_basis(dx, dy, dz)
    ex = ep * (mx * e1x + my * e1y + mz * e1z) + eq * (nx * e1x + ny * e1y + nz * e1z)
    ey = ep * (mx * e2x + my * e2y + mz * e2z) + eq * (nx * e2x + ny * e2y + nz * e2z)
    return ex, ey


@njit(cache=True)
def _grid_add(grid, overflow, lateral_mode, dr, n_radius, dz_bin, n_depth,
              x, y, depth, w, ex, ey):
    if lateral_mode == 0:
        lb = int(math.sqrt(x * x + y * y) / dr)
    elif lateral_mode == 1:
        lb = int(math.floor(x / dr)) + n_radius // 2
    else:
        lb = int(math.floor(y / dr)) + n_radius // 2
    db = int(depth / dz_bin)
    i, q, u, v = _stokes_pair(ex, ey)
    sw = math.sqrt(w)
    ep_c = sw * (ex - 1j * ey) * 0.7071067811865476
    em_c = sw * (ex + 1j * ey) * 0.7071067811865476
    if i > 0.0:
        doc_n = q / i
        pp_xy = w * doc_n * (1.0 - q / i)
        pp_pm = w * doc_n * (1.0 - v / i)
    else:
        pp_xy = 0.0
        pp_pm = 0.0
    if 0 <= lb < n_radius and 0 <= db < n_depth:
        grid[db, lb, 0] += w
        grid[db, lb, 1] += w * i
        grid[db, lb, 2] += w * q
        grid[db, lb, 3] += w * u
        grid[db, lb, 4] += w * v
        grid[db, lb, 5] += ep_c.real
        grid[db, lb, 6] += ep_c.imag
        grid[db, lb, 7] += em_c.real
        grid[db, lb, 8] += em_c.imag
        grid[db, lb, 9] += 1.0
        grid[db, lb, 10] += pp_xy
        grid[db, lb, 11] += pp_pm
    else:
        overflow[0] += w
        overflow[1] += w * i
        overflow[2] += w * q
        overflow[3] += w * u
        overflow[4] += w * v
        overflow[5] += ep_c.real
        overflow[6] += ep_c.imag
        overflow[7] += em_c.real
        overflow[8] += em_c.imag
        overflow[9] += 1.0
        overflow[10] += pp_xy
        overflow[11] += pp_pm


@njit(cache=True)
def _detector_angles(dx, dy, dz, mx, my, mz, nx, ny, nz, tx, ty, tz):
    """Scattering angles (theta_det, phi_det) that deflect d_hat onto t_hat."""
    ct = dx * tx + dy * ty + dz * tz
    if ct > 1.0:
        ct = 1.0
    elif ct < -1.0:
        ct = -1.0
    theta = math.acos(ct)
    tpx = tx - ct * dx
    tpy = ty - ct * dy
    tpz = tz - ct * dz
    if tpx * tpx + tpy * tpy + tpz * tpz < 1e-24:
        # Forward or exact backscatter: azimuth is immaterial (the outgoing
        # field is phi-independent there); pick the current plane.
        return theta, 0.0
    pm = tpx * mx + tpy * my + tpz * mz
    pn = tpx * nx + tpy * ny + tpz * nz
    return theta, math.atan2(pn, pm)


@njit(cache=True)
def _virtual_exit(ep, eq, dx, dy, dz, mx, my, mz, nx, ny, nz,
                  theta_det, phi_det, s1v, s2v):
    """Jones state and frame after a virtual deflection toward the detector.

    Returns the unnormalized scattered amplitudes so callers can keep the
    complex scattering phase (probe) or renormalize (intensity deposit).
    """
    epr, eqr = _rotate_jones(ep, eq, phi_det)
    vp = s2v * epr
    vq = s1v * eqr
    vdx, vdy, vdz, vmx, vmy, vmz, vnx, vny, vnz = _deflect(
        dx, dy, dz, mx, my, mz, nx, ny, nz, theta_det, phi_det)
    return vp, vq, vdx, vdy, vdz, vmx, vmy, vmz, vnx, vny, vnz


@njit(cache=True)
def propagate_kernel(seed, pidx, p, s1_tab, s2_tab, s11_tab, s12_tab,
                     grid, overflow, ledger, diag, state_out):
    """Trace one photon; accumulate into grid/ledger/diag in place.

    Returns the terminal event code and writes the final photon state
    (position, direction, frame, Jones, weight, path, max depth, scatter
    count) into ``state_out``.  All randomness comes from the
    counter-based stream (seed, pidx), so the trace is independent of
    scheduling and worker layout.
    """
    mu_s = p[_P_MU_S]
    mu_a = p[_P_MU_A]
    mu_t = mu_s + mu_a
    thickness = p[_P_THICKNESS]
    delta_n = p[_P_DELTA_N]
    chi = p[_P_CHI]
    ax = p[_P_AX]
    ay = p[_P_AY]
    az = p[_P_AZ]
    wavelength = p[_P_WAVELENGTH]
    phase_norm = p[_P_PHASE_NORM]
    max_s11 = p[_P_MAX_S11]
    dr = p[_P_DR]
    n_radius = int(p[_P_NRADIUS])
    dz_bin = p[_P_DZ]
    n_depth = int(p[_P_NDEPTH])
    solid_angle = p[_P_SOLID_ANGLE]
    cos_accept = p[_P_COS_ACCEPT]
    partial_on = p[_P_PARTIAL] != 0.0
    r_thresh = p[_P_RThresh]
    r_surv = p[_P_RSURV]
    max_steps = int(p[_P_MAX_STEPS])
    lateral_mode = int(p[_P_LATERAL_MODE])
    probe_on = p[_P_PROBE_ON] != 0.0
    probe_pre = complex(p[_P_PROBE_PRE_RE], p[_P_PROBE_PRE_IM])

    inv_dtheta = (s11_tab.shape[0] - 1) / math.pi

    x = 0.0
    y = 0.0
    z = 0.0
    dx = p[_P_LDX]
    dy = p[_P_LDY]
    dz = p[_P_LDZ]
    mx = p[_P_LMX]
    my = p[_P_LMY]
    mz = p[_P_LMZ]
    nx = p[_P_LNX]
    ny = p[_P_LNY]
    nz = p[_P_LNZ]
    ep = complex(p[_P_EP_RE], p[_P_EP_IM])
    eq = complex(p[_P_EQ_RE], p[_P_EQ_IM])
    w = 1.0
    path = 0.0
    max_depth = 0.0
    nsc = 0
    ctr = np.uint64(0)
    seed_u = np.uint64(seed)
    pidx_u = np.uint64(pidx)

    ledger[_L_LAUNCHED] += 1.0
    event = _EVENT_STEP_CAP
    steps = 0

    while True:
        steps += 1
        if steps > max_steps:
            ledger[_L_TERMINATED] += w
            event = _EVENT_STEP_CAP
            break

        if mu_s > 0.0:
            u = uniform_draw(seed_u, pidx_u, ctr)
            ctr += np.uint64(1)
            s = -math.log(u) / mu_s
        else:
            s = 1e300

        if dz > 0.0:
            t_exit = (thickness - z) / dz
            exit_top = False
        elif dz < 0.0:
            t_exit = -z / dz
            exit_top = True
        else:
            t_exit = 1e300
            exit_top = False
        hit = s >= t_exit
        trav = t_exit if hit else s

        x += dx * trav
        y += dy * trav
        z += dz * trav
        path += trav
        if z > max_depth:
            max_depth = z
        if mu_a > 0.0:
            w2 = w * math.exp(-mu_a * trav)
            ledger[_L_ABSORBED] += w - w2
            w = w2
        ep, eq = _apply_optics_pair(ep, eq, trav, mx, my, mz, nx, ny, nz,
                                    delta_n, chi, ax, ay, az, wavelength)

        if hit:
            if exit_top:
                ledger[_L_TOP] += w
                if not partial_on and -dz >= cos_accept:
                    ex, ey = _to_lab_jones(ep, eq, dx, dy, dz,
                                           mx, my, mz, nx, ny, nz)
                    _grid_add(grid, overflow, lateral_mode, dr, n_radius,
                              dz_bin, n_depth, x, y, max_depth, w, ex, ey)
                if y > 0.0:
                    diag[_D_SYM_POS_W] += w
                    diag[_D_SYM_POS_N] += 1.0
                elif y < 0.0:
                    diag[_D_SYM_NEG_W] += w
                    diag[_D_SYM_NEG_N] += 1.0
                event = _EVENT_EXIT_TOP
            else:
                ledger[_L_BOTTOM] += w
                event = _EVENT_EXIT_BOTTOM
            break

        # Interior scattering site.
        i_loc, q_loc, u_loc, v_loc = _stokes_pair(ep, eq)

        if probe_on and nsc == 0:
            theta_det, phi_det = _detector_angles(
                dx, dy, dz, mx, my, mz, nx, ny, nz,
                p[_P_PROBE_TX], p[_P_PROBE_TY], p[_P_PROBE_TZ])
            s1v = _interp_complex(theta_det, s1_tab, inv_dtheta)
            s2v = _interp_complex(theta_det, s2_tab, inv_dtheta)
            vp, vq, vdx, vdy, vdz, vmx, vmy, vmz, vnx, vny, vnz = _virtual_exit(
                ep, eq, dx, dy, dz, mx, my, mz, nx, ny, nz,
                theta_det, phi_det, s1v, s2v)
            a_co = (vp * (vmx * p[_P_PROBE_AX] + vmy * p[_P_PROBE_AY]
                          + vmz * p[_P_PROBE_AZ])
                    + vq * (vnx * p[_P_PROBE_AX] + vny * p[_P_PROBE_AY]
                            + vnz * p[_P_PROBE_AZ]))
            a = probe_pre * a_co
            diag[_D_PROBE_RE] += a.real
            diag[_D_PROBE_IM] += a.imag
            diag[_D_PROBE_RE2] += a.real * a.real
            diag[_D_PROBE_IM2] += a.imag * a.imag
            diag[_D_PROBE_N] += 1.0

        if partial_on:
            atten = math.exp(-mu_t * z)
            if atten >= DEPOSIT_ATTEN_CUTOFF:
                theta_det, phi_det = _detector_angles(
                    dx, dy, dz, mx, my, mz, nx, ny, nz, 0.0, 0.0, -1.0)
                s11v = _interp_real(theta_det, s11_tab, inv_dtheta)
                s12v = _interp_real(theta_det, s12_tab, inv_dtheta)
                f = s11v * i_loc + s12v * (q_loc * math.cos(2.0 * phi_det)
                                           + u_loc * math.sin(2.0 * phi_det))
                dep = w * (f / phase_norm) * solid_angle * atten
                if dep > 0.0:
                    s1v = _interp_complex(theta_det, s1_tab, inv_dtheta)
                    s2v = _interp_complex(theta_det, s2_tab, inv_dtheta)
                    (vp, vq, vdx, vdy, vdz,
                     vmx, vmy, vmz, vnx, vny, vnz) = _virtual_exit(
                        ep, eq, dx, dy, dz, mx, my, mz, nx, ny, nz,
                        theta_det, phi_det, s1v, s2v)
                    vn2 = (vp.real * vp.real + vp.imag * vp.imag
                           + vq.real * vq.real + vq.imag * vq.imag)
                    if vn2 > 0.0:
                        inv = 1.0 / math.sqrt(vn2)
                        vp *= inv
                        vq *= inv
                        vp, vq = _apply_optics_pair(
                            vp, vq, z, vmx, vmy, vmz, vnx, vny, vnz,
                            delta_n, chi, ax, ay, az, wavelength)
                        ex, ey = _to_lab_jones(vp, vq, vdx, vdy, vdz,
                                               vmx, vmy, vmz, vnx, vny, vnz)
                        _grid_add(grid, overflow, lateral_mode, dr, n_radius,
                                  dz_bin, n_depth, x, y, max_depth,
                                  dep, ex, ey)
                        ledger[_L_DEPOSITED] += dep
                        diag[_D_NDEPOSITS] += 1.0

        theta, phi, ctr, trials, ok = _sample_angles_core(
            q_loc, u_loc, s11_tab, s12_tab, inv_dtheta, max_s11,
            seed_u, pidx_u, ctr)
        diag[_D_REJ_TRIALS] += trials
        diag[_D_REJ_EVENTS] += 1.0
        if not ok:
            ledger[_L_TERMINATED] += w
            event = _EVENT_REJECTION_FAIL
            break

        s1v = _interp_complex(theta, s1_tab, inv_dtheta)
        s2v = _interp_complex(theta, s2_tab, inv_dtheta)
        ep, eq = _rotate_jones(ep, eq, phi)
        ep = s2v * ep
        eq = s1v * eq
        n2 = (ep.real * ep.real + ep.imag * ep.imag
              + eq.real * eq.real + eq.imag * eq.imag)
        if n2 <= 0.0:
            ledger[_L_ABSORBED] += w
            event = _EVENT_ABSORBED
            break
        inv = 1.0 / math.sqrt(n2)
        ep *= inv
        eq *= inv
        nsc += 1
        dx, dy, dz, mx, my, mz, nx, ny, nz = _deflect(
            dx, dy, dz, mx, my, mz, nx, ny, nz, theta, phi)

        if w < r_thresh:
            u = uniform_draw(seed_u, pidx_u, ctr)
            ctr += np.uint64(1)
            if u < r_surv:
                w2 = w / r_surv
                ledger[_L_TERMINATED] += w - w2
                w = w2
            else:
                ledger[_L_TERMINATED] += w
                event = _EVENT_ROULETTE
                break

    diag[_D_STEPS] += steps
    if event <= _EVENT_STEP_CAP:
        diag[event] += 1.0
    state_out[0] = x
    state_out[1] = y
    state_out[2] = z
    state_out[3] = dx
    state_out[4] = dy
    state_out[5] = dz
    state_out[6] = w
    state_out[7] = path
    state_out[8] = max_depth
    state_out[9] = nsc
    state_out[10] = ep.real
    state_out[11] = ep.imag
    state_out[12] = eq.real
    state_out[13] = eq.imag
    state_out[14] = mx
    state_out[15] = my
    state_out[16] = mz
    state_out[17] = nx
    state_out[18] = ny
    state_out[19] = nz
    return event


# --------------------------------------------------------------------------
# Spec-level operations (thin wrappers over the compiled helpers).
# --------------------------------------------------------------------------

def sample_step(mu_s: float, u: float) -> float:
    """Free-path length from the exponential attenuation law, -ln(u)/mu_s."""
    if not (mu_s > 0.0):
        raise ValueError("mu_s must be > 0")
    if not (0.0 < u <= 1.0):
        raise ValueError("u must lie in (0, 1]")
    return -math.log(u) / mu_s


def attenuate(photon: Photon, step: float, mu_a: float) -> float:
    """Scale the weight by exp(-mu_a step); returns the absorbed amount."""
    if step < 0.0:
        raise ValueError("step must be >= 0")
    w_new = photon.weight * math.exp(-mu_a * step)
    absorbed = photon.weight - w_new
    photon.weight = w_new
    return absorbed


def sample_scattering_angles(table, stokes_in, rng: RngStream):
    """Draw (theta, phi) from the polarized phase function of the table."""
    i_o, q_o, u_o = float(stokes_in[0]), float(stokes_in[1]), float(stokes_in[2])
    if i_o <= 0.0:
        raise ValueError("incident Stokes I must be positive")
    inv_dtheta = (table.n_theta - 1) / math.pi
    theta, phi, ctr, trials, ok = _sample_angles_core(
        q_o / i_o, u_o / i_o, table.s11, table.s12, inv_dtheta, table.max_s11,
        rng.seed, rng.index, np.uint64(rng._pos))
    rng._pos = int(ctr)
    if not ok:
        raise TransportError(
            f"rejection sampling failed after {trials} attempts; envelope broken")
    return theta, phi


@njit(cache=True)
def _sample_angles_batch(n, q_loc, u_loc, s11, s12, inv_dtheta, max_s11, seed, index):
    thetas = np.empty(n, dtype=np.float64)
    phis = np.empty(n, dtype=np.float64)
    ctr = np.uint64(0)
    trials_total = 0
    for i in range(n):
        theta, phi, ctr, trials, ok = _sample_angles_core(
            q_loc, u_loc, s11, s12, inv_dtheta, max_s11,
            np.uint64(seed), np.uint64(index), ctr)
        if not ok:
            thetas[i] = -1.0
            phis[i] = -1.0
        else:
            thetas[i] = theta
            phis[i] = phi
        trials_total += trials
    return thetas, phis, trials_total


def sample_scattering_angles_batch(table, stokes_in, n, seed, index=0):
    """Vectorized draw helper for statistical tests."""
    i_o, q_o, u_o = float(stokes_in[0]), float(stokes_in[1]), float(stokes_in[2])
    inv_dtheta = (table.n_theta - 1) / math.pi
    thetas, phis, trials = _sample_angles_batch(
        int(n), q_o / i_o, u_o / i_o, table.s11, table.s12, inv_dtheta,
        table.max_s11, seed, index)
    if np.any(thetas < 0.0):
        raise TransportError("rejection sampling failed; envelope broken")
    return thetas, phis, trials


def update_direction(direction, frame, theta, phi):
    """Deflect a unit direction by (theta, phi); transports the (m, n) frame."""
    d = np.asarray(direction, dtype=np.float64)
    m, n = (np.asarray(f, dtype=np.float64) for f in frame)
    out = _deflect(d[0], d[1], d[2], m[0], m[1], m[2], n[0], n[1], n[2],
                   float(theta), float(phi))
    return (np.array(out[0:3]), (np.array(out[3:6]), np.array(out[6:9])))


def apply_scattering(photon: Photon, theta: float, phi: float, table):
    """Scatter the photon: rotate the basis by phi, apply diag(S2, S1),
    renormalize, and deflect direction and frame by (theta, phi)."""
    if not (0.0 <= theta <= math.pi):
        raise ValueError("theta must lie in [0, pi]")
    inv_dtheta = (table.n_theta - 1) / math.pi
    s1v = _interp_complex(theta, table.s1, inv_dtheta)
    s2v = _interp_complex(theta, table.s2, inv_dtheta)
    ep, eq = _rotate_jones(photon.jones[0], photon.jones[1], phi)
    ep = s2v * ep
    eq = s1v * eq
    n2 = abs(ep) ** 2 + abs(eq) ** 2
    if n2 <= 0.0:
        photon.alive = False
        absorbed = photon.weight
        photon.weight = 0.0
        return absorbed
    inv = 1.0 / math.sqrt(n2)
    photon.jones[0] = ep * inv
    photon.jones[1] = eq * inv
    photon.n_scatter += 1
    d, (m, n) = update_direction(photon.direction, (photon.frame_m, photon.frame_n),
                                 theta, phi)
    photon.direction = d
    photon.frame_m = m
    photon.frame_n = n
    return 0.0


def apply_medium_optics(photon: Photon, step: float, medium: MediumSpec,
                        wavelength: float):
    """Advance polarization through birefringence and optical activity."""
    if step < 0.0:
        raise ValueError("step must be >= 0")
    ax, ay, az = medium.birefringence_axis
    ep, eq = _apply_optics_pair(
        photon.jones[0], photon.jones[1], float(step),
        photon.frame_m[0], photon.frame_m[1], photon.frame_m[2],
        photon.frame_n[0], photon.frame_n[1], photon.frame_n[2],
        medium.delta_n, medium.chi, ax, ay, az, float(wavelength))
    photon.jones[0] = ep
    photon.jones[1] = eq


def russian_roulette(photon: Photon, threshold: float, survival_p: float,
                     u: float) -> float:
    """Unbiased low-weight termination; returns the net terminated weight
    (negative when the photon survives and is topped up)."""
    if not (0.0 < survival_p < 1.0):
        raise ValueError("survival probability must lie in (0, 1)")
    if photon.weight >= threshold:
        return 0.0
    if u < survival_p:
        w_new = photon.weight / survival_p
        delta = photon.weight - w_new
        photon.weight = w_new
        return delta
    delta = photon.weight
    photon.weight = 0.0
    photon.alive = False
    return delta


STATE_SIZE = 20


def propagate_photon(photon: Photon, medium: MediumSpec, table, rng: RngStream,
                     wavelength: float, detector=None, roulette_threshold=None,
                     roulette_survival=None, partial_photon=False,
                     max_steps=MAX_STEPS):
    """Trace one fresh photon through the slab to its terminal event.

    The loop per step: sample a free path, move (clipped at the slab
    boundaries), attenuate, advance the polarization through the medium
    optics, and at interior sites deposit the partial-photon estimate,
    sample scattering angles, scatter, and play roulette.  The photon
    object is updated in place; returns (TerminalEvent, ledger dict,
    DetectorGrid or None).
    """
    if (photon.position != 0.0).any() or photon.n_scatter != 0 \
            or photon.weight != 1.0:
        raise ValueError("propagate_photon expects a fresh photon at the origin")
    if photon.direction[2] <= 0.0:
        raise ValueError("fresh photon must head into the slab (+z)")

    p = np.zeros(PARAMS_SIZE)
    p[_P_MU_S] = table.mu_s
    p[_P_MU_A] = medium.mu_a
    p[_P_THICKNESS] = medium.thickness
    p[_P_DELTA_N] = medium.delta_n
    p[_P_CHI] = medium.chi
    p[_P_AX], p[_P_AY], p[_P_AZ] = medium.birefringence_axis
    p[_P_WAVELENGTH] = wavelength
    p[_P_PHASE_NORM] = table.phase_norm
    p[_P_MAX_S11] = table.max_s11
    if detector is not None:
        n_radius, n_depth, dr, dz_bin, solid_angle = detector
    else:
        n_radius, n_depth, dr, dz_bin, solid_angle = 1, 1, 1e9, 1e9, \
            DETECTOR_SOLID_ANGLE
    p[_P_DR] = dr
    p[_P_NRADIUS] = n_radius
    p[_P_DZ] = dz_bin
    p[_P_NDEPTH] = n_depth
    p[_P_SOLID_ANGLE] = solid_angle
    p[_P_COS_ACCEPT] = -2.0
    p[_P_PARTIAL] = 1.0 if partial_photon else 0.0
    p[_P_RThresh] = ROULETTE_THRESHOLD if roulette_threshold is None \
        else roulette_threshold
    p[_P_RSURV] = ROULETTE_SURVIVAL if roulette_survival is None \
        else roulette_survival
    p[_P_MAX_STEPS] = max_steps
    p[_P_LDX:_P_LDX + 3] = photon.direction
    p[_P_LMX:_P_LMX + 3] = photon.frame_m
    p[_P_LNX:_P_LNX + 3] = photon.frame_n
    p[_P_EP_RE] = photon.jones[0].real
    p[_P_EP_IM] = photon.jones[0].imag
    p[_P_EQ_RE] = photon.jones[1].real
    p[_P_EQ_IM] = photon.jones[1].imag

    grid = np.zeros((n_depth, n_radius, 12))
    overflow = np.zeros(12)
    ledger = np.zeros(6)
    diag = np.zeros(DIAG_SIZE)
    state = np.zeros(STATE_SIZE)
    code = propagate_kernel(np.uint64(rng.seed), np.uint64(rng.index), p,
                            table.s1, table.s2, table.s11, table.s12,
                            grid, overflow, ledger, diag, state)
    if code == _EVENT_REJECTION_FAIL:
        raise TransportError("rejection cap hit; envelope broken")

    photon.position = state[0:3].copy()
    photon.direction = state[3:6].copy()
    photon.weight = float(state[6])
    photon.path_length = float(state[7])
    photon.max_depth = float(state[8])
    photon.n_scatter = int(state[9])
    photon.jones = np.array([complex(state[10], state[11]),
                             complex(state[12], state[13])])
    photon.frame_m = state[14:17].copy()
    photon.frame_n = state[17:20].copy()
    photon.alive = code in (_EVENT_EXIT_TOP, _EVENT_EXIT_BOTTOM)

    ledger_dict = {"launched": ledger[0], "detected_top": ledger[1],
                   "detected_bottom": ledger[2], "absorbed": ledger[3],
                   "terminated": ledger[4], "deposited": ledger[5]}
    return TerminalEvent(code), ledger_dict, (grid, overflow)


@dataclass
class PartialDeposit:
    """Local-estimate contribution toward the backscattering detector."""

    x: float
    y: float
    depth: float
    weight: float
    ex: complex
    ey: complex


def partial_photon_contribution(photon: Photon, detector, table,
                                medium: MediumSpec, wavelength: float = None):
    """Local-estimate deposit at a scattering site: W P(theta_d, phi_d)
    dOmega exp(-mu_t d_exit) toward -z.  Returns None below the attenuation
    cutoff.  The photon itself is left untouched."""
    z = float(photon.position[2])
    mu_t = table.mu_s + medium.mu_a
    atten = math.exp(-mu_t * z)
    if atten < DEPOSIT_ATTEN_CUTOFF:
        return None
    if wavelength is None:
        if medium.delta_n != 0.0:
            raise ValueError("wavelength required when the medium is birefringent")
        wavelength = 1.0
    d = photon.direction
    m = photon.frame_m
    n = photon.frame_n
    theta_det, phi_det = _detector_angles(
        d[0], d[1], d[2], m[0], m[1], m[2], n[0], n[1], n[2], 0.0, 0.0, -1.0)
    i_loc, q_loc, u_loc, _ = photon.stokes_local()
    inv_dtheta = (table.n_theta - 1) / math.pi
    s11v = _interp_real(theta_det, table.s11, inv_dtheta)
    s12v = _interp_real(theta_det, table.s12, inv_dtheta)
    f = s11v * i_loc + s12v * (q_loc * math.cos(2.0 * phi_det)
                               + u_loc * math.sin(2.0 * phi_det))
    dep = photon.weight * (f / table.phase_norm) * detector.solid_angle * atten
    if dep <= 0.0:
        return None
    s1v = _interp_complex(theta_det, table.s1, inv_dtheta)
    s2v = _interp_complex(theta_det, table.s2, inv_dtheta)
    out = _virtual_exit(photon.jones[0], photon.jones[1],
                        d[0], d[1], d[2], m[0], m[1], m[2], n[0], n[1], n[2],
                        theta_det, phi_det, s1v, s2v)
    vp, vq = out[0], out[1]
    vdx, vdy, vdz = out[2], out[3], out[4]
    vm = out[5:8]
    vn = out[8:11]
    n2 = abs(vp) ** 2 + abs(vq) ** 2
    if n2 <= 0.0:
        return None
    inv = 1.0 / math.sqrt(n2)
    vp *= inv
    vq *= inv
    ax, ay, az = medium.birefringence_axis
    vp, vq = _apply_optics_pair(vp, vq, z, vm[0], vm[1], vm[2],
                                vn[0], vn[1], vn[2],
                                medium.delta_n, medium.chi, ax, ay, az,
                                float(wavelength))
    ex, ey = _to_lab_jones(vp, vq, vdx, vdy, vdz,
                           vm[0], vm[1], vm[2], vn[0], vn[1], vn[2])
    return PartialDeposit(x=float(photon.position[0]), y=float(photon.position[1]),
                          depth=max(photon.max_depth, z), weight=dep,
                          ex=complex(ex), ey=complex(ey))
