"""Binned Stokes accumulation and polarization-channel images.

The detector grid is 2D: lateral bins (radius from the incidence point by
default, signed x or y behind a config switch) by depth bins, where depth is
the photon's deepest excursion, which is what an A-scan localizes.  Each
bin carries weight, Stokes sums, the two circular-basis field sums and a
count.  Channels are computed from the per-bin aggregate ratios Q/I and
V/I; the detected V bookkeeping keeps the incident lab handedness, so a
single backscatter is co-polarized in both the linear and circular
channels.

Field sums use sqrt(W)-scaled amplitudes (so one photon's field carries
its intensity) and omit the propagation phase exp(i k L): cross-photon
coherence here reflects polarization-state alignment, not path-length
interference.

Serialized grid format POLG (little endian): magic "POLG", version u32,
dims (n_radius u32, n_depth u32), bin widths f64 um, then row-major f64
arrays in field order sum_W, I, Q, U, V, Re E+, Im E+, Re E-, Im E-,
count.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .transport import _stokes_pair

POLG_MAGIC = b"POLG"
POLG_VERSION = 1
N_FIELDS = 10
FIELD_NAMES = ("sum_w", "sum_i", "sum_q", "sum_u", "sum_v",
               "re_e_plus", "im_e_plus", "re_e_minus", "im_e_minus", "count")
# Two in-memory-only planes hold the per-photon DOC-weighted cross sums
# (sum of W doc_n (1 - Q/I) and W doc_n (1 - V/I) with doc_n the photon's
# own coherence, which equals Q/I for a pure state).  They are not part of
# the serialized format.
N_PLANES = 12
CHANNEL_NAMES = ("p_xx", "p_xy", "p_pp", "p_pm")

LATERAL_MODES = {"radial": 0, "x": 1, "y": 2}


class GridFormatError(ValueError):
    """Corrupt or unsupported grid file."""


def stokes_from_jones(jones):
    """(I, Q, U, V) from a lab-frame complex pair (Ex, Ey)."""
    ex = complex(jones[0])
    ey = complex(jones[1])
    if not (math.isfinite(ex.real) and math.isfinite(ex.imag)
            and math.isfinite(ey.real) and math.isfinite(ey.imag)):
        raise ValueError("Jones amplitudes must be finite")
    return _stokes_pair(ex, ey)


@dataclass
class ExitRecord:
    """One detected contribution: exit position, depth, weight, lab Jones."""

    x: float
    y: float
    max_depth: float
    weight: float
    jones: tuple


@dataclass
class DetectorGrid:
    """Accumulator over (depth, lateral) bins plus an overflow bucket."""

    n_radius: int
    n_depth: int
    dr: float
    dz: float
    lateral_mode: str = "radial"
    data: np.ndarray = None
    overflow: np.ndarray = None

    def __post_init__(self):
        if self.n_radius < 1 or self.n_depth < 1:
            raise ValueError("grid needs at least one bin per axis")
        if self.dr <= 0 or self.dz <= 0:
            raise ValueError("bin widths must be > 0")
        if self.lateral_mode not in LATERAL_MODES:
            raise ValueError(f"unknown lateral mode {self.lateral_mode!r}")
        if self.data is None:
            self.data = np.zeros((self.n_depth, self.n_radius, N_PLANES))
        elif self.data.shape[2] == N_FIELDS:
            pad = np.zeros((self.n_depth, self.n_radius, N_PLANES - N_FIELDS))
            self.data = np.concatenate([self.data, pad], axis=2)
        if self.overflow is None:
            self.overflow = np.zeros(N_PLANES)
        elif self.overflow.shape[0] == N_FIELDS:
            self.overflow = np.concatenate(
                [self.overflow, np.zeros(N_PLANES - N_FIELDS)])

    def same_geometry(self, other: "DetectorGrid") -> bool:
        return (self.n_radius == other.n_radius and self.n_depth == other.n_depth
                and self.dr == other.dr and self.dz == other.dz
                and self.lateral_mode == other.lateral_mode)

    @property
    def sum_w(self):
        return self.data[:, :, 0]

    @property
    def sum_i(self):
        return self.data[:, :, 1]

    @property
    def sum_q(self):
        return self.data[:, :, 2]

    @property
    def sum_u(self):
        return self.data[:, :, 3]

    @property
    def sum_v(self):
        return self.data[:, :, 4]

    @property
    def sum_e_plus(self):
        return self.data[:, :, 5] + 1j * self.data[:, :, 6]

    @property
    def sum_e_minus(self):
        return self.data[:, :, 7] + 1j * self.data[:, :, 8]

    @property
    def counts(self):
        return self.data[:, :, 9]

    def total_weight(self) -> float:
        return float(np.sum(self.data[:, :, 0]) + self.overflow[0])

    def copy(self) -> "DetectorGrid":
        return DetectorGrid(self.n_radius, self.n_depth, self.dr, self.dz,
                            self.lateral_mode, self.data.copy(),
                            self.overflow.copy())


def accumulate(grid: DetectorGrid, record: ExitRecord) -> None:
    """Add one W-weighted exit or partial deposit into its (lateral, depth) bin.

    Out-of-range contributions land in the overflow bucket (counted and
    reported, never silently dropped).
    """
    ex = complex(record.jones[0])
    ey = complex(record.jones[1])
    i, q, u, v = _stokes_pair(ex, ey)
    w = float(record.weight)
    sw = math.sqrt(w)
    e_plus = sw * (ex - 1j * ey) / math.sqrt(2.0)
    e_minus = sw * (ex + 1j * ey) / math.sqrt(2.0)

    mode = LATERAL_MODES[grid.lateral_mode]
    if mode == 0:
        lb = int(math.hypot(record.x, record.y) / grid.dr)
    elif mode == 1:
        lb = int(math.floor(record.x / grid.dr)) + grid.n_radius // 2
    else:
        lb = int(math.floor(record.y / grid.dr)) + grid.n_radius // 2
    db = int(record.max_depth / grid.dz)

    if 0 <= lb < grid.n_radius and 0 <= db < grid.n_depth:
        tgt = grid.data[db, lb]
    else:
        tgt = grid.overflow
    tgt[0] += w
    tgt[1] += w * i
    tgt[2] += w * q
    tgt[3] += w * u
    tgt[4] += w * v
    tgt[5] += e_plus.real
    tgt[6] += e_plus.imag
    tgt[7] += e_minus.real
    tgt[8] += e_minus.imag
    tgt[9] += 1.0
    doc_n = q / i if i > 0.0 else 0.0
    tgt[10] += w * doc_n * (1.0 - (q / i if i > 0.0 else 0.0))
    tgt[11] += w * doc_n * (1.0 - (v / i if i > 0.0 else 0.0))


def merge_grids(a: DetectorGrid, b: DetectorGrid) -> DetectorGrid:
    if not a.same_geometry(b):
        raise ValueError("grid geometries differ; cannot merge")
    return DetectorGrid(a.n_radius, a.n_depth, a.dr, a.dz, a.lateral_mode,
                        a.data + b.data, a.overflow + b.overflow)


def _plus_minus_pair(base, ratio):
    # Build W(1 + r) and W(1 - r) so their float sum is exactly 2W: the
    # larger member is rounded once, the smaller derived by a subtraction
    # from 2W that is exact by the Sterbenz lemma (the operands are within
    # a factor of two for |r| <= 1, which the mixture bound guarantees).
    r = np.clip(ratio, -1.0, 1.0)
    big = base * (1.0 + np.abs(r))
    small = 2.0 * base - big
    plus = np.where(r >= 0.0, big, small)
    minus = np.where(r >= 0.0, small, big)
    return plus, minus


def channels(grid: DetectorGrid) -> dict:
    """Per-bin polarization channels from the aggregate Stokes ratios.

    p_xx/p_xy use (1 +/- Q/I), p_pp/p_pm use (1 +/- V/I), each scaled by
    the bin's summed weight.  Empty bins (sum_I = 0) give 0 in all four.
    """
    si = grid.sum_i
    with np.errstate(divide="ignore", invalid="ignore"):
        q_ratio = np.where(si > 0.0, grid.sum_q / np.where(si > 0, si, 1.0), 0.0)
        v_ratio = np.where(si > 0.0, grid.sum_v / np.where(si > 0, si, 1.0), 0.0)
    base = np.where(si > 0.0, grid.sum_w, 0.0)
    p_xx, p_xy = _plus_minus_pair(base, q_ratio)
    p_pp, p_pm = _plus_minus_pair(base, v_ratio)
    return {"p_xx": p_xx, "p_xy": p_xy, "p_pp": p_pp, "p_pm": p_pm}


def degree_of_coherence(grid: DetectorGrid) -> np.ndarray:
    """Per-bin DOC = 2 Re(E+ conj(E-)) / (|E+|^2 + |E-|^2), in [-1, 1].

    Bins where both field sums vanish return 0 by convention.
    """
    ep = grid.sum_e_plus
    em = grid.sum_e_minus
    denom = np.abs(ep) ** 2 + np.abs(em) ** 2
    num = 2.0 * np.real(ep * np.conj(em))
    doc = np.where(denom > 0.0, num / np.where(denom > 0, denom, 1.0), 0.0)
    # Cauchy-Schwarz holds exactly; clip the few-ulp float residue.
    return np.clip(doc, -1.0, 1.0)


def doc_weighted_cross_channels(grid: DetectorGrid, per_photon=False) -> dict:
    """Cross channels scaled by the degree of coherence.

    The default scales the bin's cross channels by the bin-aggregate DOC.
    With ``per_photon=True`` the DOC factor sits inside the photon sum
    instead (each photon weighted by its own coherence, which is Q/I for a
    pure state); these sums live in the in-memory planes and are not part
    of the serialized grid.
    """
    if per_photon:
        return {"p_xy_doc": grid.data[:, :, 10].copy(),
                "p_pm_doc": grid.data[:, :, 11].copy()}
    ch = channels(grid)
    doc = degree_of_coherence(grid)
    return {"p_xy_doc": doc * ch["p_xy"], "p_pm_doc": doc * ch["p_pm"]}


def bscan_image(grid: DetectorGrid, channel: str) -> np.ndarray:
    """Channel values as a depth-by-lateral matrix (row 0 at the surface)."""
    if channel in CHANNEL_NAMES:
        return channels(grid)[channel]
    if channel in ("p_xy_doc", "p_pm_doc"):
        return doc_weighted_cross_channels(grid)[channel]
    if channel == "doc":
        return degree_of_coherence(grid)
    if channel == "sum_w":
        return grid.sum_w.copy()
    raise ValueError(f"unknown channel {channel!r}")


# --------------------------------------------------------------------------
# Serialization.
# --------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIdd")


def write_polg(grid: DetectorGrid, path) -> None:
    payload = bytearray()
    payload += _HEADER.pack(POLG_MAGIC, POLG_VERSION, grid.n_radius,
                            grid.n_depth, grid.dr, grid.dz)
    # (depth, radius, field) -> per-field row-major planes.
    for f in range(N_FIELDS):
        payload += np.ascontiguousarray(grid.data[:, :, f], dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(payload))


def read_polg(path) -> DetectorGrid:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise GridFormatError(f"truncated header at byte {len(blob)}")
    magic, version, n_radius, n_depth, dr, dz = _HEADER.unpack_from(blob, 0)
    if magic != POLG_MAGIC:
        raise GridFormatError("bad magic at byte 0; not a POLG file")
    if version != POLG_VERSION:
        raise GridFormatError(f"unsupported POLG version {version} at byte 4")
    need = _HEADER.size + N_FIELDS * n_radius * n_depth * 8
    if len(blob) != need:
        raise GridFormatError(
            f"payload size mismatch at byte {min(len(blob), need)}: "
            f"expected {need} bytes, got {len(blob)}")
    data = np.zeros((n_depth, n_radius, N_FIELDS))
    off = _HEADER.size
    plane = n_radius * n_depth * 8
    for f in range(N_FIELDS):
        arr = np.frombuffer(blob, dtype="<f8", count=n_radius * n_depth,
                            offset=off).reshape(n_depth, n_radius)
        data[:, :, f] = arr
        off += plane
    return DetectorGrid(n_radius, n_depth, dr, dz, "radial", data)


def write_grid_csv(grid: DetectorGrid, path) -> None:
    ch = channels(grid)
    doc = degree_of_coherence(grid)
    with open(path, "w") as fh:
        fh.write("depth_bin,lateral_bin,sum_w,sum_i,sum_q,sum_u,sum_v,"
                 "p_xx,p_xy,p_pp,p_pm,doc,count\n")
        for db in range(grid.n_depth):
            for lb in range(grid.n_radius):
                row = grid.data[db, lb]
                fh.write(f"{db},{lb},{row[0]:.12g},{row[1]:.12g},{row[2]:.12g},"
                         f"{row[3]:.12g},{row[4]:.12g},"
                         f"{ch['p_xx'][db, lb]:.12g},{ch['p_xy'][db, lb]:.12g},"
                         f"{ch['p_pp'][db, lb]:.12g},{ch['p_pm'][db, lb]:.12g},"
                         f"{doc[db, lb]:.12g},{int(row[9])}\n")


def write_pgm(image: np.ndarray, path) -> dict:
    """8-bit P5 graymap with min-max scaling; returns the scaling metadata.

    An all-constant image maps to 0 everywhere (documented convention).
    """
    img = np.asarray(image, dtype=np.float64)
    lo = float(np.min(img))
    hi = float(np.max(img))
    if hi > lo:
        scaled = np.round((img - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        scaled = np.zeros(img.shape, dtype=np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header + scaled.tobytes())
    return {"min": lo, "max": hi, "rows": int(img.shape[0]),
            "cols": int(img.shape[1]), "scaling": "linear min-max to 0..255"}
