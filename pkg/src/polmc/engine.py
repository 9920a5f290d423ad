"""Parallel photon-batch orchestration with reproducible streams.

Photons are data-parallel: each index owns a counter-based RNG stream keyed
by (seed, index), workers share the immutable Mie table and medium, and
every worker accumulates into private arrays.  Photons are processed in
fixed 4096-index chunks and the per-chunk results are combined by a
canonical binary tree over the chunk order, so the merged grid is
bit-identical for any worker count and any scheduling, and a run split
into chunk-aligned pieces merges back to exactly the single-run result.

The energy ledger closes by construction:
launched = detected_top + detected_bottom + absorbed + terminated,
where Russian-roulette survival bonuses enter "terminated" with negative
sign (net-zero in expectation).
"""

from __future__ import annotations

import json
import math
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import detection, mie, transport
from .rng import rng_stream  # noqa: F401 - the engine owns the stream contract
from .transport import (DIAG_SIZE, PARAMS_SIZE, MediumSpec, TransportError,
                        propagate_kernel)

CHUNK = 4096

_LEDGER_KEYS = ("launched", "detected_top", "detected_bottom", "absorbed",
                "terminated", "deposited")


class ConfigError(ValueError):
    """Invalid simulation configuration; message itemizes the problems."""


@dataclass
class DetectorConfig:
    n_radius: int = 64
    n_depth: int = 64
    dr: float = 4.0
    dz: float = 4.0
    solid_angle: float = transport.DETECTOR_SOLID_ANGLE
    acceptance: str = "all"  # "all" or "cone" (analog mode only)
    lateral_mode: str = "radial"

    def to_dict(self):
        return dict(n_radius=self.n_radius, n_depth=self.n_depth, dr=self.dr,
                    dz=self.dz, solid_angle=self.solid_angle,
                    acceptance=self.acceptance, lateral_mode=self.lateral_mode)


@dataclass
class VarianceReduction:
    roulette_threshold: float = transport.ROULETTE_THRESHOLD
    roulette_survival: float = transport.ROULETTE_SURVIVAL
    partial_photon: bool = False

    def to_dict(self):
        return dict(roulette_threshold=self.roulette_threshold,
                    roulette_survival=self.roulette_survival,
                    partial_photon=self.partial_photon)


@dataclass
class SimConfig:
    medium: MediumSpec
    wavelength: float
    n_photons: int
    seed: int = 0
    source_polarization: str = "linear_x"
    custom_jones: tuple = None
    incidence_angle: float = 0.0
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    variance_reduction: VarianceReduction = field(default_factory=VarianceReduction)
    n_workers: int = 0  # 0 = auto
    max_steps: int = transport.MAX_STEPS
    n_theta: int = mie.DEFAULT_N_THETA
    coherent_probe: bool = False
    photon_index_offset: int = 0

    def validate(self):
        problems = []
        if self.n_photons < 1:
            problems.append("n_photons must be >= 1")
        if self.wavelength <= 0:
            problems.append("wavelength must be > 0")
        if self.detector.dr <= 0 or self.detector.dz <= 0:
            problems.append("detector bin widths must be > 0")
        if self.detector.n_radius < 1 or self.detector.n_depth < 1:
            problems.append("detector bin counts must be >= 1")
        if self.detector.solid_angle <= 0 or self.detector.solid_angle > 2 * math.pi:
            problems.append("detector solid angle must lie in (0, 2 pi]")
        if self.detector.acceptance not in ("all", "cone"):
            problems.append("acceptance must be 'all' or 'cone'")
        if self.detector.lateral_mode not in detection.LATERAL_MODES:
            problems.append("lateral_mode must be radial, x or y")
        if not (0 < self.variance_reduction.roulette_survival < 1):
            problems.append("roulette survival must lie in (0, 1)")
        if self.variance_reduction.roulette_threshold < 0:
            problems.append("roulette threshold must be >= 0")
        if not (0 <= self.incidence_angle < math.pi / 2):
            problems.append("incidence angle must lie in [0, pi/2)")
        if self.max_steps < 1:
            problems.append("max_steps must be >= 1")
        if self.source_polarization != "custom" and \
                self.source_polarization not in transport.SOURCE_JONES:
            problems.append(f"unknown source polarization "
                            f"{self.source_polarization!r}")
        if self.source_polarization == "custom" and self.custom_jones is None:
            problems.append("custom polarization requires custom_jones")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self):
        return {
            "medium": self.medium.to_dict(),
            "wavelength": self.wavelength,
            "n_photons": self.n_photons,
            "seed": self.seed,
            "source_polarization": self.source_polarization,
            "custom_jones": (None if self.custom_jones is None else
                             [[complex(c).real, complex(c).imag]
                              for c in self.custom_jones]),
            "incidence_angle": self.incidence_angle,
            "detector": self.detector.to_dict(),
            "variance_reduction": self.variance_reduction.to_dict(),
            "n_workers": self.n_workers,
            "max_steps": self.max_steps,
            "n_theta": self.n_theta,
            "coherent_probe": self.coherent_probe,
            "photon_index_offset": self.photon_index_offset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        d["medium"] = MediumSpec.from_dict(d["medium"])
        if d.get("detector") is not None:
            d["detector"] = DetectorConfig(**d["detector"])
        if d.get("variance_reduction") is not None:
            d["variance_reduction"] = VarianceReduction(**d["variance_reduction"])
        cj = d.get("custom_jones")
        if cj is not None:
            d["custom_jones"] = tuple(complex(re, im) for re, im in cj)
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SimConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def config_hash(self) -> int:
        """Stable 64-bit hash of the configuration for provenance records."""
        import hashlib
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


@dataclass
class SimResult:
    grid: detection.DetectorGrid
    ledger: dict
    diagnostics: dict
    n_photons: int

    def ledger_balance(self) -> float:
        """Relative imbalance of the energy ledger."""
        led = self.ledger
        out = (led["detected_top"] + led["detected_bottom"]
               + led["absorbed"] + led["terminated"])
        return abs(out - led["launched"]) / max(led["launched"], 1.0)


def _launch_vectors(config: SimConfig):
    pol = config.source_polarization
    custom = config.custom_jones if pol == "custom" else None
    ph = transport.Photon.launch(
        polarization=pol if pol != "custom" else "linear_x",
        incidence_angle=config.incidence_angle,
        custom_jones=custom)
    return ph


def _probe_prefactor(config: SimConfig, table: mie.MieTable) -> complex:
    """Deterministic prefactor of the first-scattering coherent amplitude.

    The specular reflected amplitude of the singly scattered coherent field
    is q * integral_0^L exp((2 i k_z - mu_t / cos) z) dz with
    q = -2 pi rho S_co / (k^2 cos); the depth integral is taken in closed
    form because a sampled phase exp(2 i k_z z) has irreducible variance
    vastly larger than the coherent residue.  Each photon with a first
    scattering event deposits prefactor * S_co drawn from its own state;
    dividing by the first-interaction probability keeps the estimator
    unbiased over launched photons.
    """
    k = 2.0 * math.pi * config.medium.n_host / config.wavelength
    cos_i = math.cos(config.incidence_angle)
    mu_t = table.mu_s + config.medium.mu_a
    L = config.medium.thickness
    alpha = complex(-mu_t / cos_i, 2.0 * k * cos_i)
    j_integral = (np.exp(alpha * L) - 1.0) / alpha
    p_first = 1.0 - math.exp(-table.mu_s * L / cos_i)
    if p_first <= 0.0:
        return 0.0 + 0.0j
    rho = config.medium.number_density
    return -(2.0 * math.pi * rho / (k * k * cos_i)) * j_integral / p_first


def _build_params(config: SimConfig, table: mie.MieTable) -> np.ndarray:
    p = np.zeros(PARAMS_SIZE)
    med = config.medium
    p[transport._P_MU_S] = table.mu_s
    p[transport._P_MU_A] = med.mu_a
    p[transport._P_THICKNESS] = med.thickness
    p[transport._P_DELTA_N] = med.delta_n
    p[transport._P_CHI] = med.chi
    p[transport._P_AX], p[transport._P_AY], p[transport._P_AZ] = \
        med.birefringence_axis
    p[transport._P_WAVELENGTH] = config.wavelength
    p[transport._P_PHASE_NORM] = table.phase_norm
    p[transport._P_MAX_S11] = table.max_s11
    det = config.detector
    p[transport._P_DR] = det.dr
    p[transport._P_NRADIUS] = det.n_radius
    p[transport._P_DZ] = det.dz
    p[transport._P_NDEPTH] = det.n_depth
    p[transport._P_SOLID_ANGLE] = det.solid_angle
    if det.acceptance == "cone":
        p[transport._P_COS_ACCEPT] = 1.0 - det.solid_angle / (2.0 * math.pi)
    else:
        p[transport._P_COS_ACCEPT] = -2.0  # accept every top exit
    vr = config.variance_reduction
    p[transport._P_PARTIAL] = 1.0 if vr.partial_photon else 0.0
    p[transport._P_RThresh] = vr.roulette_threshold
    p[transport._P_RSURV] = vr.roulette_survival
    p[transport._P_MAX_STEPS] = config.max_steps
    p[transport._P_LATERAL_MODE] = detection.LATERAL_MODES[det.lateral_mode]

    ph = _launch_vectors(config)
    p[transport._P_LDX:transport._P_LDX + 3] = ph.direction
    p[transport._P_LMX:transport._P_LMX + 3] = ph.frame_m
    p[transport._P_LNX:transport._P_LNX + 3] = ph.frame_n
    p[transport._P_EP_RE] = ph.jones[0].real
    p[transport._P_EP_IM] = ph.jones[0].imag
    p[transport._P_EQ_RE] = ph.jones[1].real
    p[transport._P_EQ_IM] = ph.jones[1].imag

    if config.coherent_probe:
        pre = _probe_prefactor(config, table)
        p[transport._P_PROBE_ON] = 1.0
        p[transport._P_PROBE_TX] = ph.direction[0]
        p[transport._P_PROBE_TY] = ph.direction[1]
        p[transport._P_PROBE_TZ] = -ph.direction[2]
        p[transport._P_PROBE_PRE_RE] = pre.real
        p[transport._P_PROBE_PRE_IM] = pre.imag
        # TE analyzer: the launch n_hat axis (y for the x-z incidence plane).
        p[transport._P_PROBE_AX:transport._P_PROBE_AX + 3] = ph.frame_n
    return p


def _run_chunk(seed, start, count, params, table, det_cfg):
    grid = np.zeros((det_cfg.n_depth, det_cfg.n_radius, detection.N_PLANES))
    overflow = np.zeros(detection.N_PLANES)
    ledger = np.zeros(6)
    diag = np.zeros(DIAG_SIZE)
    state = np.zeros(transport.STATE_SIZE)
    for i in range(count):
        ev = propagate_kernel(np.uint64(seed), np.uint64(start + i), params,
                              table.s1, table.s2, table.s11, table.s12,
                              grid, overflow, ledger, diag, state)
        if ev == transport._EVENT_REJECTION_FAIL:
            raise TransportError(
                f"rejection cap hit for photon {start + i}; envelope broken")
    return grid, overflow, ledger, diag


_WORKER_CTX = {}


def _worker_init(seed, params, table, det_cfg):
    _WORKER_CTX["args"] = (seed, params, table, det_cfg)


def _worker_chunk(span):
    seed, params, table, det_cfg = _WORKER_CTX["args"]
    start, count = span
    return _run_chunk(seed, start, count, params, table, det_cfg)


def _tree_reduce(parts):
    """Canonical binary-tree sum over chunk order.

    The split point is the largest power of two below the length, so any
    run whose chunk count is split at such a boundary merges back
    bit-identically (float addition order is preserved).
    """
    n = len(parts)
    if n == 1:
        return parts[0]
    split = 1
    while split * 2 < n:
        split *= 2
    left = _tree_reduce(parts[:split])
    right = _tree_reduce(parts[split:])
    return tuple(a + b for a, b in zip(left, right))


def run(config: SimConfig, table: mie.MieTable = None) -> SimResult:
    """Simulate config.n_photons photons; deterministic for a given seed."""
    config.validate()
    config.medium.check_validity()
    if table is None:
        table = mie.build_mie_table(config.medium, config.wavelength,
                                    config.n_theta)
    params = _build_params(config, table)
    det_cfg = config.detector

    offset = config.photon_index_offset
    spans = []
    start = offset
    end = offset + config.n_photons
    while start < end:
        count = min(CHUNK, end - start)
        spans.append((start, count))
        start += count

    n_workers = config.n_workers or (os.cpu_count() or 1)
    t0 = time.perf_counter()
    if n_workers <= 1 or len(spans) == 1:
        parts = [_run_chunk(config.seed, s, c, params, table, det_cfg)
                 for s, c in spans]
    else:
        ctx = multiprocessing.get_context("fork")
        # Warm the JIT cache before forking so children reuse it.
        _run_chunk(config.seed, offset, 1, params, table, det_cfg)
        with ProcessPoolExecutor(
                max_workers=n_workers, mp_context=ctx,
                initializer=_worker_init,
                initargs=(config.seed, params, table, det_cfg)) as pool:
            parts = list(pool.map(_worker_chunk, spans))
    grid_arr, overflow, ledger_arr, diag = _tree_reduce(parts)
    wall = time.perf_counter() - t0

    grid = detection.DetectorGrid(det_cfg.n_radius, det_cfg.n_depth,
                                  det_cfg.dr, det_cfg.dz,
                                  det_cfg.lateral_mode, grid_arr, overflow)
    ledger = {k: float(v) for k, v in zip(_LEDGER_KEYS, ledger_arr)}
    diagnostics = _diagnostics_dict(diag, config, wall)
    return SimResult(grid=grid, ledger=ledger, diagnostics=diagnostics,
                     n_photons=config.n_photons)


# Raw counters sum under merge; ratios are re-derived afterwards.
_RAW_DIAG_KEYS = (
    "n_exit_top", "n_exit_bottom", "n_absorbed", "n_roulette_killed",
    "n_step_cap", "total_steps", "rejection_trials", "rejection_events",
    "n_deposits", "wall_time_s",
    "mirror_top_weight_pos_y", "mirror_top_weight_neg_y",
    "mirror_top_count_pos_y", "mirror_top_count_neg_y",
    "probe_sum_re", "probe_sum_im", "probe_sum_re2", "probe_sum_im2",
    "probe_first_events", "probe_n_launched",
)


def _diagnostics_dict(diag, config, wall):
    d = {
        "n_exit_top": int(diag[transport._D_NTOP]),
        "n_exit_bottom": int(diag[transport._D_NBOTTOM]),
        "n_absorbed": int(diag[transport._D_NABSORBED]),
        "n_roulette_killed": int(diag[transport._D_NROULETTE]),
        "n_step_cap": int(diag[transport._D_NSTEPCAP]),
        "total_steps": int(diag[transport._D_STEPS]),
        "rejection_trials": int(diag[transport._D_REJ_TRIALS]),
        "rejection_events": int(diag[transport._D_REJ_EVENTS]),
        "n_deposits": int(diag[transport._D_NDEPOSITS]),
        "wall_time_s": wall,
        "mirror_top_weight_pos_y": float(diag[transport._D_SYM_POS_W]),
        "mirror_top_weight_neg_y": float(diag[transport._D_SYM_NEG_W]),
        "mirror_top_count_pos_y": int(diag[transport._D_SYM_POS_N]),
        "mirror_top_count_neg_y": int(diag[transport._D_SYM_NEG_N]),
    }
    if config.coherent_probe:
        d["probe_sum_re"] = float(diag[transport._D_PROBE_RE])
        d["probe_sum_im"] = float(diag[transport._D_PROBE_IM])
        d["probe_sum_re2"] = float(diag[transport._D_PROBE_RE2])
        d["probe_sum_im2"] = float(diag[transport._D_PROBE_IM2])
        d["probe_first_events"] = int(diag[transport._D_PROBE_N])
        d["probe_n_launched"] = config.n_photons
    _derive_diagnostics(d)
    return d


def _derive_diagnostics(d: dict) -> None:
    trials = d.get("rejection_trials", 0)
    d["rejection_efficiency"] = (d["rejection_events"] / trials
                                 if trials > 0 else 1.0)
    if "probe_sum_re" in d:
        n = d["probe_n_launched"]
        m_re = d["probe_sum_re"] / n
        m_im = d["probe_sum_im"] / n
        var_re = max(d["probe_sum_re2"] / n - m_re * m_re, 0.0) / max(n - 1, 1)
        var_im = max(d["probe_sum_im2"] / n - m_im * m_im, 0.0) / max(n - 1, 1)
        d["probe_amplitude_re"] = m_re
        d["probe_amplitude_im"] = m_im
        d["probe_reflectance"] = m_re * m_re + m_im * m_im
        d["probe_reflectance_stderr"] = 2.0 * math.sqrt(
            m_re * m_re * var_re + m_im * m_im * var_im)


def merge(results) -> SimResult:
    """Element-wise sum of results with identical grid geometry."""
    results = list(results)
    if not results:
        raise ValueError("nothing to merge")
    out = results[0]
    for r in results[1:]:
        if not out.grid.same_geometry(r.grid):
            raise ValueError("grid geometries differ; cannot merge")
        grid = detection.merge_grids(out.grid, r.grid)
        ledger = {k: out.ledger[k] + r.ledger[k] for k in out.ledger}
        diagnostics = {}
        for k in _RAW_DIAG_KEYS:
            if k in out.diagnostics or k in r.diagnostics:
                diagnostics[k] = (out.diagnostics.get(k, 0)
                                  + r.diagnostics.get(k, 0))
        _derive_diagnostics(diagnostics)
        out = SimResult(grid=grid, ledger=ledger, diagnostics=diagnostics,
                        n_photons=out.n_photons + r.n_photons)
    return out
