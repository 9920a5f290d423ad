"""Property sweeps over simulated media and labeled feature extraction.

A sweep samples optical properties from a low-discrepancy (Kronecker /
R_d) sequence, runs one simulation per sample, and flattens the four
polarization-channel B-scans into a fixed-length feature vector labeled
with the sampled property values.  Features are per-launched-photon
normalized channel images downsampled by block sums.

Dataset file POLD (little endian): magic "POLD", version u32, feature
length u32, target length u32, sample count u32, target-name block
(u32 length + UTF-8 JSON list), then per sample: features f64[],
targets f64[], seed u64, config-hash u64.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import detection, engine

POLD_MAGIC = b"POLD"
POLD_VERSION = 1

# Medium fields that a sweep may vary.
SWEEPABLE = ("n_particle", "number_density", "mu_a", "delta_n", "chi")


class DatasetError(ValueError):
    pass


@dataclass
class TrainingSample:
    features: np.ndarray
    target: np.ndarray
    seed: int
    config_hash: int


@dataclass
class Dataset:
    samples: list
    target_names: tuple

    def __len__(self):
        return len(self.samples)

    @property
    def feature_len(self):
        return 0 if not self.samples else self.samples[0].features.shape[0]

    @property
    def target_len(self):
        return len(self.target_names)

    def feature_matrix(self):
        return np.stack([s.features for s in self.samples])

    def target_matrix(self):
        return np.stack([s.target for s in self.samples])


def halton_like_offsets(dim: int, n: int, seed: int) -> np.ndarray:
    """R_d additive-recurrence sequence in [0, 1)^dim, seeded by a shift.

    Deterministic for a given seed and better spread than pseudo-random
    draws at small n.
    """
    # Root of x^(d+1) = x + 1 (golden ratio for d = 1).
    g = 2.0
    for _ in range(32):
        g = (1.0 + g) ** (1.0 / (dim + 1))
    alphas = np.array([(1.0 / g) ** (j + 1) for j in range(dim)])
    shift = (int(seed) * 0x9E3779B97F4A7C15) % (1 << 64)
    base = shift / 2.0 ** 64
    idx = np.arange(1, n + 1, dtype=np.float64)[:, None]
    return np.mod(base + idx * alphas[None, :], 1.0)


def extract_features(grid: detection.DetectorGrid, launched_weight: float,
                     shape=(16, 16)) -> np.ndarray:
    """Flattened per-photon-normalized channel images at a reduced resolution."""
    rows, cols = shape
    if grid.n_depth % rows or grid.n_radius % cols:
        raise DatasetError(
            f"grid {grid.n_depth}x{grid.n_radius} not divisible by "
            f"feature shape {rows}x{cols}")
    ch = detection.channels(grid)
    feats = []
    for name in detection.CHANNEL_NAMES:
        img = ch[name]
        blocked = img.reshape(rows, grid.n_depth // rows,
                              cols, grid.n_radius // cols).sum(axis=(1, 3))
        feats.append(blocked / launched_weight)
    out = np.concatenate([f.ravel() for f in feats])
    if not np.all(np.isfinite(out)):
        raise DatasetError("non-finite feature encountered")
    return out


def sweep(base_config, property_ranges: dict, n_samples: int, seed: int,
          feature_shape=(16, 16)):
    """Run one simulation per property sample and collect labeled features.

    Returns (dataset, report); failed samples are skipped and counted in
    the report rather than aborting the sweep.
    """
    if n_samples < 10:
        raise DatasetError("n_samples must be >= 10")
    names = tuple(property_ranges.keys())
    for name in names:
        if name not in SWEEPABLE:
            raise DatasetError(f"cannot sweep {name!r}; choose from {SWEEPABLE}")
        lo, hi = property_ranges[name]
        if hi < lo:
            raise DatasetError(f"range for {name!r} is reversed")
    u = halton_like_offsets(len(names), n_samples, seed)
    lows = np.array([property_ranges[n][0] for n in names])
    highs = np.array([property_ranges[n][1] for n in names])
    targets = lows[None, :] + u * (highs - lows)[None, :]

    samples = []
    failures = []
    for i in range(n_samples):
        med = replace(base_config.medium,
                      **{n: float(targets[i, j]) for j, n in enumerate(names)})
        cfg = replace(base_config, medium=med, seed=seed + 1 + i)
        try:
            result = engine.run(cfg)
            feats = extract_features(result.grid, result.ledger["launched"],
                                     feature_shape)
        except Exception as exc:  # noqa: BLE001 - per-sample isolation
            failures.append((i, repr(exc)))
            continue
        samples.append(TrainingSample(features=feats,
                                      target=targets[i].copy(),
                                      seed=cfg.seed,
                                      config_hash=cfg.config_hash()))
    report = {"requested": n_samples, "completed": len(samples),
              "failed": len(failures), "failures": failures}
    return Dataset(samples=samples, target_names=names), report


def split(dataset: Dataset, train_fraction: float = 0.7, seed: int = 0):
    """Seeded shuffle, then a ceil(train_fraction N) / remainder partition."""
    n = len(dataset)
    if n < 4:
        raise DatasetError("need at least 4 samples to split")
    order = np.random.default_rng(seed).permutation(n)
    n_train = math.ceil(train_fraction * n)
    train = Dataset([dataset.samples[i] for i in order[:n_train]],
                    dataset.target_names)
    test = Dataset([dataset.samples[i] for i in order[n_train:]],
                   dataset.target_names)
    return train, test


@dataclass
class NormParams:
    mean: np.ndarray
    scale: np.ndarray  # reciprocal std; 0 flags a constant feature

    def to_arrays(self):
        return self.mean, self.scale


def fit_normalization(dataset: Dataset) -> NormParams:
    x = dataset.feature_matrix()
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    scale = np.where(std > 0.0, 1.0 / np.where(std > 0, std, 1.0), 0.0)
    return NormParams(mean=mean, scale=scale)


def apply_normalization(dataset: Dataset, params: NormParams) -> Dataset:
    out = []
    for s in dataset.samples:
        feats = (s.features - params.mean) * params.scale
        out.append(TrainingSample(feats, s.target.copy(), s.seed, s.config_hash))
    return Dataset(out, dataset.target_names)


def denormalize_features(features: np.ndarray, params: NormParams) -> np.ndarray:
    """Inverse of apply_normalization where the scale is nonzero."""
    inv = np.where(params.scale > 0.0, 1.0 / np.where(params.scale > 0,
                                                      params.scale, 1.0), 0.0)
    return features * inv + params.mean


def normalize_features(dataset: Dataset):
    """Fit zero-mean unit-variance parameters on this (training) set and
    apply them; constant features map to 0 and stay flagged in the params."""
    params = fit_normalization(dataset)
    return apply_normalization(dataset, params), params


def write_pold(dataset: Dataset, path) -> None:
    if not dataset.samples:
        raise DatasetError("refusing to write an empty dataset")
    f_len = dataset.feature_len
    t_len = dataset.target_len
    names_blob = json.dumps(list(dataset.target_names)).encode()
    buf = bytearray()
    buf += struct.pack("<4sIIII", POLD_MAGIC, POLD_VERSION, f_len, t_len,
                       len(dataset.samples))
    buf += struct.pack("<I", len(names_blob)) + names_blob
    for s in dataset.samples:
        buf += np.asarray(s.features, dtype="<f8").tobytes()
        buf += np.asarray(s.target, dtype="<f8").tobytes()
        buf += struct.pack("<QQ", s.seed, s.config_hash)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(buf))
    import os
    os.replace(tmp, path)


def write_csv(dataset: Dataset, path) -> None:
    """Plain-text export: one row per sample, features then targets."""
    if not dataset.samples:
        raise DatasetError("refusing to write an empty dataset")
    f_len = dataset.feature_len
    header = ([f"f{i}" for i in range(f_len)]
              + list(dataset.target_names) + ["seed", "config_hash"])
    lines = [",".join(header)]
    for s in dataset.samples:
        vals = [f"{v:.12g}" for v in s.features] + \
            [f"{v:.12g}" for v in s.target] + [str(s.seed), str(s.config_hash)]
        lines.append(",".join(vals))
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    import os
    os.replace(tmp, path)


def read_pold(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    head = struct.Struct("<4sIIII")
    if len(blob) < head.size:
        raise DatasetError(f"truncated header at byte {len(blob)}")
    magic, version, f_len, t_len, count = head.unpack_from(blob, 0)
    if magic != POLD_MAGIC:
        raise DatasetError("bad magic at byte 0; not a POLD file")
    if version != POLD_VERSION:
        raise DatasetError(f"unsupported POLD version {version}")
    off = head.size
    (name_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    names = tuple(json.loads(blob[off:off + name_len].decode()))
    off += name_len
    samples = []
    rec = f_len * 8 + t_len * 8 + 16
    if len(blob) != off + rec * count:
        raise DatasetError(f"payload size mismatch at byte {off}")
    for _ in range(count):
        feats = np.frombuffer(blob, dtype="<f8", count=f_len, offset=off).copy()
        off += f_len * 8
        tgt = np.frombuffer(blob, dtype="<f8", count=t_len, offset=off).copy()
        off += t_len * 8
        seed, chash = struct.unpack_from("<QQ", blob, off)
        off += 16
        samples.append(TrainingSample(feats, tgt, seed, chash))
    return Dataset(samples, names)
