"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test prints a single PASS/FAIL line (run pytest with -s or check the
captured output).  Numbered configurations:

1. reflectance validation against the effective-medium theory
2. energy-ledger conservation over a 9-point parameter matrix
3. phase-function sampling chi-square at three size parameters
4. Mie internal-consistency oracles
5. polarization-channel algebraic identities
6. co-polarization loss with depth for linear and circular sources
7. bit-identical grids across worker counts
8. network numerics (gradients, linear task, annealing, split)
9. end-to-end sweep -> train -> infer pipeline
"""

import math
import time

import numpy as np
from scipy import stats

from polmc import dataset as ds
from polmc import detection, engine, inverse, mie, oracle
from polmc.engine import DetectorConfig, SimConfig, VarianceReduction
from polmc.transport import MediumSpec
from stat_helpers import chi2_pvalue

WAVELENGTH = 0.632  # um
RADIUS = 0.07       # um


def _report(name, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def medium_with_volume_fraction(f, thickness, **kw):
    density = f / ((4.0 / 3.0) * math.pi * RADIUS ** 3)
    return MediumSpec(particle_radius=RADIUS, n_particle=1.2, n_host=1.0,
                      number_density=density, thickness=thickness, **kw)


def test_criterion_1_reflectance_validation():
    # Dilute medium (volume fraction 1e-3), normal incidence, 1e6 photons:
    # simulated specular reflectance within max(10% relative, 3 sigma) of
    # |r_TE|^2, in at most 5 minutes on 4 cores.
    med = medium_with_volume_fraction(1e-3, thickness=60000.0)
    det = DetectorConfig(n_radius=8, n_depth=8, dr=10000.0, dz=10000.0)
    cfg = SimConfig(medium=med, wavelength=WAVELENGTH, n_photons=1_000_000,
                    seed=2026, source_polarization="custom",
                    custom_jones=(0.0 + 0.0j, 1.0 + 0.0j),
                    coherent_probe=True, detector=det, n_workers=0)
    t0 = time.perf_counter()
    res = engine.run(cfg)
    wall = time.perf_counter() - t0
    r_sim = res.diagnostics["probe_reflectance"]
    stderr = res.diagnostics["probe_reflectance_stderr"]
    r_theory = oracle.theory_reflectance(cfg)
    diff = abs(r_sim - r_theory)
    tol = max(0.10 * r_theory, 3.0 * stderr)
    ok = diff <= tol and wall <= 300.0
    _report("criterion 1 (reflectance vs theory)", ok,
            f"R_sim={r_sim:.4e} R_theory={r_theory:.4e} "
            f"rel={diff / r_theory:.2%} tol={tol:.2e} wall={wall:.0f}s")


def test_criterion_2_energy_conservation():
    # 3 x 3 matrix of (mu_a, density) with matched thickness, 1e5 photons
    # each: the ledger must balance to 1e-9 relative.
    worst = 0.0
    cases = []
    for f, thickness in ((1e-4, 60000.0), (1e-3, 20000.0), (1e-2, 3000.0)):
        for mu_a in (0.0, 1e-4, 1e-3):
            med = medium_with_volume_fraction(f, thickness=thickness,
                                              mu_a=mu_a)
            det = DetectorConfig(n_radius=16, n_depth=16, dr=200.0, dz=200.0)
            cfg = SimConfig(medium=med, wavelength=WAVELENGTH,
                            n_photons=100_000, seed=7, detector=det,
                            n_workers=0)
            res = engine.run(cfg)
            bal = res.ledger_balance()
            worst = max(worst, bal)
            cases.append(bal)
    ok = worst <= 1e-9
    _report("criterion 2 (energy ledger, 9 configs)", ok,
            f"worst relative imbalance {worst:.2e}")


def test_criterion_3_phase_function_chisquare():
    polarized = (1.0, 0.6, -0.5)
    unpolarized = (1.0, 0.0, 0.0)
    worst_p = 1.0
    details = []
    for x in (0.05, 0.696, 3.0):
        radius = x * WAVELENGTH / (2.0 * math.pi)
        med = MediumSpec(particle_radius=radius, n_particle=1.2, n_host=1.0,
                         number_density=1.0, thickness=1.0)
        table = mie.build_mie_table(med, WAVELENGTH)
        # Normalization: the table's own quadrature must integrate to 1.
        th = table.theta
        h = th[1] - th[0]
        y = table.s11 * np.sin(th) / table.phase_norm * 2.0 * math.pi
        norm = (y[0] + y[-1] + 4 * y[1:-1:2].sum() + 2 * y[2:-2:2].sum()) * h / 3
        assert abs(norm - 1.0) < 1e-6
        for tag, stokes in (("unpol", unpolarized), ("pol", polarized)):
            p = chi2_pvalue(table, stokes, 1_000_000,
                            seed=int(x * 1000) + (0 if tag == "unpol" else 1))
            worst_p = min(worst_p, p)
            details.append(f"x={x} {tag} p={p:.3f}")
    ok = worst_p > 0.01
    _report("criterion 3 (phase-function chi-square)", ok,
            "; ".join(details))


def test_criterion_4_mie_oracles():
    x = 0.696
    coeffs = mie.mie_coefficients(x, 1.2)
    _, q_ext = mie.efficiencies(x, coeffs)
    q_ext_ot = 4.0 / x ** 2 * mie.forward_amplitude(coeffs).real
    opt_ok = abs(q_ext - q_ext_ot) / q_ext < 1e-8

    c_small = mie.mie_coefficients(0.05, 1.2)
    theta = np.linspace(0.0, math.pi, 181)
    s11, _ = mie.mueller_elements(theta, c_small)
    shape_err = np.max(np.abs(s11 / s11[0] - (1 + np.cos(theta) ** 2) / 2))
    ray_ok = shape_err < 0.01

    c2 = mie.mie_coefficients(x, 1.2, 2 * mie.wiscombe_n_max(x))
    s1a, s2a = mie.amplitude_functions(theta, coeffs)
    s1b, s2b = mie.amplitude_functions(theta, c2)
    stab = max(np.max(np.abs(s1a - s1b) / np.abs(s1b)),
               np.max(np.abs(s2a - s2b) / np.abs(s2b)))
    stab_ok = stab < 1e-10

    ok = opt_ok and ray_ok and stab_ok
    _report("criterion 4 (Mie oracles)", ok,
            f"optical-theorem rel={abs(q_ext - q_ext_ot) / q_ext:.1e}, "
            f"Rayleigh shape err={shape_err:.4f}, n_max stability={stab:.1e}")


def test_criterion_5_channel_identities():
    med = medium_with_volume_fraction(1e-2, thickness=2000.0)
    det = DetectorConfig(n_radius=24, n_depth=50, dr=40.0, dz=40.0)
    cfg = SimConfig(medium=med, wavelength=WAVELENGTH, n_photons=50_000,
                    seed=11, source_polarization="linear_45", detector=det,
                    variance_reduction=VarianceReduction(partial_photon=True),
                    n_workers=0)
    res = engine.run(cfg)
    grid = res.grid
    ch = detection.channels(grid)
    populated = grid.sum_i > 0.0
    two_w = 2.0 * grid.sum_w

    sum_q_ok = np.array_equal((ch["p_xx"] + ch["p_xy"])[populated],
                              two_w[populated])
    sum_v_ok = np.array_equal((ch["p_pp"] + ch["p_pm"])[populated],
                              two_w[populated])
    doc = detection.degree_of_coherence(grid)
    doc_ok = np.all(doc >= -1.0) and np.all(doc <= 1.0)

    # DOC == 1 construction: mirror-paired records make E+ equal E-, and
    # the DOC-weighted cross channels must then equal the plain ones.
    g2 = detection.DetectorGrid(n_radius=4, n_depth=4, dr=4.0, dz=4.0)
    for k in range(40):
        j = (1.0, 0.3 + 0.05 * k)
        detection.accumulate(g2, detection.ExitRecord(0, 0, 1.0, 0.5, j))
        detection.accumulate(g2, detection.ExitRecord(0, 0, 1.0, 0.5,
                                                      (j[0], -j[1])))
    doc2 = detection.degree_of_coherence(g2)
    ch2 = detection.channels(g2)
    dch2 = detection.doc_weighted_cross_channels(g2)
    reduce_ok = (abs(doc2[0, 0] - 1.0) < 1e-12
                 and ch2["p_xy"][0, 0] > 0
                 and abs(dch2["p_xy_doc"][0, 0] - ch2["p_xy"][0, 0])
                 <= 1e-12 * ch2["p_xy"][0, 0]
                 and abs(dch2["p_pm_doc"][0, 0] - ch2["p_pm"][0, 0])
                 <= 1e-12 * ch2["p_pm"][0, 0])

    ok = sum_q_ok and sum_v_ok and doc_ok and reduce_ok
    _report("criterion 5 (channel identities)", ok,
            f"pxx+pxy exact={sum_q_ok}, ppp+ppm exact={sum_v_ok}, "
            f"DOC bounded={doc_ok}, DOC=1 reduction={reduce_ok}")


def test_criterion_6_copolarization_loss_with_depth():
    # 4 um bins per the stated figure geometry; co-polarized fraction of
    # the radially integrated channels must decrease with depth for both
    # linear and circular incidence (Spearman rho < 0, p < 0.05).
    med = medium_with_volume_fraction(1e-2, thickness=3000.0)
    det = DetectorConfig(n_radius=64, n_depth=750, dr=4.0, dz=4.0)
    vr = VarianceReduction(partial_photon=True)
    t0 = time.perf_counter()
    details = []
    ok = True
    for pol, plus, minus in (("linear_x", "p_xx", "p_xy"),
                             ("circular_right", "p_pp", "p_pm")):
        cfg = SimConfig(medium=med, wavelength=WAVELENGTH, n_photons=100_000,
                        seed=17, source_polarization=pol, detector=det,
                        variance_reduction=vr, n_workers=0)
        res = engine.run(cfg)
        ch = detection.channels(res.grid)
        co = ch[plus].sum(axis=1)
        cross = ch[minus].sum(axis=1)
        tot = co + cross
        mask = tot > 0
        frac = co[mask] / tot[mask]
        depth_bins = np.arange(det.n_depth)[mask]
        rho, p = stats.spearmanr(depth_bins, frac)
        ok = ok and (rho < 0.0) and (p < 0.05)
        details.append(f"{pol}: rho={rho:.3f} p={p:.1e}")
    wall = time.perf_counter() - t0
    ok = ok and wall <= 600.0
    _report("criterion 6 (co-polarization loss)", ok,
            "; ".join(details) + f", wall={wall:.0f}s")


def test_criterion_7_worker_count_determinism():
    med = medium_with_volume_fraction(1e-2, thickness=3000.0)
    det = DetectorConfig(n_radius=32, n_depth=64, dr=8.0, dz=8.0)
    grids = {}
    ledgers = {}
    for workers in (1, 4, 16):
        cfg = SimConfig(medium=med, wavelength=WAVELENGTH, n_photons=20_000,
                        seed=99, detector=det, n_workers=workers,
                        variance_reduction=VarianceReduction(
                            partial_photon=True))
        res = engine.run(cfg)
        grids[workers] = (res.grid.data.copy(), res.grid.overflow.copy())
        ledgers[workers] = dict(res.ledger)
    ok = all(np.array_equal(grids[1][0], grids[w][0])
             and np.array_equal(grids[1][1], grids[w][1])
             and ledgers[1] == ledgers[w]
             for w in (4, 16))
    _report("criterion 7 (worker determinism)", ok,
            "grids bit-identical across 1/4/16 workers" if ok
            else "grids differ across worker counts")


def test_criterion_8_network_numerics():
    # Finite-difference agreement on every layer type.
    def fd_check(net, x, t, noise=None):
        _, grad = net.loss_and_grad(x, t, noise=noise)
        p0 = net.params_vector()
        fd = np.zeros_like(p0)
        h = 1e-5
        for i in range(p0.size):
            p = p0.copy()
            p[i] += h
            net.set_params_vector(p)
            lp, _ = net.loss_and_grad(x, t, noise=noise)
            p[i] -= 2 * h
            net.set_params_vector(p)
            lm, _ = net.loss_and_grad(x, t, noise=noise)
            fd[i] = (lp - lm) / (2 * h)
        net.set_params_vector(p0)
        return np.max(np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-8))

    rng = np.random.default_rng(81)
    x = rng.normal(size=(3, 4))
    t = rng.normal(size=(3, 2))
    errs = {}
    # Dense + loss only (no blocks), residual blocks, variational latent.
    errs["dense"] = fd_check(inverse.Network(4, 2, width=6, n_blocks=0,
                                             latent=3, seed=1), x, t)
    errs["residual"] = fd_check(inverse.Network(4, 2, width=6, n_blocks=2,
                                                latent=3, seed=2), x, t)
    net_v = inverse.Network(4, 2, width=6, n_blocks=1, latent=3, seed=3,
                            variational=True)
    errs["variational"] = fd_check(net_v, x, t,
                                   noise=rng.standard_normal((3, 3)))
    grad_ok = max(errs.values()) < 1e-4

    # Linear synthetic task.
    a = np.array([[1.5, -0.7, 0.2], [0.3, 0.8, -1.1]]).T
    xs = 0.5 * rng.normal(size=(256, 3))
    ys = xs @ a
    net = inverse.Network(3, 2, width=32, n_blocks=2, latent=8, seed=21)
    res = inverse.train(net, (xs[:180], ys[:180]), (xs[180:], ys[180:]),
                        steps=5000, batch_size=32, seed=21, base_lr=1e-2)
    task_ratio = res.best_val / res.val_curve[0][1]
    task_ok = task_ratio < 1e-3

    # Annealing: steps down exactly at multiples of 500.
    state = inverse.AdamState.fresh(1)
    lr_ok = True
    prev = inverse.learning_rate(state, 1)
    for step in range(2, 1501):
        lr = inverse.learning_rate(state, step)
        if lr > prev or (lr != prev and step % 500 != 0):
            lr_ok = False
        prev = lr
    lr_ok = lr_ok and inverse.learning_rate(state, 1000) == 0.25 * state.base_lr

    # Split ratio 0.7 / 0.3.
    data = ds.Dataset([ds.TrainingSample(np.zeros(2), np.zeros(1), i, 0)
                       for i in range(10)], ("t",))
    train_ds, test_ds = ds.split(data, 0.7, seed=0)
    split_ok = len(train_ds) == 7 and len(test_ds) == 3

    ok = grad_ok and task_ok and lr_ok and split_ok
    _report("criterion 8 (network numerics)", ok,
            f"fd err={max(errs.values()):.1e} ({errs}), "
            f"linear-task ratio={task_ratio:.1e}, anneal={lr_ok}, "
            f"split 7/3={split_ok}")


def test_criterion_9_end_to_end_pipeline():
    t0 = time.perf_counter()
    med = MediumSpec(particle_radius=RADIUS, n_particle=1.3, n_host=1.0,
                     number_density=6.9, thickness=600.0)
    det = DetectorConfig(n_radius=32, n_depth=32, dr=16.0, dz=16.0)
    base = SimConfig(medium=med, wavelength=WAVELENGTH, n_photons=20_000,
                     seed=0, detector=det,
                     variance_reduction=VarianceReduction(partial_photon=True),
                     n_workers=0)
    data, report = ds.sweep(base, {"n_particle": (1.1, 1.5)}, 64, seed=7,
                            feature_shape=(8, 8))
    assert report["failed"] == 0
    train_ds, test_ds = ds.split(data, 0.7, seed=7)
    train_n, norm = ds.normalize_features(train_ds)
    test_n = ds.apply_normalization(test_ds, norm)
    net = inverse.Network(data.feature_len, 1, width=48, n_blocks=2,
                          latent=12, seed=7, target_names=data.target_names)
    res = inverse.train(net, train_n, test_n, steps=3000, batch_size=16,
                        seed=7)
    net.set_params_vector(res.best_params)
    pred = net.forward(test_n.feature_matrix())
    mae = float(np.mean(np.abs(pred - test_n.target_matrix())))
    wall = time.perf_counter() - t0

    train_losses = np.array([v for _, v in res.train_curve])
    val_losses = np.array([v for _, v in res.val_curve])
    finite_ok = bool(np.all(np.isfinite(train_losses))
                     and np.all(np.isfinite(val_losses)))
    val_drop_ok = res.val_curve[-1][1] < 0.5 * res.val_curve[0][1]
    mae_ok = mae < 0.1
    time_ok = wall <= 1800.0
    ok = finite_ok and val_drop_ok and mae_ok and time_ok
    _report("criterion 9 (end-to-end pipeline)", ok,
            f"val {res.val_curve[0][1]:.3f}->{res.val_curve[-1][1]:.4f}, "
            f"held-out MAE={mae:.4f}, wall={wall:.0f}s, finite={finite_ok}")
