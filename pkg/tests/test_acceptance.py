"""Workstation acceptance checks, one test per release criterion.

Every test prints a single `criterion N: PASS/FAIL (...)` status line on the
real stdout (bypassing capture so the line always shows up in logs) and
records its measured numbers in acceptance_report.json at the repo root.
The heavy recovery fixtures run once and are shared by the tests that need
them, so expect the module to take tens of minutes end to end.
"""

import json
import pathlib
import subprocess
import sys
import time

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from drapefit.adjoint import backward_simulate
from drapefit.dynamics import Simulator
from drapefit.inference import (PriorSpec, TrainConfig, TrainData,
                                VariationalPosterior, posterior_prior_kl,
                                sample_material, train)
from drapefit.materials import (MaterialField, default_material, flatten,
                                parameter_count, unflatten)
from drapefit.meshing import (compute_rest_state, generate_disk_mesh,
                              pin_support_region)
from drapefit.metrics import hausdorff, image_mse, kl_diag_gauss, radius_angle
from drapefit.render import (CameraSpec, render_backward, render_binary,
                             render_silhouette)

REPORT = {}
REPORT_PATH = pathlib.Path(__file__).resolve().parent.parent / \
    "acceptance_report.json"


def _finish(num, ok, detail):
    line = f"criterion {num}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line, file=sys.__stdout__, flush=True)
    REPORT[f"criterion_{num:02d}"] = {"ok": bool(ok), "detail": detail}
    assert ok, line


@pytest.fixture(scope="module", autouse=True)
def _write_report():
    yield
    REPORT_PATH.write_text(json.dumps(REPORT, indent=1) + "\n")


# -- shared geometry ---------------------------------------------------------

@pytest.fixture(scope="module")
def tiny():
    topology, positions = generate_disk_mesh(0.15, 0.05)
    rest = pin_support_region(compute_rest_state(topology, positions, 0.2),
                              0.09)
    return topology, rest


@pytest.fixture(scope="module")
def full_mesh():
    topology, positions = generate_disk_mesh(0.15, 0.0052)
    rest = pin_support_region(compute_rest_state(topology, positions, 0.144),
                              0.09)
    return topology, rest


@pytest.fixture(scope="module")
def recovery():
    """Bend-recovery problem shared by the deterministic and Bayesian tests.

    Target drape uses 20x the default bending stiffness, training starts at
    60x. The prior std vector acts as the per-group step size: stretch rows
    are frozen near zero while bend gets enough travel budget to cover the
    gap under the decaying step schedule.
    """
    topology, positions = generate_disk_mesh(0.15, 0.02)
    rest = pin_support_region(compute_rest_state(topology, positions, 0.144),
                              0.05)
    base = default_material()
    camera = CameraSpec(resolution=128)
    sharpness = 0.5
    target_mat = MaterialField(stretch=base.stretch, bend=20.0 * base.bend)
    init_mat = MaterialField(stretch=base.stretch, bend=60.0 * base.bend)

    sim = Simulator(topology, rest, target_mat, 0.05)
    state, _ = sim.simulate(sim.initial_state(), 40)
    target = render_silhouette(state.x, topology.faces, camera,
                               sharpness).pixels

    prior = PriorSpec(mean=flatten(init_mat),
                      std=np.concatenate([np.full(24, 1e-3),
                                          np.full(15, 2.4e-4)]))
    cfg = TrainConfig(n_steps=40, h=0.05, epochs=150, seed=0, mc_samples=1,
                      base_lr=1.0, lr_decay=0.97, camera=camera,
                      sharpness=sharpness)
    t0 = time.perf_counter()
    result = train("homogeneous", topology, rest,
                   TrainData(silhouettes=(target,)), cfg, prior=prior,
                   init_material=init_mat)
    seconds = time.perf_counter() - t0
    return {"topology": topology, "rest": rest, "camera": camera,
            "sharpness": sharpness, "target": target, "init_mat": init_mat,
            "result": result, "seconds": seconds}


# -- criteria ----------------------------------------------------------------

def test_criterion_01_full_pipeline_gradients(tiny):
    topology, rest = tiny
    camera = CameraSpec(resolution=64)
    sharpness = 1.0
    target = render_binary(rest.positions, topology.faces, camera).pixels
    npix = target.size
    base_vec = flatten(default_material())

    def loss_of(vec):
        sim = Simulator(topology, rest, unflatten(vec), 0.05)
        state, tape = sim.simulate(sim.initial_state(), 3, record_tape=True)
        soft = render_silhouette(state.x, topology.faces, camera, sharpness)
        return image_mse(soft.pixels, target), state, tape, soft, sim

    t0 = time.perf_counter()
    _, state, tape, soft, sim = loss_of(base_vec)
    g_img = 2.0 * (soft.pixels - target) / npix
    gx = render_backward(state.x, topology.faces, camera, g_img, sharpness)
    adjoint = backward_simulate(sim, tape, gx).material_flat()

    passed = 0
    for i in range(len(base_vec)):
        # parameter-relative step: bend lives at 1e-4, stretch at 50, and a
        # flat delta either drowns in curvature or in roundoff
        delta = 1e-4 * abs(base_vec[i])
        probe = base_vec.copy()
        probe[i] = base_vec[i] + delta
        up = loss_of(probe)[0]
        probe[i] = base_vec[i] - delta
        down = loss_of(probe)[0]
        fd = (up - down) / (2.0 * delta)
        err = abs(adjoint[i] - fd)
        passed += (err <= 1e-10
                   or err <= 1e-3 * max(abs(fd), abs(adjoint[i])))
    seconds = time.perf_counter() - t0
    frac = passed / len(base_vec)
    _finish(1, frac >= 0.99 and seconds < 300.0,
            f"{passed}/{len(base_vec)} params in {seconds:.0f}s")


def test_criterion_02_solve_identities():
    rng = np.random.default_rng(20240823)
    worst_b = 0.0
    worst_a = 0.0
    for _ in range(50):
        n = int(rng.integers(5, 61))
        a = sp.random(n, n, density=0.25, random_state=rng,
                      data_rvs=rng.standard_normal).tocsc()
        a = (a + n * sp.identity(n)).tocsc()
        b = rng.standard_normal(n)
        g = rng.standard_normal(n)
        lu = splu(a)
        y = lu.solve(b)
        z = lu.solve(g, trans="T")          # claimed dL/db for L = g.y

        for k in range(n):
            dk = 1e-6 * (1.0 + abs(b[k]))
            bp, bm = b.copy(), b.copy()
            bp[k] += dk
            bm[k] -= dk
            fd = (g @ lu.solve(bp) - g @ lu.solve(bm)) / (2.0 * dk)
            rel = abs(z[k] - fd) / max(abs(z[k]), abs(fd), 1e-10)
            worst_b = max(worst_b, rel)

        rows, cols = a.nonzero()
        pick = rng.choice(len(rows), size=min(20, len(rows)), replace=False)
        for p in pick:
            i, j = int(rows[p]), int(cols[p])
            claimed = -z[i] * y[j]          # dL/dA_ij = -(dL/db_i) y_j
            da = 1e-6 * (1.0 + abs(a[i, j]))
            ap, am = a.tolil(), a.tolil()
            ap[i, j] += da
            am[i, j] -= da
            fd = (g @ splu(ap.tocsc()).solve(b)
                  - g @ splu(am.tocsc()).solve(b)) / (2.0 * da)
            err = abs(claimed - fd)
            if err > 1e-10:                 # FD noise floor for ~zero entries
                worst_a = max(worst_a, err / max(abs(claimed), abs(fd)))
    ok = worst_b <= 1e-5 and worst_a <= 1e-5
    _finish(2, ok, f"worst rel err b {worst_b:.2e}, A {worst_a:.2e}")


def test_criterion_03_conservation(tiny):
    topology, rest = tiny
    sim = Simulator(topology, rest, default_material(), 0.05)
    rng = np.random.default_rng(11)
    worst_f = 0.0
    worst_t = 0.0
    for _ in range(1000):
        x = rest.positions + 0.03 * rng.standard_normal(rest.positions.shape)
        f_s, _, f_b, _ = sim.element_forces(x)

        net = np.linalg.norm(f_s.sum(axis=1), axis=1)
        scale = np.linalg.norm(f_s, axis=2).sum(axis=1)
        worst_f = max(worst_f, float((net / np.maximum(scale, 1e-30)).max()))

        net = np.linalg.norm(f_b.sum(axis=1), axis=1)
        scale = np.linalg.norm(f_b, axis=2).sum(axis=1)
        worst_f = max(worst_f, float((net / np.maximum(scale, 1e-30)).max()))

        xh = x[topology.hinges]             # (H, 4, 3)
        lever = xh - xh.mean(axis=1, keepdims=True)
        torque = np.cross(lever, f_b).sum(axis=1)
        tscale = (np.linalg.norm(lever, axis=2)
                  * np.linalg.norm(f_b, axis=2)).sum(axis=1)
        rel = np.linalg.norm(torque, axis=1) / np.maximum(tscale, 1e-30)
        worst_t = max(worst_t, float(rel.max()))
    ok = worst_f <= 1e-9 and worst_t <= 1e-9
    _finish(3, ok, f"worst force rel {worst_f:.2e}, torque rel {worst_t:.2e}")


def test_criterion_04_equilibrium_fixed_point(tiny):
    topology, rest = tiny
    sim = Simulator(topology, rest, default_material(), 0.05,
                    gravity=(0.0, 0.0, 0.0))
    state = sim.initial_state()
    out = sim.step(state)
    dx = float(np.abs(out.x - state.x).max())
    dv = float(np.abs(out.v).max())
    _finish(4, dx <= 1e-9 and dv <= 1e-9, f"|dx| {dx:.2e}, |dv| {dv:.2e}")


def test_criterion_05_solver_residuals():
    topology, positions = generate_disk_mesh(0.15, 0.025)
    rest = pin_support_region(compute_rest_state(topology, positions, 0.144),
                              0.09)
    sim = Simulator(topology, rest, default_material(), 0.05)
    _, tape = sim.simulate(sim.initial_state(), 30, record_tape=True)
    residuals = [rec.residual for rec in tape.records]
    worst = max(residuals)
    ok = len(residuals) == 30 and worst <= 1e-9
    _finish(5, ok, f"30 steps, max residual {worst:.2e}")


def test_criterion_06_parameter_counts(full_mesh):
    topology, _ = full_mesh
    f, e = topology.face_count, topology.hinge_count
    bayes = parameter_count("bayesian")
    heter = parameter_count("heterogeneous", f, e)
    ok = (bayes == 78 and heter == 24 * f + 15 * e and heter > 200_000)
    _finish(6, ok, f"bayesian {bayes}, heterogeneous {heter} = 24*{f}+15*{e}")


def test_criterion_07_homogeneous_recovery(recovery):
    result = recovery["result"]
    first = result.log[0]["loss"]
    ratio = result.best_loss / first
    seconds = recovery["seconds"]
    ok = ratio <= 0.10 and len(result.log) <= 200 and seconds < 1800.0
    _finish(7, ok, f"mse {first:.2e} -> {result.best_loss:.2e} "
            f"(ratio {ratio:.3f}) in {seconds:.0f}s / {len(result.log)} epochs")


def test_criterion_08_bayesian_recovery(recovery):
    topology = recovery["topology"]
    rest = recovery["rest"]
    camera = recovery["camera"]
    sharpness = recovery["sharpness"]
    target = recovery["target"]
    init_mat = recovery["init_mat"]
    homo_mse = recovery["result"].best_loss

    prior = PriorSpec(mean=flatten(init_mat),
                      std=np.concatenate([np.full(24, 5e-4),
                                          np.full(15, 1.5e-3)]))
    cfg = TrainConfig(n_steps=40, h=0.05, epochs=150, seed=0, mc_samples=2,
                      base_lr=1.0, eta_lr=0.2, lr_decay=0.97, camera=camera,
                      sharpness=sharpness)
    result = train("bayesian", topology, rest,
                   TrainData(silhouettes=(target,)), cfg, prior=prior,
                   init_material=init_mat)
    theta = result.posterior
    stds_positive = bool((theta.std > 0).all())
    kl = posterior_prior_kl(theta, prior)
    kl_logged = all(np.isfinite(entry["kl_term"]) for entry in result.log)

    rng = np.random.default_rng(7)
    best = np.inf
    for _ in range(1000):
        mat = sample_material(theta, topology.face_count,
                              topology.hinge_count, rng)
        sim = Simulator(topology, rest, mat, 0.05)
        state, _ = sim.simulate(sim.initial_state(), 40)
        soft = render_silhouette(state.x, topology.faces, camera, sharpness)
        best = min(best, image_mse(soft.pixels, target))

    ok = (best <= 1.5 * homo_mse and stds_positive
          and np.isfinite(kl) and kl_logged)
    _finish(8, ok, f"best-of-1000 {best:.2e} vs 1.5x homo {1.5 * homo_mse:.2e}, "
            f"kl {kl:.1f}, stds>0 {stds_positive}")


def test_criterion_09_vi_matches_prior(tiny):
    topology, rest = tiny
    prior = PriorSpec.default()
    cfg = TrainConfig(n_steps=1, h=0.05, epochs=500, seed=0, mc_samples=128,
                      data_weight=0.0, base_lr=3e-4, eta_lr=2.0,
                      lr_decay=0.982, camera=CameraSpec(resolution=16))
    result = train("bayesian", topology, rest,
                   TrainData(silhouettes=(np.zeros((16, 16)),)), cfg,
                   prior=prior)
    fp = result.final_params
    half = len(fp) // 2
    theta = VariationalPosterior(mu=fp[:half], eta=fp[half:])
    kl = posterior_prior_kl(theta, prior)
    _finish(9, kl <= 1e-3, f"kl to prior {kl:.2e} after 500 epochs")


def test_criterion_10_bend_orders_radius():
    topology, positions = generate_disk_mesh(0.15, 0.02)
    rest = pin_support_region(compute_rest_state(topology, positions, 0.144),
                              0.09)
    base = default_material()
    camera = CameraSpec(resolution=128)

    def mean_radius(bend):
        mat = MaterialField(stretch=base.stretch,
                            bend=np.full_like(base.bend, bend))
        sim = Simulator(topology, rest, mat, 0.05)
        state, _ = sim.simulate(sim.initial_state(), 40)
        prof = radius_angle(render_binary(state.x, topology.faces,
                                          camera).pixels, camera)
        return float(prof.radii[~prof.empty_bins].mean()), \
            int(prof.empty_bins.sum())

    soft_r, _ = mean_radius(1e-4)
    stiff_r, stiff_empty = mean_radius(1e-2)
    gap = (stiff_r - soft_r) / stiff_r
    ok = stiff_r > soft_r and gap > 0.05 and stiff_empty == 0
    _finish(10, ok, f"soft {soft_r:.4f} m, stiff {stiff_r:.4f} m, "
            f"gap {gap:.1%}")


def test_criterion_11_metric_closed_forms():
    kl = kl_diag_gauss([0.0], [1.0], [1.0], [1.0])
    kl_ok = abs(kl - 0.5) <= 1e-12

    grid = np.stack(np.meshgrid(*[np.arange(3) * 0.1] * 3), axis=-1)
    points = grid.reshape(-1, 3)
    shift = np.array([0.02, -0.01, 0.015])
    hd = hausdorff(points, points + shift)
    hd_ok = abs(hd - np.linalg.norm(shift)) <= 1e-12

    topology, positions = generate_disk_mesh(0.15, 0.01)
    camera = CameraSpec(resolution=512)
    prof = radius_angle(render_binary(positions, topology.faces,
                                      camera).pixels, camera)
    pixel = 2.0 * camera.half_width / camera.resolution
    spread = float(prof.radii.max() - prof.radii.min())
    disk_ok = not prof.empty_bins.any() and spread <= pixel

    ok = kl_ok and hd_ok and disk_ok
    _finish(11, ok, f"kl {kl:.12f}, hausdorff err "
            f"{abs(hd - np.linalg.norm(shift)):.1e}, "
            f"disk spread {spread / pixel:.2f} px")


def test_criterion_12_thread_determinism(tmp_path):
    config = {"seed": 3,
              "mesh": {"edge_length": 0.05, "pin_radius": 0.09,
                       "density": 0.2},
              "sim": {"n_steps": 5, "h": 0.05},
              "camera": {"resolution": 64}}
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config))
    outs = []
    for threads in (1, 8):
        out = tmp_path / f"threads{threads}"
        proc = subprocess.run(
            [sys.executable, "-m", "drapefit.cli", "simulate",
             "--config", str(cfg_path), "--out", str(out),
             "--threads", str(threads)],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outs.append(out)
    one, eight = outs

    def vertices(path):
        rows = [line.split()[1:4] for line in path.read_text().splitlines()
                if line.startswith("v ")]
        return np.asarray(rows, dtype=np.float64)

    mesh_one = vertices(one / "final_mesh.txt")
    mesh_eight = vertices(eight / "final_mesh.txt")
    scale = np.abs(mesh_one).max()
    rel = float(np.abs(mesh_one - mesh_eight).max() / scale)
    bytes_equal = (one / "silhouette.png").read_bytes() == \
        (eight / "silhouette.png").read_bytes()
    _finish(12, rel <= 1e-10 and bytes_equal,
            f"mesh rel diff {rel:.1e}, silhouettes byte-identical "
            f"{bytes_equal}")


def test_criterion_13_step_time_budget(full_mesh):
    topology, rest = full_mesh
    sim = Simulator(topology, rest, default_material(), 0.05)
    state = sim.initial_state()
    for _ in range(2):                      # first steps pay jit compile
        state = sim.step(state)

    t0 = time.perf_counter()
    state, tape = sim.simulate(state, 3, record_tape=True)
    forward = (time.perf_counter() - t0) / 3

    gx = np.ones_like(state.x)
    backward_simulate(sim, tape, gx)        # compile pass
    t0 = time.perf_counter()
    backward_simulate(sim, tape, gx)
    backward = (time.perf_counter() - t0) / 3

    ok = forward <= 1.0 and backward <= 4.0
    _finish(13, ok, f"{topology.vertex_count} vertices: forward "
            f"{forward:.3f}s/step, backward {backward:.3f}s/step")
