"""Command line driver tying the pipeline into reproducible batch runs.

Subcommands: meshgen, simulate, train, sample, eval, posterior, gradcheck,
synth. Every run writes its resolved config and a machine-readable
summary.json into the output directory, so artifacts alone replay the run.

Exit codes: 0 success, 2 config validation, 3 I/O, 4 numerical failure.

Package modules are imported inside functions, not at module top: --threads
must pin the BLAS pool sizes through the environment before numpy loads.
"""

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def configure_threads(n: int) -> None:
    for var in _THREAD_VARS:
        os.environ[var] = str(n)
    if "XLA_FLAGS" not in os.environ:
        os.environ["XLA_FLAGS"] = ("--xla_cpu_multi_thread_eigen=false "
                                   f"intra_op_parallelism_threads={n}")


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def _mesh_setup(cfg):
    from drapefit.meshing import (compute_rest_state, generate_disk_mesh,
                                  load_mesh, pin_support_region)
    sec = cfg.mesh
    if sec.path:
        topology, positions = load_mesh(sec.path)
    else:
        topology, positions = generate_disk_mesh(sec.radius, sec.edge_length)
    rest = compute_rest_state(topology, positions, sec.density)
    return topology, pin_support_region(rest, sec.pin_radius)


def _load_material(cfg):
    from drapefit.materials import (MaterialField, default_material,
                                    load_material)
    sec = cfg.material
    mat = load_material(sec.path) if sec.path else default_material()
    if sec.stretch_scale != 1.0 or sec.bend_scale != 1.0:
        mat = MaterialField(stretch=sec.stretch_scale * mat.stretch,
                            bend=sec.bend_scale * mat.bend)
    return mat


def _camera(cfg):
    from drapefit.render import CameraSpec
    return CameraSpec(half_width=cfg.camera.half_width,
                      resolution=cfg.camera.resolution)


def _simulator(cfg, topology, rest, material):
    from drapefit.dynamics import Simulator
    return Simulator(topology, rest, material, cfg.sim.h,
                     k_handle=cfg.sim.k_handle, gravity=cfg.sim.gravity,
                     damping=cfg.sim.damping)


def cmd_meshgen(cfg, out: Path) -> dict:
    from drapefit.meshing import save_mesh
    topology, rest = _mesh_setup(cfg)
    save_mesh(out / "mesh.txt", rest.positions, topology.faces)
    return {
        "vertices": topology.vertex_count,
        "faces": topology.face_count,
        "hinges": topology.hinge_count,
        "pinned": int(len(rest.pinned)),
        "total_mass": float(rest.vertex_masses.sum()),
        "mesh_file": "mesh.txt",
    }


def cmd_simulate(cfg, out: Path) -> dict:
    import numpy as np

    from drapefit.dynamics import SimTape
    from drapefit.meshing import save_mesh
    from drapefit.render import render_binary, render_silhouette, save_image

    topology, rest = _mesh_setup(cfg)
    material = _load_material(cfg)
    sim = _simulator(cfg, topology, rest, material)
    camera = _camera(cfg)

    state = sim.initial_state()
    residuals = []
    with open(out / "steps.jsonl", "w") as fh:
        for _ in range(cfg.sim.n_steps):
            tape = SimTape(h=cfg.sim.h)   # fresh per step, bounds memory
            state = sim.step(state, tape)
            rec = tape.records[0]
            residuals.append(rec.residual)
            fh.write(json.dumps({
                "step": state.t,
                "max_velocity": float(np.linalg.norm(state.v, axis=1).max()),
                "residual": rec.residual,
                "seconds": round(rec.seconds, 6),
            }) + "\n")
            if cfg.sim.save_trajectory:
                save_mesh(out / f"step_{state.t:04d}.txt", state.x,
                          topology.faces)

    save_mesh(out / "final_mesh.txt", state.x, topology.faces)
    soft = render_silhouette(state.x, topology.faces, camera,
                             cfg.camera.sharpness)
    save_image(out / "silhouette.png", soft)
    save_image(out / "silhouette_binary.png",
               render_binary(state.x, topology.faces, camera))
    return {
        "n_steps": cfg.sim.n_steps,
        "final_max_velocity": float(np.linalg.norm(state.v, axis=1).max()),
        "max_residual": float(max(residuals)),
        "coverage_mean": float(soft.pixels.mean()),
        "files": ["final_mesh.txt", "silhouette.png",
                  "silhouette_binary.png", "steps.jsonl"],
    }


def _training_inputs(cfg):
    from drapefit.config import ConfigError
    from drapefit.dataset import load_manifest, load_observation
    from drapefit.inference import TrainData
    from drapefit.meshing import load_mesh
    from drapefit.render import CameraSpec

    if not cfg.data.manifest:
        raise ConfigError("data.manifest: required for this command")
    manifest = load_manifest(cfg.data.manifest)
    if not manifest.observations:
        raise ConfigError("data.manifest: manifest has no observations")
    shapes = {(o.resolution, o.half_width) for o in manifest.observations}
    if len(shapes) != 1:
        raise ConfigError("data.manifest: observations disagree on camera")
    resolution, half_width = manifest.observations[0].resolution, \
        manifest.observations[0].half_width
    camera = CameraSpec(half_width=half_width, resolution=resolution)

    silhouettes = tuple(
        load_observation(manifest, obs, cfg.data.threshold).pixels
        for obs in manifest.observations)
    meshes = []
    if cfg.data.use_meshes:
        for obs in manifest.observations:
            if obs.mesh is None:
                raise ConfigError(
                    f"data.use_meshes: observation {obs.sample_id} "
                    "has no mesh")
            meshes.append(load_mesh(manifest.resolve(obs.mesh))[1])
    return TrainData(silhouettes=silhouettes, meshes=tuple(meshes)), camera


def cmd_train(cfg, out: Path) -> dict:
    from drapefit.inference import (LikelihoodSpec, PriorSpec, TrainConfig,
                                    posterior_prior_kl, save_posterior,
                                    save_training_log, train)
    from drapefit.materials import parameter_count, save_material

    topology, rest = _mesh_setup(cfg)
    data, camera = _training_inputs(cfg)
    t = cfg.train
    train_config = TrainConfig(
        n_steps=cfg.sim.n_steps, h=cfg.sim.h, epochs=t.epochs,
        seed=cfg.seed, mc_samples=t.mc_samples,
        likelihood=LikelihoodSpec(sigma_sq=t.sigma_sq),
        data_weight=t.data_weight, base_lr=t.base_lr, eta_lr=t.eta_lr,
        lr_decay=t.lr_decay, camera=camera, sharpness=cfg.camera.sharpness,
        k_handle=cfg.sim.k_handle, gravity=cfg.sim.gravity,
        damping=cfg.sim.damping, init_scale_fraction=t.init_scale_fraction)
    prior = PriorSpec.default(cfg.prior.stretch_mean, cfg.prior.coupling_mean,
                              cfg.prior.bend_mean, cfg.prior.rel_std)
    init = _load_material(cfg) if cfg.material.path else None

    result = train(t.model_kind, topology, rest, data, train_config,
                   prior=prior, init_material=init)
    save_training_log(out / "training_log.jsonl", result.log)
    summary = {
        "model_kind": result.kind,
        "parameter_count": parameter_count(
            "bayesian" if result.kind == "bayesian" else result.kind,
            topology.face_count, topology.hinge_count),
        "observations": len(data.silhouettes),
        "epochs": t.epochs,
        "best_epoch": result.best_epoch,
        "best_loss": result.best_loss,
        "final_loss": result.log[-1]["loss"],
        "log_file": "training_log.jsonl",
    }
    if result.kind == "bayesian":
        save_posterior(out / "posterior.json", result.posterior)
        summary["posterior_file"] = "posterior.json"
        summary["kl_to_prior"] = posterior_prior_kl(result.posterior, prior)
    else:
        save_material(out / "material.json", result.material)
        summary["material_file"] = "material.json"
    return summary


def cmd_sample(cfg, out: Path) -> dict:
    import numpy as np

    from drapefit.config import ConfigError
    from drapefit.inference import load_posterior, sample_material
    from drapefit.materials import save_material
    from drapefit.render import render_binary, save_image

    if not cfg.sample.posterior:
        raise ConfigError("sample.posterior: required for this command")
    theta = load_posterior(cfg.sample.posterior)
    topology, rest = _mesh_setup(cfg)
    camera = _camera(cfg)
    rng = np.random.default_rng(cfg.seed)

    (out / "materials").mkdir(exist_ok=True)
    (out / "silhouettes").mkdir(exist_ok=True)
    for k in range(cfg.sample.count):
        material = sample_material(theta, topology.face_count,
                                   topology.hinge_count, rng)
        sim = _simulator(cfg, topology, rest, material)
        state, _ = sim.simulate(sim.initial_state(), cfg.sim.n_steps)
        save_material(out / "materials" / f"sample_{k:04d}.json", material)
        save_image(out / "silhouettes" / f"sample_{k:04d}.png",
                   render_binary(state.x, topology.faces, camera))
    return {
        "count": cfg.sample.count,
        "posterior": str(cfg.sample.posterior),
        "materials_dir": "materials",
        "silhouettes_dir": "silhouettes",
    }


def cmd_eval(cfg, out: Path) -> dict:
    import numpy as np

    from drapefit.config import ConfigError
    from drapefit.meshing import load_mesh
    from drapefit.metrics import hausdorff, image_mse, radius_angle
    from drapefit.render import CameraSpec, load_image

    sec = cfg.eval
    if not sec.predicted or not sec.observed:
        raise ConfigError("eval.predicted and eval.observed: required")
    predicted = load_image(sec.predicted)
    observed = load_image(sec.observed)
    summary = {"mse": image_mse(predicted, observed)}

    camera = CameraSpec(half_width=cfg.camera.half_width,
                        resolution=predicted.shape[0])
    for name, img in (("predicted", predicted), ("observed", observed)):
        profile = radius_angle(img, camera, sec.threshold)
        profile.save_csv(out / f"radius_{name}.csv")
        summary[f"radius_mean_{name}"] = float(profile.radii.mean())
        summary[f"radius_file_{name}"] = f"radius_{name}.csv"

    if sec.predicted_mesh and sec.observed_mesh:
        va = load_mesh(sec.predicted_mesh)[1]
        vb = load_mesh(sec.observed_mesh)[1]
        summary["hausdorff"] = hausdorff(va, vb)
    else:
        summary["hausdorff"] = None
    return summary


def cmd_posterior(cfg, out: Path) -> dict:
    from drapefit.config import ConfigError
    from drapefit.inference import load_posterior
    from drapefit.metrics import (GaussianPosteriorSummary, gmm_loglik,
                                  nearest_material)

    sec = cfg.posterior
    if not sec.query or not sec.references:
        raise ConfigError("posterior.query and posterior.references: "
                          "required")
    query_theta = load_posterior(sec.query)
    query = GaussianPosteriorSummary("query", query_theta.mu,
                                     query_theta.std)
    components = []
    for path in sec.references:
        theta = load_posterior(path)
        components.append(GaussianPosteriorSummary(Path(path).stem,
                                                   theta.mu, theta.std))

    ranking = nearest_material(components, query)
    with open(out / "kl_table.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "kl_divergence"])
        for label, score in ranking:
            writer.writerow([label, repr(float(score))])

    logliks = {c.label: gmm_loglik([c], query_theta.mu) for c in components}
    return {
        "nearest": ranking[0][0],
        "kl": {label: float(score) for label, score in ranking},
        "gmm_loglik": gmm_loglik(components, query_theta.mu),
        "component_loglik": logliks,
        "kl_table": "kl_table.csv",
    }


def cmd_gradcheck(cfg, out: Path) -> dict:
    """Full-pipeline adjoint vs central FD on every homogeneous parameter.

    Loss is the image MSE between the simulated drape silhouette and the
    binary silhouette of the undeformed disk, so the check needs no
    external target file.
    """
    import numpy as np

    from drapefit.adjoint import backward_simulate
    from drapefit.materials import flatten, unflatten
    from drapefit.metrics import image_mse
    from drapefit.render import render_backward, render_binary, \
        render_silhouette

    topology, rest = _mesh_setup(cfg)
    camera = _camera(cfg)
    target = render_binary(rest.positions, topology.faces, camera).pixels
    npix = target.size

    def loss_of(vec):
        sim = _simulator(cfg, topology, rest, unflatten(vec))
        state, tape = sim.simulate(sim.initial_state(), cfg.sim.n_steps,
                                   record_tape=True)
        soft = render_silhouette(state.x, topology.faces, camera,
                                 cfg.camera.sharpness)
        return image_mse(soft.pixels, target), state, tape, soft, sim

    vec = flatten(_load_material(cfg))
    loss, state, tape, soft, sim = loss_of(vec)
    g_img = 2.0 * (soft.pixels - target) / npix
    gx = render_backward(state.x, topology.faces, camera, g_img,
                         cfg.camera.sharpness)
    adjoint = backward_simulate(sim, tape, gx).material_flat()

    delta = cfg.gradcheck.delta
    rows, passed = [], 0
    for i in range(len(vec)):
        probe = vec.copy()
        probe[i] = vec[i] + delta
        up = loss_of(probe)[0]
        probe[i] = vec[i] - delta
        down = loss_of(probe)[0]
        fd = (up - down) / (2.0 * delta)
        err = abs(adjoint[i] - fd)
        ok = bool(err <= cfg.gradcheck.abs_floor
                  or err <= cfg.gradcheck.rel_tol * max(abs(fd),
                                                        abs(adjoint[i])))
        passed += ok
        rows.append({"index": i, "adjoint": adjoint[i], "fd": fd,
                     "abs_err": err, "ok": ok})
    with open(out / "gradcheck.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return {
        "loss": loss,
        "checked": len(rows),
        "passed": passed,
        "pass_fraction": passed / len(rows),
        "delta": delta,
        "report": "gradcheck.jsonl",
    }


def cmd_synth(cfg, out: Path) -> dict:
    from drapefit.dataset import make_synthetic_observation

    topology, rest = _mesh_setup(cfg)
    result = make_synthetic_observation(
        topology, rest, _load_material(cfg), n_steps=cfg.sim.n_steps,
        h=cfg.sim.h, camera=_camera(cfg), out_dir=out,
        sample_id=f"synthetic-{cfg.seed}", k_handle=cfg.sim.k_handle,
        gravity=cfg.sim.gravity, damping=cfg.sim.damping, seed=cfg.seed)
    return {
        "manifest": result.manifest_path.name,
        "answer_key": result.answer_key_path.name,
        "sample_id": result.observation.sample_id,
    }


COMMANDS = {
    "meshgen": cmd_meshgen,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "posterior": cmd_posterior,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}

_HELP = {
    "meshgen": "triangulate the disk sample and write the mesh file",
    "simulate": "drape the sample and write mesh, silhouettes, step log",
    "train": "fit material parameters or their posterior to observations",
    "sample": "draw materials from a posterior and simulate each",
    "eval": "image MSE, Hausdorff distance and radius profiles",
    "posterior": "KL table and mixture likelihoods against references",
    "gradcheck": "adjoint vs finite-difference gradient report",
    "synth": "generate a synthetic observation with hidden ground truth",
}


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", default="", help="JSON config file")
    shared.add_argument("--out", required=True, help="output directory")
    shared.add_argument("--threads", type=int, default=None,
                        help="worker thread cap (overrides config)")
    shared.add_argument("--seed", type=int, default=None,
                        help="seed override")
    parser = argparse.ArgumentParser(
        prog="drapefit",
        description="cloth drape simulation and material inference")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[shared], help=_HELP[name])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    payload = {}
    if args.config:
        try:
            payload = json.loads(Path(args.config).read_text())
        except OSError as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except json.JSONDecodeError as exc:
            print(f"error: {args.config} is not valid JSON: {exc}",
                  file=sys.stderr)
            return EXIT_CONFIG
        if not isinstance(payload, dict):
            print("error: config must be a JSON object", file=sys.stderr)
            return EXIT_CONFIG
    threads = args.threads if args.threads is not None \
        else payload.get("threads", 1)
    if not isinstance(threads, int) or threads < 1:
        print("error: threads must be a positive integer", file=sys.stderr)
        return EXIT_CONFIG
    configure_threads(threads)

    # numpy and friends load past this point, with the pools pinned
    import dataclasses

    from drapefit.config import ConfigError, from_dict, save_config
    from drapefit.dataset import DatasetError
    from drapefit.dynamics import SolverError
    from drapefit.inference import TrainingError
    try:
        cfg = from_dict(payload)
        cfg = dataclasses.replace(cfg, threads=threads)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.json", cfg)

    start = time.perf_counter()
    try:
        summary = COMMANDS[args.command](cfg, out)
    except (SolverError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    summary = {"command": args.command, "seed": cfg.seed,
               "threads": cfg.threads,
               "seconds": round(time.perf_counter() - start, 3), **summary}
    _write_json(out / "summary.json", summary)
    print(f"{args.command}: ok ({out})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
