"""Drape observation ingest: manifests, silhouette images, synthetic data.

A dataset is one manifest.json describing fabrics (area density, thickness,
weave) and observations (silhouette image + optional mesh + capture window).
Synthetic observations are generated by simulating a known material and
saving the binarized silhouette; the true parameters go into a separate
answer-key file so the observation directory never leaks them.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import jsonschema

from .dynamics import GRAVITY_DEFAULT, K_HANDLE_DEFAULT, Simulator
from .materials import MaterialField, flatten
from .meshing import MeshTopology, RestState, save_mesh
from .render import (CameraSpec, RenderError, SilhouetteImage, load_image,
                     render_binary, save_image)

MANIFEST_SCHEMA_VERSION = 1

_FABRIC_SCHEMA = {
    "type": "object",
    "required": ["fabric_index", "material", "weave", "sample_count",
                 "area_density", "thickness_mm"],
    "properties": {
        "fabric_index": {"type": "integer", "minimum": 0},
        "material": {"type": "string"},
        "weave": {"type": "string"},
        "sample_count": {"type": "integer", "minimum": 0},
        "area_density": {"type": "number", "exclusiveMinimum": 0},
        "thickness_mm": {"type": "number", "exclusiveMinimum": 0},
    },
    "additionalProperties": False,
}

_OBSERVATION_SCHEMA = {
    "type": "object",
    "required": ["fabric_index", "sample_id", "silhouette", "resolution",
                 "half_width"],
    "properties": {
        "fabric_index": {"type": "integer", "minimum": 0},
        "sample_id": {"type": "string"},
        "silhouette": {"type": "string"},
        "mesh": {"type": "string"},
        "resolution": {"type": "integer", "minimum": 2},
        "half_width": {"type": "number", "exclusiveMinimum": 0},
    },
    "additionalProperties": False,
}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "fabrics", "observations"],
    "properties": {
        "schema_version": {"const": MANIFEST_SCHEMA_VERSION},
        "fabrics": {"type": "array", "items": _FABRIC_SCHEMA},
        "observations": {"type": "array", "items": _OBSERVATION_SCHEMA},
    },
    "additionalProperties": False,
}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class FabricRecord:
    """One fabric's physical summary (SI units, thickness in mm)."""
    fabric_index: int
    material: str
    weave: str
    sample_count: int
    area_density: float
    thickness_mm: float


@dataclass(frozen=True)
class DrapeObservation:
    """One captured drape: silhouette path plus the capture window."""
    fabric_index: int
    sample_id: str
    silhouette: str
    resolution: int
    half_width: float
    mesh: str | None = None

    def camera(self) -> CameraSpec:
        return CameraSpec(half_width=self.half_width,
                          resolution=self.resolution)


@dataclass(frozen=True)
class Manifest:
    fabrics: tuple
    observations: tuple
    base_dir: Path

    def fabric(self, index: int) -> FabricRecord:
        for rec in self.fabrics:
            if rec.fabric_index == index:
                return rec
        raise DatasetError(f"fabric_index {index} not in manifest")

    def resolve(self, relative: str) -> Path:
        return self.base_dir / relative


def load_manifest(path) -> Manifest:
    """Validated manifest; referenced files must exist."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except OSError as exc:
        raise DatasetError(f"cannot read manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(payload, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise DatasetError(f"{exc.json_path}: {exc.message}") from exc

    fabrics = tuple(FabricRecord(**rec) for rec in payload["fabrics"])
    seen = [f.fabric_index for f in fabrics]
    if len(set(seen)) != len(seen):
        raise DatasetError("duplicate fabric_index in manifest")
    observations = tuple(DrapeObservation(**rec)
                         for rec in payload["observations"])
    manifest = Manifest(fabrics=fabrics, observations=observations,
                        base_dir=path.parent)
    for i, obs in enumerate(observations):
        if obs.fabric_index not in seen:
            raise DatasetError(f"$.observations[{i}].fabric_index: "
                               f"{obs.fabric_index} has no fabric record")
        for name in ("silhouette", "mesh"):
            rel = getattr(obs, name)
            if rel is not None and not manifest.resolve(rel).exists():
                raise DatasetError(f"$.observations[{i}].{name}: "
                                   f"missing file {rel}")
    if not observations:
        warnings.warn("manifest has no observations", stacklevel=2)
    return manifest


def save_manifest(path, manifest: Manifest) -> None:
    payload = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "fabrics": [asdict(f) for f in manifest.fabrics],
        "observations": [],
    }
    for obs in manifest.observations:
        rec = asdict(obs)
        if rec["mesh"] is None:
            del rec["mesh"]
        payload["observations"].append(rec)
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def ingest_silhouette(path, threshold: float = 0.5,
                      camera: CameraSpec | None = None) -> SilhouetteImage:
    """Load a grayscale image and binarize: value >= threshold becomes 1."""
    try:
        pixels = load_image(path)
    except OSError as exc:
        raise DatasetError(f"cannot read image: {exc}") from exc
    except RenderError as exc:
        raise DatasetError(str(exc)) from exc
    if camera is None:
        camera = CameraSpec(resolution=pixels.shape[0])
    if pixels.shape != (camera.resolution, camera.resolution):
        raise DatasetError(f"image is {pixels.shape}, camera expects "
                           f"{(camera.resolution,) * 2}")
    binary = (pixels >= threshold).astype(np.float64)
    return SilhouetteImage(pixels=binary, camera=camera)


def load_observation(manifest: Manifest, obs: DrapeObservation,
                     threshold: float = 0.5) -> SilhouetteImage:
    """Ingest one manifest observation and enforce its invariants."""
    image = ingest_silhouette(manifest.resolve(obs.silhouette), threshold,
                              obs.camera())
    frac = image.pixels.mean()
    if not 0.01 < frac < 0.99:
        raise DatasetError(f"observation {obs.sample_id}: silhouette "
                           f"foreground fraction {frac:.4f} is degenerate")
    return image


# -- synthetic ground truth --------------------------------------------------

@dataclass(frozen=True)
class SyntheticObservation:
    manifest_path: Path
    answer_key_path: Path
    observation: DrapeObservation


def make_synthetic_observation(topology: MeshTopology, rest: RestState,
                               material: MaterialField, n_steps: int,
                               h: float, camera: CameraSpec, out_dir,
                               sample_id: str = "synthetic-0",
                               fabric: FabricRecord | None = None,
                               k_handle: float = K_HANDLE_DEFAULT,
                               gravity=GRAVITY_DEFAULT, damping: float = 0.0,
                               seed: int = 0,
                               save_final_mesh: bool = True):
    """Simulate a known material and write observation files + answer key.

    The silhouette, optional final mesh, and manifest go under out_dir; the
    true parameters (and generator settings) go into answer_key.json, which
    the manifest never references.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = Simulator(topology, rest, material, h, k_handle=k_handle,
                    gravity=gravity, damping=damping)
    state, _ = sim.simulate(sim.initial_state(), n_steps)
    image = render_binary(state.x, topology.faces, camera)

    sil_name = f"{sample_id}.png"
    save_image(out / sil_name, image)
    mesh_name = None
    if save_final_mesh:
        mesh_name = f"{sample_id}_mesh.txt"
        save_mesh(out / mesh_name, state.x, topology.faces)

    if fabric is None:
        fabric = FabricRecord(fabric_index=0, material="synthetic",
                              weave="synthetic", sample_count=1,
                              area_density=rest.density, thickness_mm=0.5)
    obs = DrapeObservation(fabric_index=fabric.fabric_index,
                           sample_id=sample_id, silhouette=sil_name,
                           resolution=camera.resolution,
                           half_width=camera.half_width, mesh=mesh_name)
    manifest = Manifest(fabrics=(fabric,), observations=(obs,),
                        base_dir=out)
    manifest_path = out / "manifest.json"
    save_manifest(manifest_path, manifest)

    answer_path = out / "answer_key.json"
    key = {
        "kind": material.kind,
        "material_flat": flatten(material).tolist(),
        "n_steps": n_steps,
        "h": h,
        "seed": seed,
    }
    answer_path.write_text(json.dumps(key) + "\n")
    return SyntheticObservation(manifest_path=manifest_path,
                                answer_key_path=answer_path,
                                observation=obs)


def load_answer_key(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
