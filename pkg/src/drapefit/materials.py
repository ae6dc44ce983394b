"""Nonlinear anisotropic stiffness sample spaces and their evaluation.

Stretching stiffness lives on a 6x4 matrix C: rows are sample points on a
(principal stretch, strain direction) grid, columns are (c11, c12, c22, c33),
with c11/c22/c33 in N/m and c12 a dimensionless coupling in [0, 1). Bending
stiffness lives on a 3x5 matrix B: rows are edge bias angles (0, 45, 90 deg
to the warp axis), columns are sampled curvature magnitudes, entries in N m.
Local stiffness is bilinear interpolation over the grid, clamped outside it.
"""

from dataclasses import dataclass
import json

import numpy as np

# Sample grid coordinates. Stretch rows are ordered lexicographically by
# (lambda node, phi node); bend columns are log-spaced curvatures in 1/m.
STRETCH_LAMBDA_NODES = np.array([0.02, 0.10])
STRETCH_PHI_NODES = np.deg2rad([0.0, 45.0, 90.0])
BEND_BETA_NODES = np.deg2rad([0.0, 45.0, 90.0])
BEND_ALPHA_NODES = np.array([0.5, 1.0, 2.0, 4.0, 8.0])

STRETCH_SHAPE = (6, 4)
BEND_SHAPE = (3, 5)
N_STRETCH = 24
N_BEND = 15
N_HOMOGENEOUS = N_STRETCH + N_BEND  # 39

# Positivity floor applied to stiffness entries before evaluation; gradients
# are zero inside the floored region. The coupling column is kept in [0, 1).
STIFF_FLOOR = 1e-8
C12_MAX = 1.0 - 1e-9


class MaterialError(ValueError):
    pass


@dataclass(frozen=True)
class MaterialField:
    """Homogeneous (one C, one B) or heterogeneous (C per face, B per hinge)."""

    stretch: np.ndarray  # (6, 4) or (F, 6, 4)
    bend: np.ndarray     # (3, 5) or (H, 3, 5)

    @property
    def kind(self) -> str:
        return "homogeneous" if self.stretch.ndim == 2 else "heterogeneous"

    def __post_init__(self):
        if self.stretch.shape[-2:] != STRETCH_SHAPE or self.bend.shape[-2:] != BEND_SHAPE:
            raise MaterialError("stiffness matrix shape mismatch")
        if (self.stretch.ndim == 2) != (self.bend.ndim == 2):
            raise MaterialError("mixed homogeneous/heterogeneous field")


def floor_stretch(c: np.ndarray) -> np.ndarray:
    """Clamp stretch entries to physical ranges (applied before evaluation)."""
    out = np.array(c, dtype=np.float64, copy=True)
    out[..., [0, 2, 3]] = np.maximum(out[..., [0, 2, 3]], STIFF_FLOOR)
    out[..., 1] = np.clip(out[..., 1], 0.0, C12_MAX)
    return out


def floor_bend(b: np.ndarray) -> np.ndarray:
    return np.maximum(b, STIFF_FLOOR)


def _segment(nodes: np.ndarray, q):
    """Clamped piecewise-linear segment index and weight along a node axis."""
    q = np.clip(q, nodes[0], nodes[-1])
    idx = np.clip(np.searchsorted(nodes, q, side="right") - 1, 0, len(nodes) - 2)
    t = (q - nodes[idx]) / (nodes[idx + 1] - nodes[idx])
    return idx, np.clip(t, 0.0, 1.0)


def eval_stretch_stiffness(c_matrix: np.ndarray, lam_max, phi):
    """Interpolated (c11, c12, c22, c33) at principal stretch lam_max, angle phi.

    Exact at grid nodes; clamped outside the grid; symmetric in the sign of
    phi (the +45 and -45 deg bias directions of a weave are equivalent).
    Entries are floored first, so the result is always physically admissible.
    """
    c = floor_stretch(c_matrix).reshape(c_matrix.shape[:-2] + (2, 3, 4))
    il, tl = _segment(STRETCH_LAMBDA_NODES, np.asarray(lam_max, dtype=np.float64))
    ip, tp = _segment(STRETCH_PHI_NODES, np.abs(np.asarray(phi, dtype=np.float64)))
    tl = tl[..., None]
    tp = tp[..., None]
    lo = (1 - tp) * c[..., il, ip, :] + tp * c[..., il, ip + 1, :]
    hi = (1 - tp) * c[..., il + 1, ip, :] + tp * c[..., il + 1, ip + 1, :]
    return (1 - tl) * lo + tl * hi


def eval_bend_stiffness(b_matrix: np.ndarray, alpha, beta):
    """Interpolated bending stiffness at curvature alpha (sign ignored), bias beta."""
    b = floor_bend(b_matrix)
    ia, ta = _segment(BEND_ALPHA_NODES, np.abs(np.asarray(alpha, dtype=np.float64)))
    ib, tb = _segment(BEND_BETA_NODES, np.asarray(beta, dtype=np.float64))
    lo = (1 - ta) * b[..., ib, ia] + ta * b[..., ib, ia + 1]
    hi = (1 - ta) * b[..., ib + 1, ia] + ta * b[..., ib + 1, ia + 1]
    return (1 - tb) * lo + tb * hi


def parameter_count(kind: str, face_count: int = 0, hinge_count: int = 0) -> int:
    """Learnable scalar count per model kind."""
    if kind == "homogeneous":
        return N_HOMOGENEOUS
    if kind == "heterogeneous":
        return N_STRETCH * face_count + N_BEND * hinge_count
    if kind == "bayesian":
        return 2 * N_HOMOGENEOUS  # mean and raw scale per entry
    raise MaterialError(f"unknown model kind {kind!r}")


def flatten(field: MaterialField) -> np.ndarray:
    """Fixed-order parameter vector: stretch block(s) then bend block(s)."""
    return np.concatenate([field.stretch.ravel(), field.bend.ravel()])


def unflatten(vec: np.ndarray, face_count: int = 0, hinge_count: int = 0) -> MaterialField:
    """Inverse of flatten. Length selects homogeneous vs heterogeneous layout."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape == (N_HOMOGENEOUS,):
        return MaterialField(stretch=vec[:N_STRETCH].reshape(STRETCH_SHAPE).copy(),
                             bend=vec[N_STRETCH:].reshape(BEND_SHAPE).copy())
    expect = parameter_count("heterogeneous", face_count, hinge_count)
    if vec.shape == (expect,) and expect > 0:
        ns = N_STRETCH * face_count
        return MaterialField(
            stretch=vec[:ns].reshape((face_count,) + STRETCH_SHAPE).copy(),
            bend=vec[ns:].reshape((hinge_count,) + BEND_SHAPE).copy())
    raise MaterialError(f"parameter vector length {vec.size} matches no layout")


def tile_field(field: MaterialField, face_count: int, hinge_count: int) -> MaterialField:
    """Broadcast a homogeneous field to per-element form (all elements tied)."""
    if field.kind != "homogeneous":
        raise MaterialError("tile_field expects a homogeneous field")
    return MaterialField(
        stretch=np.broadcast_to(field.stretch, (face_count,) + STRETCH_SHAPE).copy(),
        bend=np.broadcast_to(field.bend, (hinge_count,) + BEND_SHAPE).copy())


def default_material() -> MaterialField:
    """Plausible woven-fabric stiffness used by demos and synthetic data."""
    c = np.tile([50.0, 0.3, 50.0, 20.0], (6, 1))
    b = np.full(BEND_SHAPE, 1e-4)
    return MaterialField(stretch=c, bend=b)


def save_material(path, field: MaterialField) -> None:
    doc = {
        "kind": field.kind,
        "C": field.stretch.tolist(),
        "B": field.bend.tolist(),
        "grid": {
            "lambda": STRETCH_LAMBDA_NODES.tolist(),
            "phi_deg": np.rad2deg(STRETCH_PHI_NODES).tolist(),
            "beta_deg": np.rad2deg(BEND_BETA_NODES).tolist(),
            "alpha": BEND_ALPHA_NODES.tolist(),
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_material(path) -> MaterialField:
    with open(path) as fh:
        doc = json.load(fh)
    try:
        field = MaterialField(stretch=np.asarray(doc["C"], dtype=np.float64),
                              bend=np.asarray(doc["B"], dtype=np.float64))
    except KeyError as exc:
        raise MaterialError(f"material file missing key {exc}") from None
    if field.kind != doc.get("kind", field.kind):
        raise MaterialError("material kind does not match array shapes")
    return field
