"""Disk meshes for drape simulation: construction, rest quantities, text I/O.

Conventions: the cloth rest shape is a flat disk in the z=0 plane centered at
the origin. Material (warp, weft) axes are the +x and +y axes of the rest
configuration. Strict SI units throughout (m, kg, s).
"""

from dataclasses import dataclass, replace

import numpy as np

# Faces thinner than this are considered degenerate (m^2). Far below any
# physical triangle at the resolutions this package targets.
DEGENERATE_AREA = 1e-12


class MeshError(ValueError):
    """Invalid topology, degenerate geometry, or unreadable mesh file."""


@dataclass(frozen=True)
class MeshTopology:
    """Connectivity of a triangle mesh, with interior-edge (hinge) data.

    A hinge is an edge shared by exactly two faces; boundary edges are never
    hinges. Hinge row layout is (edge_i, edge_j, opposite vertex in the
    lower-index face, opposite vertex in the other face).
    """

    vertex_count: int
    faces: np.ndarray           # (F, 3) int32
    edges: np.ndarray           # (E, 2) int32, each row i < j, rows sorted
    hinges: np.ndarray          # (H, 4) int32
    hinge_faces: np.ndarray     # (H, 2) int32, lower face index first
    boundary_edges: np.ndarray  # (B, 2) int32

    @property
    def face_count(self) -> int:
        return len(self.faces)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @property
    def hinge_count(self) -> int:
        return len(self.hinges)

    def euler_characteristic(self) -> int:
        return self.vertex_count - self.edge_count + self.face_count


@dataclass(frozen=True)
class RestState:
    """Rest-pose quantities consumed by the force models.

    face_uv_inv maps deformed edge vectors into the material (warp, weft)
    frame: it is the inverse of the 2x2 matrix of rest edge vectors expressed
    in (x, y). Hinge heights are the two triangle altitudes onto the shared
    edge. Bias angle is the acute angle between the rest edge and the warp
    axis, in [0, pi/2].
    """

    positions: np.ndarray            # (V, 3)
    face_areas: np.ndarray           # (F,)
    face_uv_inv: np.ndarray          # (F, 2, 2)
    vertex_masses: np.ndarray        # (V,)
    hinge_rest_lengths: np.ndarray   # (H,)
    hinge_rest_heights: np.ndarray   # (H, 2)
    hinge_rest_angles: np.ndarray    # (H,) dihedral, flat = pi
    hinge_bias_angles: np.ndarray    # (H,)
    density: float                   # kg/m^2
    pinned: np.ndarray               # (P,) int32 vertex indices
    anchors: np.ndarray              # (P, 3) anchor positions for pinned


def build_topology(vertex_count: int, faces) -> MeshTopology:
    """Derive edges, hinges and boundary from a face list; validate manifoldness."""
    faces = np.asarray(faces, dtype=np.int32)
    if faces.size == 0:
        faces = faces.reshape(0, 3)
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise MeshError("faces must be an (F, 3) index array")
    if len(faces) and (faces.min() < 0 or faces.max() >= vertex_count):
        raise MeshError("face index out of range")
    for f, (a, b, c) in enumerate(faces):
        if a == b or b == c or a == c:
            raise MeshError(f"face {f} has repeated vertices")

    # edge -> list of (face index, opposite vertex)
    edge_map: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for f, tri in enumerate(faces):
        for k in range(3):
            i, j = int(tri[k]), int(tri[(k + 1) % 3])
            opp = int(tri[(k + 2) % 3])
            key = (i, j) if i < j else (j, i)
            edge_map.setdefault(key, []).append((f, opp))

    edges, hinges, hinge_faces, boundary = [], [], [], []
    for key in sorted(edge_map):
        incident = edge_map[key]
        if len(incident) > 2:
            raise MeshError(f"non-manifold edge {key} shared by {len(incident)} faces")
        edges.append(key)
        if len(incident) == 1:
            boundary.append(key)
        else:
            (f1, o1), (f2, o2) = sorted(incident)
            hinges.append((key[0], key[1], o1, o2))
            hinge_faces.append((f1, f2))

    def arr(rows, width):
        return (np.array(rows, dtype=np.int32) if rows
                else np.zeros((0, width), dtype=np.int32))

    return MeshTopology(
        vertex_count=int(vertex_count),
        faces=faces,
        edges=arr(edges, 2),
        hinges=arr(hinges, 4),
        hinge_faces=arr(hinge_faces, 2),
        boundary_edges=arr(boundary, 2),
    )


def generate_disk_mesh(radius: float, target_edge_length: float):
    """Concentric-ring disk triangulation. Returns (topology, positions).

    Rings are spaced by radius/K with K = round(radius/target_edge_length);
    ring k carries max(6, round(2 pi k)) vertices so tangential spacing tracks
    the radial spacing. Annuli are stitched by a deterministic two-pointer
    zipper that always advances the shorter diagonal. Seed-free.
    """
    if radius <= 0:
        raise MeshError("radius must be positive")
    if not (0 < target_edge_length <= radius):
        raise MeshError("target_edge_length must be in (0, radius]")
    rings = max(1, round(radius / target_edge_length))
    ring_sizes = [max(6, round(2 * np.pi * k)) for k in range(1, rings + 1)]

    positions = [np.zeros(3)]
    ring_start = [None]  # 1-based ring -> first vertex id
    for k, n_k in enumerate(ring_sizes, start=1):
        ring_start.append(len(positions))
        r_k = radius * k / rings
        ang = 2 * np.pi * np.arange(n_k) / n_k
        ring = np.stack([r_k * np.cos(ang), r_k * np.sin(ang), np.zeros(n_k)], axis=1)
        positions.extend(ring)
    positions = np.asarray(positions, dtype=np.float64)

    faces = []
    first = ring_start[1]
    n1 = ring_sizes[0]
    for j in range(n1):
        faces.append((0, first + j, first + (j + 1) % n1))

    for k in range(1, rings):
        inner = ring_start[k] + np.arange(ring_sizes[k - 1])
        outer = ring_start[k + 1] + np.arange(ring_sizes[k])
        n_in, n_out = len(inner), len(outer)
        i = j = 0
        while i < n_in or j < n_out:
            vi, vi1 = inner[i % n_in], inner[(i + 1) % n_in]
            vj, vj1 = outer[j % n_out], outer[(j + 1) % n_out]
            if i < n_in and j < n_out:
                adv_i = (np.linalg.norm(positions[vi1] - positions[vj])
                         < np.linalg.norm(positions[vi] - positions[vj1]))
            else:
                adv_i = i < n_in
            if adv_i:
                faces.append((vi, vj, vi1))
                i += 1
            else:
                faces.append((vi, vj, vj1))
                j += 1

    faces = np.array(faces, dtype=np.int32)
    # Enforce CCW orientation seen from +z, then reject degenerate faces.
    p = positions
    d1 = p[faces[:, 1], :2] - p[faces[:, 0], :2]
    d2 = p[faces[:, 2], :2] - p[faces[:, 0], :2]
    signed2 = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    flip = signed2 < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    if np.any(np.abs(signed2) / 2 < DEGENERATE_AREA):
        raise MeshError("degenerate face produced by disk generator")
    return build_topology(len(positions), faces), positions


def face_areas(positions, faces) -> np.ndarray:
    d1 = positions[faces[:, 1]] - positions[faces[:, 0]]
    d2 = positions[faces[:, 2]] - positions[faces[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(d1, d2), axis=1)


def dihedral_angles(positions, hinges) -> np.ndarray:
    """Dihedral angle per hinge row, flat = pi.

    Angle convention: pi + atan2((n1 x n2) . e_hat, n1 . n2) with n1 the
    normal of the face holding the first opposite vertex and n2 the other,
    both computed so they agree on a flat mesh.
    """
    x0 = positions[hinges[:, 0]]
    x1 = positions[hinges[:, 1]]
    x2 = positions[hinges[:, 2]]
    x3 = positions[hinges[:, 3]]
    e = x1 - x0
    n1 = np.cross(x2 - x0, x2 - x1)
    n2 = np.cross(x3 - x1, x3 - x0)
    ln1 = np.linalg.norm(n1, axis=1)
    ln2 = np.linalg.norm(n2, axis=1)
    le = np.linalg.norm(e, axis=1)
    if np.any(ln1 < 1e-14) or np.any(ln2 < 1e-14) or np.any(le < 1e-14):
        raise MeshError("degenerate hinge face while measuring dihedrals")
    n1h = n1 / ln1[:, None]
    n2h = n2 / ln2[:, None]
    eh = e / le[:, None]
    sin = np.einsum("ij,ij->i", np.cross(n1h, n2h), eh)
    cos = np.einsum("ij,ij->i", n1h, n2h)
    return np.pi + np.arctan2(sin, cos)


def compute_rest_state(topology: MeshTopology, rest_positions, density: float) -> RestState:
    """Precompute areas, material frames, lumped masses and hinge rest data.

    Each face contributes one third of its mass (density * area) to each of
    its vertices. Material coordinates are the (x, y) rest coordinates.
    """
    if density <= 0:
        raise MeshError("density must be positive")
    pos = np.asarray(rest_positions, dtype=np.float64)
    if pos.shape != (topology.vertex_count, 3):
        raise MeshError("rest positions shape mismatch")

    areas = face_areas(pos, topology.faces)
    if np.any(areas < DEGENERATE_AREA):
        raise MeshError("degenerate face in rest configuration")

    # 2x2 material matrix per face from rest (x, y) edge vectors.
    d1 = pos[topology.faces[:, 1], :2] - pos[topology.faces[:, 0], :2]
    d2 = pos[topology.faces[:, 2], :2] - pos[topology.faces[:, 0], :2]
    dm = np.stack([d1, d2], axis=2)  # (F, 2, 2), columns are edge vectors
    det = dm[:, 0, 0] * dm[:, 1, 1] - dm[:, 0, 1] * dm[:, 1, 0]
    if np.any(np.abs(det) < 2 * DEGENERATE_AREA):
        raise MeshError("face collapses in the material plane")
    inv = np.empty_like(dm)
    inv[:, 0, 0] = dm[:, 1, 1]
    inv[:, 0, 1] = -dm[:, 0, 1]
    inv[:, 1, 0] = -dm[:, 1, 0]
    inv[:, 1, 1] = dm[:, 0, 0]
    inv /= det[:, None, None]

    masses = np.zeros(topology.vertex_count)
    share = np.repeat(density * areas / 3.0, 3)
    np.add.at(masses, topology.faces.ravel(), share)
    if np.any(masses <= 0):
        raise MeshError("vertex with zero mass (isolated vertex?)")

    hinges = topology.hinges
    if topology.hinge_count:
        rest_len = np.linalg.norm(pos[hinges[:, 1]] - pos[hinges[:, 0]], axis=1)
        h_areas = areas[topology.hinge_faces]              # (H, 2)
        heights = 2.0 * h_areas / rest_len[:, None]
        rest_ang = dihedral_angles(pos, hinges)
        edge = pos[hinges[:, 1], :2] - pos[hinges[:, 0], :2]
        bias = np.arctan2(np.abs(edge[:, 1]), np.abs(edge[:, 0]))
    else:
        rest_len = np.zeros(0)
        heights = np.zeros((0, 2))
        rest_ang = np.zeros(0)
        bias = np.zeros(0)

    return RestState(
        positions=pos,
        face_areas=areas,
        face_uv_inv=inv,
        vertex_masses=masses,
        hinge_rest_lengths=rest_len,
        hinge_rest_heights=heights,
        hinge_rest_angles=rest_ang,
        hinge_bias_angles=bias,
        density=float(density),
        pinned=np.zeros(0, dtype=np.int32),
        anchors=np.zeros((0, 3)),
    )


def pin_support_region(rest_state: RestState, pin_radius: float) -> RestState:
    """Pin every vertex whose rest distance to the disk center is < pin_radius.

    Anchors are the rest positions of the pinned vertices, mimicking the rigid
    support panel of the drape tester.
    """
    if pin_radius <= 0:
        raise MeshError("pin_radius must be positive")
    dist = np.linalg.norm(rest_state.positions[:, :2], axis=1)
    pinned = np.nonzero(dist < pin_radius)[0].astype(np.int32)
    if len(pinned) == 0:
        raise MeshError("pin_radius selects no vertices")
    return replace(rest_state, pinned=pinned,
                   anchors=rest_state.positions[pinned].copy())


def save_mesh(path, positions, faces) -> None:
    """Write a plain-text triangle mesh (v/f lines, 1-based, 9 significant digits)."""
    positions = np.asarray(positions)
    with open(path, "w") as fh:
        for x, y, z in positions:
            fh.write("v %.9g %.9g %.9g\n" % (x, y, z))
        for a, b, c in np.asarray(faces, dtype=np.int64) + 1:
            fh.write("f %d %d %d\n" % (a, b, c))


def load_mesh(path):
    """Read the v/f text format. Returns (topology, positions)."""
    positions, faces = [], []
    with open(path) as fh:
        lines = fh.readlines()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v":
            if len(parts) != 4:
                raise MeshError(f"line {lineno}: vertex needs 3 coordinates")
            try:
                positions.append([float(v) for v in parts[1:]])
            except ValueError:
                raise MeshError(f"line {lineno}: bad vertex coordinate") from None
        elif parts[0] == "f":
            if len(parts) != 4:
                raise MeshError(f"line {lineno}: only triangle faces supported")
            try:
                idx = [int(v.split("/")[0]) for v in parts[1:]]
            except ValueError:
                raise MeshError(f"line {lineno}: bad face index") from None
            if any(v < 1 or v > len(positions) for v in idx):
                raise MeshError(f"line {lineno}: face index out of range")
            faces.append([v - 1 for v in idx])
        else:
            raise MeshError(f"line {lineno}: unsupported directive {parts[0]!r}")
    if not positions:
        raise MeshError("mesh file contains no vertices")
    positions = np.asarray(positions, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int32) if faces else np.zeros((0, 3), np.int32)
    return build_topology(len(positions), faces), positions
