"""Implicit-Euler cloth dynamics: assembly, sparse solve, time stepping.

Each step solves A dv = b with A = M (1 + h c_d) - h^2 K and
b = h (F + h K v), where K is the position Jacobian of the total force and
F collects stretch, bend, gravity and handle (anchor spring) forces. The
state update is v' = v + dv, x' = x + h v'. Assembly scatters per-element
contributions through a precomputed sparsity pattern in a fixed order, so
results are bit-reproducible regardless of thread count.
"""

from dataclasses import dataclass, field
import time

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import elements
from .materials import MaterialField, tile_field
from .meshing import MeshTopology, RestState

GRAVITY_DEFAULT = (0.0, 0.0, -9.8)
K_HANDLE_DEFAULT = 1e4
SOLVE_TOL = 1e-9


class SolverError(RuntimeError):
    """Singular or unacceptably ill-conditioned implicit system."""


@dataclass(frozen=True)
class SimState:
    x: np.ndarray   # (V, 3) positions
    v: np.ndarray   # (V, 3) velocities
    t: int = 0      # step index


@dataclass(frozen=True)
class SystemPattern:
    """Fixed sparsity structure of A for one (mesh, pinning) pair.

    Raw scatter slots are ordered (stretch blocks, bend blocks, handle
    diagonal, full diagonal); `inverse` maps each raw slot to its position in
    the unique CSC data array.
    """

    n3: int
    nnz: int
    indices: np.ndarray     # CSC row indices
    indptr: np.ndarray      # CSC column pointers
    inverse: np.ndarray     # raw slot -> data position
    diag_pos: np.ndarray    # data positions of the n3 diagonal entries


def _element_dofs(vertex_ids: np.ndarray) -> np.ndarray:
    """(E, k) vertex ids -> (E, 3k) global coordinate indices."""
    e, k = vertex_ids.shape
    return (3 * vertex_ids[:, :, None] + np.arange(3)).reshape(e, 3 * k)


def build_pattern(topology: MeshTopology, pinned: np.ndarray) -> tuple:
    """Union of element blocks plus the diagonal. Returns (pattern, dof maps)."""
    n3 = 3 * topology.vertex_count
    face_dofs = _element_dofs(topology.faces)
    hinge_dofs = (_element_dofs(topology.hinges)
                  if topology.hinge_count else np.zeros((0, 12), dtype=np.int64))
    pin_dofs = _element_dofs(pinned.reshape(-1, 1)).ravel()

    rows, cols = [], []
    for dofs in (face_dofs, hinge_dofs):
        k = dofs.shape[1]
        rows.append(np.repeat(dofs, k, axis=1).ravel())
        cols.append(np.tile(dofs, (1, k)).ravel())
    rows.append(pin_dofs)
    cols.append(pin_dofs)
    diag = np.arange(n3)
    rows.append(diag)
    cols.append(diag)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)

    keys = cols.astype(np.int64) * n3 + rows
    uniq, inverse = np.unique(keys, return_inverse=True)
    indices = (uniq % n3).astype(np.int32)
    col_of = uniq // n3
    indptr = np.searchsorted(col_of, np.arange(n3 + 1)).astype(np.int32)
    diag_pos = np.searchsorted(uniq, diag.astype(np.int64) * n3 + diag)
    pattern = SystemPattern(n3=n3, nnz=len(uniq), indices=indices,
                            indptr=indptr, inverse=inverse, diag_pos=diag_pos)
    return pattern, face_dofs, hinge_dofs, pin_dofs


@dataclass
class StepRecord:
    """Everything the backward pass needs to replay one step exactly."""

    x_prev: np.ndarray
    v_prev: np.ndarray
    a_data: np.ndarray   # CSC values of A
    b: np.ndarray
    dv: np.ndarray
    residual: float
    seconds: float


@dataclass
class SimTape:
    h: float
    records: list = field(default_factory=list)


def _solve_with_residual(a_csc, b: np.ndarray):
    nb = np.linalg.norm(b)
    if nb == 0.0:
        # exactly-zero loads and loads tiny enough that the norm underflows
        return np.zeros_like(b), 0.0
    if not np.isfinite(nb):
        raise SolverError("non-finite load vector in implicit solve")
    try:
        lu = spla.splu(a_csc)
        dv = lu.solve(b)
    except RuntimeError as exc:
        raise SolverError(f"sparse factorization failed: {exc}") from exc
    residual = np.linalg.norm(a_csc @ dv - b) / nb
    if not np.isfinite(residual) or residual > SOLVE_TOL:
        raise SolverError(
            f"solve residual {residual:.3e} exceeds {SOLVE_TOL:.1e}; "
            f"|A|={spla.norm(a_csc):.3e}, |b|={nb:.3e}")
    return dv, residual


def solve_system(a_csc, b: np.ndarray) -> np.ndarray:
    """Direct sparse solve with the per-step residual contract."""
    return _solve_with_residual(a_csc, b)[0]


class Simulator:
    """Owns one mesh + material + integration setup; states pass through."""

    def __init__(self, topology: MeshTopology, rest: RestState,
                 material: MaterialField, h: float,
                 k_handle: float = K_HANDLE_DEFAULT,
                 gravity=GRAVITY_DEFAULT, damping: float = 0.0):
        if h <= 0:
            raise ValueError("h must be positive")
        self.topology = topology
        self.rest = rest
        self.h = float(h)
        self.k_handle = float(k_handle)
        self.damping = float(damping)
        self.gravity = np.asarray(gravity, dtype=np.float64)

        self.material_kind = material.kind
        if material.kind == "homogeneous":
            material = tile_field(material, topology.face_count, topology.hinge_count)
        if len(material.stretch) != topology.face_count:
            raise ValueError("stretch field size must equal face count")
        if len(material.bend) != topology.hinge_count:
            raise ValueError("bend field size must equal hinge count")
        self.material = material

        (self.pattern, self.face_dofs, self.hinge_dofs,
         self.pin_dofs) = build_pattern(topology, rest.pinned)
        self.masses3 = np.repeat(rest.vertex_masses, 3)
        self.gravity_flat = (rest.vertex_masses[:, None] * self.gravity).ravel()
        self.anchors_flat = rest.anchors.ravel()
        self.hinge_psi_sum = rest.hinge_rest_heights.sum(axis=1)

    # -- forces ------------------------------------------------------------

    def element_forces(self, x: np.ndarray):
        """Stretch/bend forces and local Jacobians at positions x."""
        topo = self.topology
        f_s = np.zeros((0, 3, 3))
        j_s = np.zeros((0, 9, 9))
        f_b = np.zeros((0, 4, 3))
        j_b = np.zeros((0, 12, 12))
        if topo.face_count:
            f_s, j_s = elements.stretch_force_jacobian(
                x[topo.faces], self.material.stretch,
                self.rest.face_uv_inv, self.rest.face_areas)
        if topo.hinge_count:
            f_b, j_b = elements.bend_force_jacobian(
                x[topo.hinges], self.material.bend,
                self.rest.hinge_bias_angles, self.rest.hinge_rest_lengths,
                self.hinge_psi_sum, self.rest.hinge_rest_angles)
        return f_s, j_s, f_b, j_b

    def force_vector(self, x: np.ndarray, f_s, f_b) -> np.ndarray:
        """Total flat force: elements + gravity + anchor springs."""
        n3 = self.pattern.n3
        out = self.gravity_flat.copy()
        if len(f_s):
            np.add.at(out, self.face_dofs, f_s.reshape(len(f_s), 9))
        if len(f_b):
            np.add.at(out, self.hinge_dofs, f_b.reshape(len(f_b), 12))
        if len(self.pin_dofs):
            x_flat = x.ravel()
            out[self.pin_dofs] += -self.k_handle * (x_flat[self.pin_dofs]
                                                    - self.anchors_flat)
        return out

    def assemble(self, x: np.ndarray, v: np.ndarray):
        """Build (A data, b, K) for state (x, v)."""
        f_s, j_s, f_b, j_b = self.element_forces(x)
        force = self.force_vector(x, f_s, f_b)
        pat = self.pattern
        raw = np.concatenate([
            j_s.ravel(), j_b.ravel(),
            np.full(len(self.pin_dofs), -self.k_handle),
            np.zeros(pat.n3),
        ])
        k_data = np.bincount(pat.inverse, weights=raw, minlength=pat.nnz)
        k_csc = sp.csc_matrix((k_data, pat.indices, pat.indptr),
                              shape=(pat.n3, pat.n3))
        a_data = -self.h * self.h * k_data
        a_data[pat.diag_pos] += self.masses3 * (1.0 + self.h * self.damping)
        b = self.h * (force + self.h * (k_csc @ v.ravel()))
        return a_data, b, k_csc

    def matrix(self, a_data: np.ndarray):
        pat = self.pattern
        return sp.csc_matrix((a_data, pat.indices, pat.indptr),
                             shape=(pat.n3, pat.n3))

    # -- stepping ----------------------------------------------------------

    def initial_state(self) -> SimState:
        return SimState(x=self.rest.positions.copy(),
                        v=np.zeros_like(self.rest.positions), t=0)

    def step(self, state: SimState, tape: SimTape | None = None) -> SimState:
        t0 = time.perf_counter()
        a_data, b, _ = self.assemble(state.x, state.v)
        dv, residual = _solve_with_residual(self.matrix(a_data), b)
        v_next = state.v + dv.reshape(-1, 3)
        x_next = state.x + self.h * v_next
        seconds = time.perf_counter() - t0
        if tape is not None:
            tape.records.append(StepRecord(
                x_prev=state.x.copy(), v_prev=state.v.copy(),
                a_data=a_data, b=b, dv=dv, residual=residual, seconds=seconds))
        return SimState(x=x_next, v=v_next, t=state.t + 1)

    def simulate(self, state: SimState, n_steps: int,
                 record_tape: bool = False):
        """Advance n_steps. Returns (final state, tape or None)."""
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        tape = SimTape(h=self.h) if record_tape else None
        for k in range(n_steps):
            try:
                state = self.step(state, tape)
            except SolverError as exc:
                raise SolverError(f"step {state.t + 1}: {exc}") from exc
        return state, tape
