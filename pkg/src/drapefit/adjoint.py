"""Reverse-mode differentiation through the implicit-Euler stepper.

Walks a SimTape backwards and turns a cotangent on the final state into
gradients with respect to the stiffness fields, the initial state and the
anchor targets. Each reverse step solves the transposed implicit system
A^T z = dL/d(dv) with the factor of the stored A, then routes z through
three paths:

  * force path        h z.f per element,
  * Jacobian path     h^2 z.J v' per element (A and b both contain K),
  * velocity carry    dL/dv0 = dL/dv1' + h^2 K^T z, with h^2 K^T read off
                      as diag(m~) - A^T so K is never rebuilt.

The two element paths are fused into one scalar per element and
differentiated exactly by the kernels in `elements`.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from . import elements
from .dynamics import SOLVE_TOL, SimTape, Simulator, SolverError, StepRecord

__all__ = ["GradientBundle", "solve_transposed", "grad_wrt_matrix",
           "backward_step", "backward_simulate"]


@dataclass
class GradientBundle:
    """Trajectory-loss gradients. Field shapes mirror the simulator inputs:

    homogeneous material -> stretch (6, 4), bend (3, 5);
    heterogeneous        -> stretch (F, 6, 4), bend (H, 3, 5).
    """

    stretch: np.ndarray
    bend: np.ndarray
    x0: np.ndarray       # (V, 3)
    v0: np.ndarray       # (V, 3)
    anchors: np.ndarray  # (P, 3), rows aligned with rest.pinned

    def material_flat(self) -> np.ndarray:
        """Stiffness gradient in the canonical flat parameter layout."""
        return np.concatenate([self.stretch.ravel(), self.bend.ravel()])


def solve_transposed(a_csc, rhs: np.ndarray) -> np.ndarray:
    """Solve A^T z = rhs under the same residual contract as the forward."""
    nr = np.linalg.norm(rhs)
    if nr == 0.0:
        # covers both an exactly-zero cotangent and one so small its norm
        # underflows (saturated silhouettes emit pixel grads ~1e-190)
        return np.zeros_like(rhs)
    if not np.isfinite(nr):
        raise SolverError("non-finite right-hand side in transposed solve")
    try:
        z = spla.splu(a_csc).solve(rhs, trans="T")
    except RuntimeError as exc:
        raise SolverError(f"transposed factorization failed: {exc}") from exc
    residual = np.linalg.norm(a_csc.T @ z - rhs) / nr
    if not np.isfinite(residual) or residual > SOLVE_TOL:
        raise SolverError(
            f"transposed residual {residual:.3e} exceeds {SOLVE_TOL:.1e}")
    return z


def grad_wrt_matrix(pattern, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """dL/dA restricted to the stored pattern for y = A^{-1} b, given the
    transposed-solve vector z. Entry (i, j) is -z_i y_j; returned in CSC
    data order."""
    col_of = np.repeat(np.arange(pattern.n3), np.diff(pattern.indptr))
    return -z[pattern.indices] * y[col_of]


class _Accumulator:
    def __init__(self, sim: Simulator):
        self.homogeneous = sim.material_kind == "homogeneous"
        if self.homogeneous:
            self.stretch = np.zeros((6, 4))
            self.bend = np.zeros((3, 5))
        else:
            self.stretch = np.zeros_like(sim.material.stretch)
            self.bend = np.zeros_like(sim.material.bend)
        self.anchors = np.zeros((len(sim.rest.pinned), 3))

    def add_stretch(self, gc):
        self.stretch += gc.sum(axis=0) if self.homogeneous else gc

    def add_bend(self, gb):
        self.bend += gb.sum(axis=0) if self.homogeneous else gb


def backward_step(sim: Simulator, rec: StepRecord, gx1: np.ndarray,
                  gv1: np.ndarray, grads: _Accumulator):
    """One reverse step: cotangents on (x1, v1) -> cotangents on (x0, v0),
    accumulating stiffness and anchor gradients along the way."""
    h = sim.h
    gv1p = gv1 + h * gx1       # x1 = x0 + h v1 folds into the v1 cotangent
    gx0 = gx1.copy()

    a_csc = sim.matrix(rec.a_data)
    z = solve_transposed(a_csc, gv1p)

    # v1 = v0 + A^{-1} h (F + h K v0): the explicit v0 path is h^2 K^T z
    m_tilde = sim.masses3 * (1.0 + h * sim.damping)
    gv0 = gv1p + m_tilde * z - a_csc.T @ z

    w = rec.v_prev.ravel() + rec.dv    # post-step velocity, flat
    x = rec.x_prev
    topo = sim.topology
    if topo.face_count:
        ze = z[sim.face_dofs].reshape(-1, 3, 3)
        we = w[sim.face_dofs].reshape(-1, 3, 3)
        gxe, gce = elements.stretch_backward(
            x[topo.faces], sim.material.stretch, sim.rest.face_uv_inv,
            sim.rest.face_areas, ze, we, h)
        np.add.at(gx0, sim.face_dofs, gxe.reshape(-1, 9))
        grads.add_stretch(gce)
    if topo.hinge_count:
        ze = z[sim.hinge_dofs].reshape(-1, 4, 3)
        we = w[sim.hinge_dofs].reshape(-1, 4, 3)
        gxe, gbe = elements.bend_backward(
            x[topo.hinges], sim.material.bend, sim.rest.hinge_bias_angles,
            sim.rest.hinge_rest_lengths, sim.hinge_psi_sum,
            sim.rest.hinge_rest_angles, ze, we, h)
        np.add.at(gx0, sim.hinge_dofs, gxe.reshape(-1, 12))
        grads.add_bend(gbe)
    if len(sim.pin_dofs):
        # handle force -k (x - anchor) is linear: only the force path acts
        zp = z[sim.pin_dofs]
        gx0[sim.pin_dofs] += -h * sim.k_handle * zp
        grads.anchors += (h * sim.k_handle * zp).reshape(-1, 3)
    return gx0, gv0


def backward_simulate(sim: Simulator, tape: SimTape, gx_final: np.ndarray,
                      gv_final: np.ndarray | None = None) -> GradientBundle:
    """Accumulate gradients of a loss over the whole taped trajectory.

    gx_final / gv_final are dL/dx and dL/dv at the final state, shape (V, 3)
    or flat. The tape is read only; calling twice gives identical results.
    """
    if not tape.records:
        raise ValueError("empty tape")
    if abs(tape.h - sim.h) > 0:
        raise ValueError("tape h does not match simulator h")
    n3 = sim.pattern.n3
    gx = np.asarray(gx_final, dtype=np.float64).ravel().copy()
    if gx.size != n3:
        raise ValueError(f"gx_final has {gx.size} values, expected {n3}")
    if gv_final is None:
        gv = np.zeros(n3)
    else:
        gv = np.asarray(gv_final, dtype=np.float64).ravel().copy()
        if gv.size != n3:
            raise ValueError(f"gv_final has {gv.size} values, expected {n3}")

    grads = _Accumulator(sim)
    for rec in reversed(tape.records):
        gx, gv = backward_step(sim, rec, gx, gv, grads)
    return GradientBundle(stretch=grads.stretch, bend=grads.bend,
                          x0=gx.reshape(-1, 3), v0=gv.reshape(-1, 3),
                          anchors=grads.anchors)
