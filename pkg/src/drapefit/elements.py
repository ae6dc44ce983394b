"""Per-element force models and their exact derivatives.

Two element types drive the cloth:

* stretch: per triangle, in-plane force from the Green-Lagrange strain of the
  deformation gradient mapping material (warp, weft) coordinates to world
  space, with stress = local stiffness matrix times strain in Voigt form
  (e_uu, e_vv, e_uv). Local stiffness is interpolated from the C sample grid
  at the principal-stretch magnitude and direction of the current strain.
* bend: per interior edge, the momentum- and torque-free discrete-hinge force
  with magnitude proportional to sin((gamma - gamma_rest)/2), gamma being the
  dihedral angle (flat = pi), and stiffness interpolated from the B grid at
  the hinge's turn-per-meter curvature and rest bias angle.

Force formulas are written out explicitly below; JAX differentiates exactly
these routines (forward mode for position Jacobians, reverse mode for the
backward-pass kernels), so derivatives match the forces by construction.
Nonsmooth points (principal-strain ties, grid clamp boundaries) take a zero
subgradient via the guarded-where pattern and never produce NaNs.
"""

from dataclasses import dataclass

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp
import numpy as np

from .materials import (BEND_ALPHA_NODES, BEND_BETA_NODES, C12_MAX,
                        STIFF_FLOOR, STRETCH_LAMBDA_NODES, STRETCH_PHI_NODES)

_TINY = 1e-24

_LAM_NODES = jnp.asarray(STRETCH_LAMBDA_NODES)
_PHI_NODES = jnp.asarray(STRETCH_PHI_NODES)
_ALPHA_NODES = jnp.asarray(BEND_ALPHA_NODES)
_BETA_NODES = jnp.asarray(BEND_BETA_NODES)

# per-column physical range of the stretch table (diag floored, c12 in [0, 1))
_C_LOWER = jnp.array([STIFF_FLOOR, 0.0, STIFF_FLOOR, STIFF_FLOOR])
_C_UPPER = jnp.array([jnp.inf, C12_MAX, jnp.inf, jnp.inf])


# ---------------------------------------------------------------------------
# guarded primitives (finite values and finite gradients everywhere)

def _safe_sqrt(q):
    ok = q > _TINY
    return jnp.where(ok, jnp.sqrt(jnp.where(ok, q, 1.0)), 0.0)


def _safe_inv(x):
    ok = x > _TINY
    return jnp.where(ok, 1.0 / jnp.where(ok, x, 1.0), 0.0)


def _segment(nodes, q):
    q = jnp.clip(q, nodes[0], nodes[-1])
    idx = jnp.clip(jnp.searchsorted(nodes, q, side="right") - 1, 0, len(nodes) - 2)
    t = (q - nodes[idx]) / (nodes[idx + 1] - nodes[idx])
    return idx, jnp.clip(t, 0.0, 1.0)


# ---------------------------------------------------------------------------
# strain and stiffness lookup

def strain_voigt(xf, dm_inv):
    """(e_uu, e_vv, e_uv) of one face; xf is (3, 3), dm_inv the rest 2x2."""
    d = jnp.stack([xf[1] - xf[0], xf[2] - xf[0]], axis=1)  # world edge matrix
    f = d @ dm_inv                                         # deformation gradient
    g = f.T @ f
    return jnp.array([0.5 * (g[0, 0] - 1.0), 0.5 * (g[1, 1] - 1.0), 0.5 * g[0, 1]])


def principal_from_voigt(eps):
    """Principal stretches and signed direction angle of the strain.

    Eigenvalues e of twice the strain matrix relate to stretches via
    lam = sqrt(e + 1) - 1. A tie (isotropic strain) takes phi = 0 with zero
    subgradient.
    """
    a = 2.0 * eps[0]
    d = 2.0 * eps[1]
    o = 2.0 * eps[2]
    mean = 0.5 * (a + d)
    q = 0.25 * (a - d) ** 2 + o * o
    tied = q <= _TINY
    r = _safe_sqrt(q)
    lam_max = _safe_sqrt(mean + r + 1.0) - 1.0
    lam_min = _safe_sqrt(mean - r + 1.0) - 1.0
    num = jnp.where(tied, 0.0, 2.0 * o)
    den = jnp.where(tied, 1.0, a - d)
    phi = jnp.where(tied, 0.0, 0.5 * jnp.arctan2(num, den))
    return lam_max, lam_min, phi


def _floor_stretch(c):
    floored = jnp.maximum(c, STIFF_FLOOR)
    c12 = jnp.clip(c[:, 1], 0.0, C12_MAX)
    return floored.at[:, 1].set(c12)


def stretch_stiffness(cmat, lam_max, phi):
    """Clamped bilinear lookup of (c11, c12, c22, c33); symmetric in phi."""
    c = _floor_stretch(cmat).reshape(2, 3, 4)
    il, tl = _segment(_LAM_NODES, lam_max)
    ip, tp = _segment(_PHI_NODES, jnp.abs(phi))
    lo = (1 - tp) * c[il, ip] + tp * c[il, ip + 1]
    hi = (1 - tp) * c[il + 1, ip] + tp * c[il + 1, ip + 1]
    return (1 - tl) * lo + tl * hi


def bend_stiffness(bmat, alpha, beta):
    """Clamped bilinear lookup of the hinge stiffness; symmetric in alpha."""
    b = jnp.maximum(bmat, STIFF_FLOOR)
    ia, ta = _segment(_ALPHA_NODES, jnp.abs(alpha))
    ib, tb = _segment(_BETA_NODES, beta)
    lo = (1 - ta) * b[ib, ia] + ta * b[ib, ia + 1]
    hi = (1 - ta) * b[ib + 1, ia] + ta * b[ib + 1, ia + 1]
    return (1 - tb) * lo + tb * hi


# ---------------------------------------------------------------------------
# forces

def stretch_force(xf, cmat, dm_inv, area):
    """Force on the three face vertices: -area * sum_m sigma_m dEps_m/dx."""
    # Gaussian material draws can leave the physical range; clamp with zero
    # gradient outside so the sample still simulates.
    cmat = jnp.clip(cmat, _C_LOWER, _C_UPPER)
    eps = strain_voigt(xf, dm_inv)
    lam_max, _, phi = principal_from_voigt(eps)
    c4 = stretch_stiffness(cmat, lam_max, phi)
    sigma = jnp.array([c4[0] * eps[0] + c4[1] * eps[1],
                       c4[1] * eps[0] + c4[2] * eps[1],
                       c4[3] * eps[2]])
    deps = jax.jacfwd(strain_voigt)(xf, dm_inv)  # (3 strain, 3 vertex, 3 coord)
    return -area * jnp.einsum("m,mvc->vc", sigma, deps)


def bend_force(xh, bmat, beta, rest_len, psi_sum, gamma_bar):
    """Hinge force on (edge v0, edge v1, wing of face 1, wing of face 2).

    Mode vectors are built from current geometry so the four forces sum to
    zero and carry zero net torque identically; the scalar prefactor uses the
    rest edge length and rest heights. The curvature query is the angle
    deviation per meter across the hinge, using the rest distance between the
    two face centroids (psi_sum / 3).
    """
    bmat = jnp.maximum(bmat, STIFF_FLOOR)   # zero grad below the floor
    x0, x1, x2, x3 = xh[0], xh[1], xh[2], xh[3]
    e = x1 - x0
    n1 = jnp.cross(x2 - x0, x2 - x1)
    n2 = jnp.cross(x3 - x1, x3 - x0)
    inv_n1 = _safe_inv(jnp.dot(n1, n1))
    inv_n2 = _safe_inv(jnp.dot(n2, n2))
    le = _safe_sqrt(jnp.dot(e, e))
    eh = e * _safe_inv(le)
    n1h = n1 * _safe_inv(_safe_sqrt(jnp.dot(n1, n1)))
    n2h = n2 * _safe_inv(_safe_sqrt(jnp.dot(n2, n2)))

    theta = jnp.arctan2(jnp.dot(jnp.cross(n1h, n2h), eh), jnp.dot(n1h, n2h))
    gamma = jnp.pi + theta
    deviation = gamma - gamma_bar
    alpha = deviation / (psi_sum / 3.0)
    kb = bend_stiffness(bmat, alpha, beta)
    coef = kb * (rest_len / psi_sum) * jnp.sin(0.5 * deviation)

    u2 = le * n1 * inv_n1
    u3 = le * n2 * inv_n2
    u0 = jnp.dot(x2 - x1, eh) * n1 * inv_n1 + jnp.dot(x3 - x1, eh) * n2 * inv_n2
    u1 = -jnp.dot(x2 - x0, eh) * n1 * inv_n1 - jnp.dot(x3 - x0, eh) * n2 * inv_n2
    return coef * jnp.stack([u0, u1, u2, u3])


# ---------------------------------------------------------------------------
# batched kernels (vmapped + jitted); numpy in, numpy out

def _with_jac(force_fn):
    def inner(x, *rest):
        jac, f = jax.jacfwd(lambda xx: (force_fn(xx, *rest),) * 2,
                            has_aux=True)(x)
        return f, jac.reshape(x.size, x.size)
    return inner


_stretch_fj = jax.jit(jax.vmap(_with_jac(stretch_force)))
_bend_fj = jax.jit(jax.vmap(_with_jac(bend_force)))


def _seg_scalar(force_fn):
    """Backward kernel: gradients of h z.f + h^2 z.J w for one element.

    z is the transposed-solve vector restricted to the element and w the
    post-step velocity; the returned gradients are exactly the element's
    contribution to dL/dx_prev and dL/d(stiffness matrix) of one implicit
    step (force path plus Jacobian path).
    """
    def seg(x, mat, z, w, h, *rest):
        def scalar(xx, mm):
            f = force_fn(xx, mm, *rest)
            jac = jax.jacfwd(force_fn)(xx, mm, *rest)
            jw = jnp.tensordot(jac, w, axes=((2, 3), (0, 1)))
            return h * jnp.vdot(z, f) + h * h * jnp.vdot(z, jw)
        return jax.grad(scalar, argnums=(0, 1))(x, mat)
    return seg


_stretch_seg = jax.jit(jax.vmap(_seg_scalar(stretch_force),
                                in_axes=(0, 0, 0, 0, None, 0, 0)))
_bend_seg = jax.jit(jax.vmap(_seg_scalar(bend_force),
                             in_axes=(0, 0, 0, 0, None, 0, 0, 0, 0)))


def stretch_force_jacobian(x_faces, cmats, dm_inv, areas):
    """All face forces (F, 3, 3) and local Jacobians (F, 9, 9)."""
    f, jac = _stretch_fj(jnp.asarray(x_faces), jnp.asarray(cmats),
                         jnp.asarray(dm_inv), jnp.asarray(areas))
    return np.asarray(f), np.asarray(jac)


def bend_force_jacobian(x_hinges, bmats, betas, rest_lens, psi_sums, gamma_bars):
    """All hinge forces (H, 4, 3) and local Jacobians (H, 12, 12)."""
    f, jac = _bend_fj(jnp.asarray(x_hinges), jnp.asarray(bmats),
                      jnp.asarray(betas), jnp.asarray(rest_lens),
                      jnp.asarray(psi_sums), jnp.asarray(gamma_bars))
    return np.asarray(f), np.asarray(jac)


def stretch_backward(x_faces, cmats, dm_inv, areas, z, w, h):
    """Per-face (dL/dx_prev, dL/dC) contributions of one implicit step."""
    gx, gc = _stretch_seg(jnp.asarray(x_faces), jnp.asarray(cmats),
                          jnp.asarray(z), jnp.asarray(w), jnp.asarray(h),
                          jnp.asarray(dm_inv), jnp.asarray(areas))
    return np.asarray(gx), np.asarray(gc)


def bend_backward(x_hinges, bmats, betas, rest_lens, psi_sums, gamma_bars, z, w, h):
    """Per-hinge (dL/dx_prev, dL/dB) contributions of one implicit step."""
    gx, gb = _bend_seg(jnp.asarray(x_hinges), jnp.asarray(bmats),
                       jnp.asarray(z), jnp.asarray(w), jnp.asarray(h),
                       jnp.asarray(betas), jnp.asarray(rest_lens),
                       jnp.asarray(psi_sums), jnp.asarray(gamma_bars))
    return np.asarray(gx), np.asarray(gb)


# ---------------------------------------------------------------------------
# numpy-side strain inspection (independent eigendecomposition route)

@dataclass(frozen=True)
class StrainDescriptor:
    eps_uu: float
    eps_vv: float
    eps_uv: float
    lam_max: float
    lam_min: float
    phi: float  # signed principal direction, (-pi/2, pi/2]


def face_strain(xf, dm_inv) -> StrainDescriptor:
    """Strain of one deformed face, via a numpy eigendecomposition."""
    xf = np.asarray(xf, dtype=np.float64)
    d = np.stack([xf[1] - xf[0], xf[2] - xf[0]], axis=1)
    f = d @ np.asarray(dm_inv)
    g = f.T @ f
    eps = np.array([0.5 * (g[0, 0] - 1.0), 0.5 * (g[1, 1] - 1.0), 0.5 * g[0, 1]])
    m = np.array([[2 * eps[0], 2 * eps[2]], [2 * eps[2], 2 * eps[1]]])
    evals, evecs = np.linalg.eigh(m)
    scale = max(1.0, abs(evals[0]), abs(evals[1]))
    if evals[1] - evals[0] <= 1e-14 * scale:
        phi = 0.0
    else:
        v = evecs[:, 1]
        phi = np.arctan2(v[1], v[0])
        if phi <= -np.pi / 2:
            phi += np.pi
        elif phi > np.pi / 2:
            phi -= np.pi
    lam = np.sqrt(np.maximum(evals + 1.0, 0.0)) - 1.0
    return StrainDescriptor(eps_uu=eps[0], eps_vv=eps[1], eps_uv=eps[2],
                            lam_max=lam[1], lam_min=lam[0], phi=float(phi))


def reconstruct_strain_matrix(desc: StrainDescriptor) -> np.ndarray:
    """2E rebuilt from (lam_max, lam_min, phi); inverse of the eigen route."""
    emax = (desc.lam_max + 1.0) ** 2 - 1.0
    emin = (desc.lam_min + 1.0) ** 2 - 1.0
    c, s = np.cos(desc.phi), np.sin(desc.phi)
    rot = np.array([[c, -s], [s, c]])
    return rot @ np.diag([emax, emin]) @ rot.T
