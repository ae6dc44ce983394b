"""Differentiable top-down soft silhouette rasterizer.

Orthographic view down -z. Per pixel p the coverage is

    I(p) = 1 - prod_f (1 - s(d_f(p) / sigma))

where d_f is the signed 2D Euclidean distance (in pixels, positive inside)
from the pixel center to face f's projection and s is the logistic. The
product is accumulated in log space; only pixels inside a per-face square
patch receive a face's term, which truncates tail contributions below
~softplus(-16) per face.

All in-plane geometry is computed from pixel-center-minus-vertex vectors in
a centered, world-aligned pixel frame (origin at the image center, y up).
Rotating the mesh by 90 degrees negates/swaps those vectors exactly in
floating point, and the patch bounds are integer-symmetric, so the rendered
image permutes exactly under quarter-turn rotations.

Pixel (0, 0) is the top-left corner; columns increase with world +x, rows
with world -y.
"""

from dataclasses import dataclass
import json

import numpy as np
from PIL import Image

PATCH_SOFT_REACH = 16.0   # patch padding in units of sigma
_DEGENERATE = 1e-12


class RenderError(ValueError):
    """Bad camera, mesh, or image-file input."""


@dataclass(frozen=True)
class CameraSpec:
    """Orthographic square window, side 2*half_width meters, L x L pixels."""

    center: tuple = (0.0, 0.0)
    half_width: float = 0.18
    resolution: int = 256

    def __post_init__(self):
        if self.half_width <= 0:
            raise RenderError("half_width must be positive")
        if self.resolution < 2:
            raise RenderError("resolution must be at least 2")

    @property
    def pixels_per_meter(self) -> float:
        return self.resolution / (2.0 * self.half_width)


@dataclass(frozen=True)
class SilhouetteImage:
    pixels: np.ndarray   # (L, L) float64 coverage in [0, 1]
    camera: CameraSpec


def camera_metadata(camera: CameraSpec) -> dict:
    """World-to-image mapping in a serializable form."""
    ppm = camera.pixels_per_meter
    mid = (camera.resolution - 1) / 2.0
    return {
        "view": "orthographic, looking along -z",
        "center_m": [camera.center[0], camera.center[1]],
        "half_width_m": camera.half_width,
        "resolution": camera.resolution,
        "pixels_per_meter": ppm,
        "origin": "pixel (0,0) top-left",
        "col_of_x": f"col = (x - {camera.center[0]}) * {ppm} + {mid}",
        "row_of_y": f"row = {mid} - (y - {camera.center[1]}) * {ppm}",
    }


def _project(x: np.ndarray, camera: CameraSpec):
    """Vertex coordinates in the centered pixel frame (y up)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise RenderError("positions must be (V, 3)")
    s = camera.pixels_per_meter
    return (x[:, 0] - camera.center[0]) * s, (x[:, 1] - camera.center[1]) * s


def _face_patches(vx, vy, faces, pad: int, resolution: int):
    """Integer pixel patches per face, equivariant under quarter turns.

    Patch centers are rounded face centroids and half-extents are padded
    vertex reaches, both computed from quantities that negate/swap exactly
    when the mesh rotates by 90 degrees; the returned inclusive index
    ranges then permute exactly as well.
    """
    fx, fy = vx[faces], vy[faces]                      # (F, 3)
    cx = (fx[:, 0] + fx[:, 1] + fx[:, 2]) / 3.0
    cy = (fy[:, 0] + fy[:, 1] + fy[:, 2]) / 3.0
    reach = np.maximum(np.abs(fx - cx[:, None]).max(axis=1),
                       np.abs(fy - cy[:, None]).max(axis=1))
    icx = np.round(cx).astype(np.int64)
    icy = np.round(cy).astype(np.int64)
    ih = np.ceil(reach).astype(np.int64) + pad + 1
    lo_off = (resolution - 1) // 2
    hi_off = resolution // 2
    c_lo = np.clip(icx + lo_off - ih, 0, resolution - 1)
    c_hi = np.clip(icx + hi_off + ih, 0, resolution - 1)
    r_lo = np.clip(-icy + lo_off - ih, 0, resolution - 1)
    r_hi = np.clip(-icy + hi_off + ih, 0, resolution - 1)
    keep = ((icx + hi_off + ih >= 0) & (icx + lo_off - ih <= resolution - 1)
            & (-icy + hi_off + ih >= 0) & (-icy + lo_off - ih <= resolution - 1))
    return c_lo, c_hi, r_lo, r_hi, keep


def _pair_lists(c_lo, c_hi, r_lo, r_hi, face_ids):
    """Flatten patches into (face, row, col) triples, face-major then
    row-major, so per-pixel accumulation order is the face order."""
    wc = c_hi - c_lo + 1
    wr = r_hi - r_lo + 1
    counts = wc * wr
    total = int(counts.sum())
    if total == 0:
        return (np.zeros(0, np.int64),) * 3
    fi = np.repeat(np.arange(len(face_ids)), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    k = np.arange(total) - np.repeat(starts, counts)
    rows = r_lo[fi] + k // wc[fi]
    cols = c_lo[fi] + k % wc[fi]
    return face_ids[fi], rows, cols


def _pair_geometry(vx, vy, faces, fidx, rows, cols, mid):
    """Signed distance (pixels) and per-edge data for each (face, pixel)."""
    px = cols - mid
    py = mid - rows
    ux = px[:, None] - vx[faces[fidx]]                 # (N, 3)
    uy = py[:, None] - vy[faces[fidx]]

    cross = np.empty_like(ux)
    for k in range(3):
        j = (k + 1) % 3
        cross[:, k] = ux[:, k] * uy[:, j] - uy[:, k] * ux[:, j]
    inside = np.all(cross >= 0, axis=1) | np.all(cross <= 0, axis=1)

    # edge k joins local vertices k and k+1; m = p - nearest point
    t_par = np.empty_like(ux)
    mx = np.empty_like(ux)
    my = np.empty_like(ux)
    dist = np.empty_like(ux)
    for k in range(3):
        j = (k + 1) % 3
        ex = ux[:, k] - ux[:, j]
        ey = uy[:, k] - uy[:, j]
        ee = ex * ex + ey * ey
        t = np.clip((ux[:, k] * ex + uy[:, k] * ey)
                    / np.where(ee < _DEGENERATE, 1.0, ee), 0.0, 1.0)
        t = np.where(ee < _DEGENERATE, 0.0, t)
        t_par[:, k] = t
        mx[:, k] = (1.0 - t) * ux[:, k] + t * ux[:, j]
        my[:, k] = (1.0 - t) * uy[:, k] + t * uy[:, j]
        dist[:, k] = np.sqrt(mx[:, k] ** 2 + my[:, k] ** 2)

    near = np.minimum(np.minimum(dist[:, 0], dist[:, 1]), dist[:, 2])
    signed = np.where(inside, near, -near)
    return signed, inside, dist, t_par, mx, my, ux, uy


def _chunks(fidx, rows, cols, limit=2_000_000):
    for start in range(0, len(fidx), limit):
        sl = slice(start, start + limit)
        yield fidx[sl], rows[sl], cols[sl]


def _validate_faces(faces, n_vertices):
    faces = np.asarray(faces, dtype=np.int64)
    if faces.size == 0:
        return faces.reshape(0, 3)
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise RenderError("faces must be (F, 3)")
    if faces.min() < 0 or faces.max() >= n_vertices:
        raise RenderError("face index out of range")
    return faces


def render_silhouette(x, faces, camera: CameraSpec = CameraSpec(),
                      sharpness: float = 1.0) -> SilhouetteImage:
    """Soft coverage image of the projected mesh; smooth in x."""
    if sharpness <= 0:
        raise RenderError("sharpness must be positive")
    vx, vy = _project(x, camera)
    faces = _validate_faces(faces, len(vx))
    L = camera.resolution
    mid = (L - 1) / 2.0
    log_surv = np.zeros(L * L)
    pad = int(np.ceil(PATCH_SOFT_REACH * sharpness))
    c_lo, c_hi, r_lo, r_hi, keep = _face_patches(vx, vy, faces, pad, L)
    ids = np.flatnonzero(keep)
    fidx, rows, cols = _pair_lists(c_lo[ids], c_hi[ids], r_lo[ids],
                                   r_hi[ids], ids)
    for fi, rr, cc in _chunks(fidx, rows, cols):
        signed, *_ = _pair_geometry(vx, vy, faces, fi, rr, cc, mid)
        np.add.at(log_surv, rr * L + cc,
                  -np.logaddexp(0.0, signed / sharpness))
    return SilhouetteImage(pixels=-np.expm1(log_surv).reshape(L, L),
                           camera=camera)


def render_backward(x, faces, camera: CameraSpec, g_image,
                    sharpness: float = 1.0) -> np.ndarray:
    """Pull an image-space cotangent back to vertex positions.

    Recomputes the forward pass, then routes each pixel's gradient through
    the nearest-edge endpoints of its signed distances. The view axis sees
    no depth, so the z column is zero.
    """
    if sharpness <= 0:
        raise RenderError("sharpness must be positive")
    vx, vy = _project(x, camera)
    faces = _validate_faces(faces, len(vx))
    L = camera.resolution
    mid = (L - 1) / 2.0
    g_image = np.asarray(g_image, dtype=np.float64)
    if g_image.shape != (L, L):
        raise RenderError(f"image gradient must be {(L, L)}")

    pad = int(np.ceil(PATCH_SOFT_REACH * sharpness))
    c_lo, c_hi, r_lo, r_hi, keep = _face_patches(vx, vy, faces, pad, L)
    ids = np.flatnonzero(keep)
    fidx, rows, cols = _pair_lists(c_lo[ids], c_hi[ids], r_lo[ids],
                                   r_hi[ids], ids)

    log_surv = np.zeros(L * L)
    for fi, rr, cc in _chunks(fidx, rows, cols):
        signed, *_ = _pair_geometry(vx, vy, faces, fi, rr, cc, mid)
        np.add.at(log_surv, rr * L + cc,
                  -np.logaddexp(0.0, signed / sharpness))

    # dI/dG = -exp(G); dG/dt_f = -sigmoid(t_f)  =>  dL/dt_f = gI e^G s(t_f)
    g_log_surv = -g_image.ravel() * np.exp(log_surv)
    gvx = np.zeros_like(vx)
    gvy = np.zeros_like(vy)
    for fi, rr, cc in _chunks(fidx, rows, cols):
        signed, inside, dist, t_par, mx, my, ux, uy = _pair_geometry(
            vx, vy, faces, fi, rr, cc, mid)
        t = signed / sharpness
        sig = np.exp(-np.logaddexp(0.0, -t))
        g_t = -g_log_surv[rr * L + cc] * sig
        g_near = np.where(inside, g_t, -g_t) / sharpness

        am = np.argmin(dist, axis=1)
        take = lambda a: np.take_along_axis(a, am[:, None], axis=1)[:, 0]
        d_am = take(dist)
        degen = d_am < _DEGENERATE
        inv = np.where(degen, 0.0, 1.0 / np.where(degen, 1.0, d_am))
        hx = take(mx) * inv
        hy = take(my) * inv
        if np.any(degen):
            # pixel center exactly on the edge: the smooth-case limit of
            # sign * m-hat is the inward edge normal, not zero
            idx = np.flatnonzero(degen)
            k = am[idx]
            j = (k + 1) % 3
            o = (k + 2) % 3
            exd = ux[idx, k] - ux[idx, j]
            eyd = uy[idx, k] - uy[idx, j]
            el = np.hypot(exd, eyd)
            ok = el > _DEGENERATE
            el = np.where(ok, el, 1.0)
            nx, ny = -eyd / el, exd / el
            toward = (nx * (ux[idx, k] - ux[idx, o])
                      + ny * (uy[idx, k] - uy[idx, o]))
            orient = np.where(ok, np.sign(toward), 0.0)
            # g_near already carries the inside sign; cancel it so the
            # product is the inward normal no matter how the roundoff in
            # the cross products classified this pixel
            sgn = np.where(inside[idx], 1.0, -1.0)
            hx[idx] = nx * orient * sgn
            hy[idx] = ny * orient * sgn
        tp = take(t_par)
        va = faces[fi, am]
        vb = faces[fi, (am + 1) % 3]
        # m = p - ((1-t) a + t b) in pixel units; d|m| pulls back through -u
        ga = -(1.0 - tp) * g_near
        gb = -tp * g_near
        np.add.at(gvx, va, ga * hx)
        np.add.at(gvy, va, ga * hy)
        np.add.at(gvx, vb, gb * hx)
        np.add.at(gvy, vb, gb * hy)

    out = np.zeros((len(vx), 3))
    s = camera.pixels_per_meter
    out[:, 0] = gvx * s
    out[:, 1] = gvy * s
    return out


def render_binary(x, faces, camera: CameraSpec = CameraSpec()) -> SilhouetteImage:
    """Hard silhouette: 1 where the pixel center lies in some projected face."""
    vx, vy = _project(x, camera)
    faces = _validate_faces(faces, len(vx))
    L = camera.resolution
    mid = (L - 1) / 2.0
    img = np.zeros(L * L)
    c_lo, c_hi, r_lo, r_hi, keep = _face_patches(vx, vy, faces, 0, L)
    ids = np.flatnonzero(keep)
    fidx, rows, cols = _pair_lists(c_lo[ids], c_hi[ids], r_lo[ids],
                                   r_hi[ids], ids)
    for fi, rr, cc in _chunks(fidx, rows, cols):
        _, inside, *_ = _pair_geometry(vx, vy, faces, fi, rr, cc, mid)
        np.maximum.at(img, rr * L + cc, inside.astype(np.float64))
    return SilhouetteImage(pixels=img.reshape(L, L), camera=camera)


# ---------------------------------------------------------------------------
# image files

def _as_pixels(image) -> np.ndarray:
    arr = image.pixels if isinstance(image, SilhouetteImage) else image
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise RenderError("image must be a 2D array")
    return arr


def save_image(path, image) -> None:
    """8-bit grayscale PNG or binary PGM (P5), chosen by extension."""
    arr = _as_pixels(image)
    quant = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = str(path)
    if path.endswith(".png"):
        Image.fromarray(quant, mode="L").save(path)
    elif path.endswith(".pgm"):
        with open(path, "wb") as fh:
            fh.write(f"P5\n{quant.shape[1]} {quant.shape[0]}\n255\n".encode())
            fh.write(quant.tobytes())
    else:
        raise RenderError(f"unsupported image extension: {path}")


def load_image(path) -> np.ndarray:
    """Grayscale image as float64 in [0, 1]; color input is rejected."""
    path = str(path)
    if path.endswith(".pgm"):
        return _load_pgm(path)
    if path.endswith(".png"):
        with Image.open(path) as im:
            if im.mode not in ("L", "1", "I", "I;16"):
                raise RenderError(f"not a grayscale image: mode {im.mode}")
            arr = np.asarray(im.convert("L"), dtype=np.float64)
        return arr / 255.0
    raise RenderError(f"unsupported image extension: {path}")


def _load_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise RenderError("truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise RenderError("only binary PGM (P5) is supported")
    width, height, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 256:
        raise RenderError(f"unsupported PGM maxval {maxval}")
    body = data[pos : pos + width * height]
    if len(body) != width * height:
        raise RenderError("truncated PGM pixel data")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(height, width)
    return arr.astype(np.float64) / float(maxval)


def save_metadata(path, camera: CameraSpec, extra: dict | None = None) -> None:
    meta = camera_metadata(camera)
    if extra:
        meta.update(extra)
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
