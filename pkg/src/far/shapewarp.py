"""Landmark shapes, the linear shape model and the piecewise-affine warp.

Conventions
-----------
* A shape is a ``(v, 2)`` float array of ``(x, y)`` pixel coordinates, with
  ``x`` the column and ``y`` the row. Pixel centres sit on integer coords.
* A reference frame is ``(m, n)`` = (rows, cols). Textures are flattened
  row-major, so pixel ``(row, col)`` has index ``row * n + col``.
* Shape vectors are interleaved ``(x0, y0, x1, y1, ...)``.
* Warp parameters are ``p = (scale, rotation, tx, ty, deformation...)``
  against an orthonormal basis, so the model is exactly linear:
  ``shape(p) = mean_shape + reshape(basis @ p)``.
"""
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.spatial import Delaunay, QhullError

from .numlin import orthonormalize, thin_svd

N_SIMILARITY = 4
FRAME_FILL = 0.9


def as_shape(points, name="shape"):
    s = np.asarray(points, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != 2:
        raise ValueError(f"{name} must have shape (v, 2), got {s.shape}")
    if s.shape[0] < 3:
        raise ValueError(f"{name} needs at least 3 points, got {s.shape[0]}")
    if not np.all(np.isfinite(s)):
        raise ValueError(f"{name} has non-finite coordinates")
    return s


@dataclass(frozen=True, eq=False)
class ShapeModel:
    """Mean shape in the reference frame plus an orthonormal shape basis.

    ``basis`` is ``(2v, 4 + n_s)``; the first four columns are the
    similarity directions (scale, rotation, x translation, y translation).
    """

    mean_shape: np.ndarray
    basis: np.ndarray
    frame: tuple

    @property
    def n_points(self):
        return self.mean_shape.shape[0]

    @property
    def n_params(self):
        return self.basis.shape[1]

    @property
    def n_deformation(self):
        return self.n_params - N_SIMILARITY


@dataclass(frozen=True, eq=False)
class Triangulation:
    triangles: np.ndarray

    def __len__(self):
        return len(self.triangles)


@dataclass(frozen=True, eq=False)
class PixelMap:
    """Assignment of reference-frame pixels to mean-shape triangles.

    ``tri_index`` is -1 outside the hull; ``bary`` holds the barycentric
    coordinates of each pixel centre inside its triangle.
    """

    frame: tuple
    tri_index: np.ndarray
    bary: np.ndarray

    @property
    def inside(self):
        return self.tri_index >= 0


@dataclass(frozen=True, eq=False)
class WarpField:
    """Source-image coordinates of every reference pixel (NaN where masked)."""

    coords: np.ndarray
    mask: np.ndarray = field(repr=False)


# -- shape model -----------------------------------------------------------


def _similarity_align(shape, target):
    """Least-squares similarity transform of ``shape`` onto ``target``."""
    mu_s = shape.mean(axis=0)
    mu_t = target.mean(axis=0)
    a = shape - mu_s
    b = target - mu_t
    denom = np.sum(a * a)
    if denom == 0:
        raise ValueError("cannot align a shape whose points all coincide")
    # optimal scaled rotation [[c, -s], [s, c]]
    c = np.sum(a * b) / denom
    s = np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]) / denom
    rot = np.array([[c, -s], [s, c]])
    return a @ rot.T + mu_t


def _normalise(shape):
    c = shape - shape.mean(axis=0)
    return c / np.linalg.norm(c)


def generalized_procrustes(shapes, n_iter=20):
    """Return (aligned shapes, mean) with translation, rotation and scale removed."""
    mean = _normalise(shapes[0])
    aligned = shapes
    for _ in range(n_iter):
        aligned = np.stack([_similarity_align(s, mean) for s in shapes])
        new_mean = _similarity_align(_normalise(aligned.mean(axis=0)), mean)
        new_mean = _normalise(new_mean)
        if np.max(np.abs(new_mean - mean)) < 1e-14:
            mean = new_mean
            break
        mean = new_mean
    return aligned, mean


def place_in_frame(shape, frame, fill=FRAME_FILL):
    """Scale and translate ``shape`` so its bounding box fills the central
    ``fill`` fraction of ``frame``."""
    m, n = frame
    lo = shape.min(axis=0)
    hi = shape.max(axis=0)
    extent = hi - lo
    scale = fill * min((n - 1) / extent[0], (m - 1) / extent[1])
    centre = np.array([(n - 1) / 2.0, (m - 1) / 2.0])
    return (shape - (lo + hi) / 2.0) * scale + centre


def similarity_basis(mean_shape):
    c = mean_shape - mean_shape.mean(axis=0)
    v = len(c)
    cols = [
        c.ravel(),
        np.column_stack([-c[:, 1], c[:, 0]]).ravel(),
        np.tile([1.0, 0.0], v),
        np.tile([0.0, 1.0], v),
    ]
    return np.column_stack([col / np.linalg.norm(col) for col in cols])


def build_shape_model(shapes, n_s=None, frame=(40, 40), variance=0.95):
    """Train a similarity + PCA-deformation shape model.

    Parameters
    ----------
    shapes : sequence of (v, 2) arrays
        Training landmark configurations, all with the same ``v``.
    n_s : int, optional
        Number of deformation components. When ``None`` the smallest count
        retaining ``variance`` of the non-rigid variance is used. Truncated
        to the numerical rank of the deformation residuals.
    frame : (m, n)
        Reference frame size; the mean shape fills its central 90%.
    """
    shapes = [as_shape(s, f"shapes[{i}]") for i, s in enumerate(shapes)]
    if len(shapes) < 2:
        raise ValueError(f"need at least 2 training shapes, got {len(shapes)}")
    v = shapes[0].shape[0]
    for i, s in enumerate(shapes):
        if s.shape[0] != v:
            raise ValueError(
                f"inconsistent point counts: shapes[0] has {v}, shapes[{i}] has {s.shape[0]}"
            )
    shapes = np.stack(shapes)
    _, unit_mean = generalized_procrustes(shapes)
    mean_shape = place_in_frame(unit_mean, frame)

    sim = similarity_basis(mean_shape)
    residuals = np.stack([(_similarity_align(s, mean_shape) - mean_shape).ravel() for s in shapes], axis=1)
    residuals -= sim @ (sim.T @ residuals)
    residuals -= residuals.mean(axis=1, keepdims=True)

    factors = thin_svd(residuals)
    s = factors.singular_values
    tol = max(s[0] if s.size else 0.0, 1.0) * max(residuals.shape) * 1e-12
    rank = int(np.count_nonzero(s > tol))
    if n_s is None:
        if rank == 0:
            n_s = 0
        else:
            energy = np.cumsum(s[:rank] ** 2) / np.sum(s[:rank] ** 2)
            n_s = int(np.searchsorted(energy, variance - 1e-12) + 1)
    elif n_s > rank:
        warnings.warn(f"n_s={n_s} exceeds deformation rank {rank}; truncating", stacklevel=2)
    n_s = min(int(n_s), rank)

    basis = orthonormalize(np.column_stack([sim, factors.left[:, :n_s]]))
    return ShapeModel(mean_shape=mean_shape, basis=basis, frame=tuple(int(d) for d in frame))


def shape_from_params(model, p):
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (model.n_params,):
        raise ValueError(f"expected {model.n_params} warp parameters, got shape {p.shape}")
    return model.mean_shape + (model.basis @ p).reshape(-1, 2)


def params_from_shape(model, shape):
    """Least-squares projection of a shape onto the model."""
    shape = as_shape(shape)
    if shape.shape[0] != model.n_points:
        raise ValueError(f"model has {model.n_points} points, shape has {shape.shape[0]}")
    return model.basis.T @ (shape - model.mean_shape).ravel()


# -- triangulation and rasterisation ----------------------------------------


def _tri_area(pts, tris):
    a, b, c = pts[tris[:, 0]], pts[tris[:, 1]], pts[tris[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def delaunay(mean_shape):
    """Delaunay triangulation of the mean shape, counter-clockwise and sorted."""
    pts = as_shape(mean_shape, "mean_shape")
    if len(np.unique(pts, axis=0)) != len(pts):
        raise ValueError("mean shape has duplicated points")
    try:
        tris = Delaunay(pts).simplices.astype(np.int64)
    except QhullError as exc:
        raise ValueError(f"degenerate point configuration: {exc.args[0].splitlines()[0]}") from None
    area = _tri_area(pts, tris)
    flip = area < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    area = np.abs(area)
    scale = np.ptp(pts, axis=0).prod()
    keep = area > 1e-12 * scale
    if not np.any(keep):
        raise ValueError("degenerate point configuration: all triangles have zero area")
    tris = tris[keep]
    # canonical ordering so the result does not depend on qhull internals
    rolled = np.array([np.roll(t, -int(np.argmin(t))) for t in tris])
    order = np.lexsort(rolled.T[::-1])
    return Triangulation(rolled[order])


def rasterize(points, triangles, grid_shape, tol=1e-9):
    """Assign pixel centres of a ``grid_shape`` grid to triangles.

    Each pixel goes to the lowest-index triangle containing it. Returns
    ``(tri_index, bary)`` flattened row-major.
    """
    rows, cols = grid_shape
    tri_index = np.full(rows * cols, -1, dtype=np.int64)
    bary = np.zeros((rows * cols, 3))
    for t, (i0, i1, i2) in enumerate(triangles):
        a, b, c = points[i0], points[i1], points[i2]
        lo = np.floor(np.minimum(np.minimum(a, b), c) - tol).astype(int)
        hi = np.ceil(np.maximum(np.maximum(a, b), c) + tol).astype(int)
        x0, y0 = max(lo[0], 0), max(lo[1], 0)
        x1, y1 = min(hi[0], cols - 1), min(hi[1], rows - 1)
        if x0 > x1 or y0 > y1:
            continue
        ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
        xs = xs.ravel().astype(np.float64)
        ys = ys.ravel().astype(np.float64)
        det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1])
        l0 = ((b[1] - c[1]) * (xs - c[0]) + (c[0] - b[0]) * (ys - c[1])) / det
        l1 = ((c[1] - a[1]) * (xs - c[0]) + (a[0] - c[0]) * (ys - c[1])) / det
        l2 = 1.0 - l0 - l1
        lam = np.column_stack([l0, l1, l2])
        hit = np.all(lam >= -tol, axis=1)
        idx = ys[hit].astype(np.int64) * cols + xs[hit].astype(np.int64)
        free = tri_index[idx] < 0
        idx = idx[free]
        lam = np.clip(lam[hit][free], 0.0, 1.0)
        lam /= lam.sum(axis=1, keepdims=True)
        tri_index[idx] = t
        bary[idx] = lam
    return tri_index, bary


def pixel_map(model, tri):
    tri_index, bary = rasterize(model.mean_shape, tri.triangles, model.frame)
    return PixelMap(frame=model.frame, tri_index=tri_index, bary=bary)


# -- warping -----------------------------------------------------------------


def _barycentric_combine(pmap, tri, values):
    """Interpolate per-vertex ``values`` (v, ...) at every inside pixel."""
    inside = pmap.inside
    verts = tri.triangles[pmap.tri_index[inside]]
    return np.einsum("pk,pk...->p...", pmap.bary[inside], values[verts])


def warp_field(src_shape, model, tri, image_shape, pmap=None):
    """Evaluate the piecewise-affine warp at every reference pixel."""
    src_shape = as_shape(src_shape, "src_shape")
    if src_shape.shape[0] != model.n_points:
        raise ValueError(f"model has {model.n_points} points, src_shape has {src_shape.shape[0]}")
    pmap = pmap if pmap is not None else pixel_map(model, tri)
    m, n = model.frame
    coords = np.full((m * n, 2), np.nan)
    inside = pmap.inside
    src = _barycentric_combine(pmap, tri, src_shape)
    h, w = image_shape[:2]
    ok = (src[:, 0] >= 0) & (src[:, 0] <= w - 1) & (src[:, 1] >= 0) & (src[:, 1] <= h - 1)
    mask = np.zeros(m * n, dtype=bool)
    idx = np.flatnonzero(inside)[ok]
    mask[idx] = True
    coords[idx] = src[ok]
    return WarpField(coords=coords, mask=mask)


def bilinear(image, xs, ys, with_gradient=False):
    """Bilinear interpolation at in-bounds points.

    With ``with_gradient`` the exact partial derivatives of the interpolant
    are returned too; they are piecewise bilinear, so on each cell they agree
    with central differences of the sampled values.
    """
    h, w = image.shape
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    i00 = image[y0, x0]
    i01 = image[y0, x1]
    i10 = image[y1, x0]
    i11 = image[y1, x1]
    val = (1 - fy) * ((1 - fx) * i00 + fx * i01) + fy * ((1 - fx) * i10 + fx * i11)
    if not with_gradient:
        return val
    gx = (1 - fy) * (i01 - i00) + fy * (i11 - i10)
    gy = (1 - fx) * (i10 - i00) + fx * (i11 - i01)
    return val, gx, gy


def normalize_intensity(image):
    """Min-max scaling to [0, 1]; a constant image maps to zeros."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi == lo:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


def _as_image(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    return image


def warp_texture(image, src_shape, model, tri, pmap=None, normalize=True):
    """Sample ``image`` into the reference frame.

    Returns ``(x, mask)``: the flattened texture (zeros where masked) and
    the validity mask. Pixels outside the mean-shape hull or whose source
    point falls outside the image are masked.
    """
    image = _as_image(image)
    if normalize:
        image = normalize_intensity(image)
    wf = warp_field(src_shape, model, tri, image.shape, pmap)
    x = np.zeros(len(wf.mask))
    pts = wf.coords[wf.mask]
    x[wf.mask] = bilinear(image, pts[:, 0], pts[:, 1])
    return x, wf.mask


def image_gradients(image):
    """Central differences with a replicated border, in intensity per pixel."""
    image = _as_image(image)
    padded = np.pad(image, 1, mode="edge")
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    return gx, gy


def warp_jacobian(model, tri, pmap=None):
    """``dW/dp`` at every reference pixel, shape ``(f, 2, n_params)``.

    The warp is linear in ``p`` with fixed barycentric weights, so this does
    not depend on ``p``. Rows outside the hull are zero.
    """
    pmap = pmap if pmap is not None else pixel_map(model, tri)
    m, n = model.frame
    per_vertex = model.basis.reshape(model.n_points, 2, model.n_params)
    dwdp = np.zeros((m * n, 2, model.n_params))
    dwdp[pmap.inside] = _barycentric_combine(pmap, tri, per_vertex)
    return dwdp


def steepest_descent_images(image, model, tri, p, pmap=None, dwdp=None, normalize=True):
    """Jacobian of the warped texture with respect to ``p`` (``f x n_params``).

    Column ``j`` is ``grad I(W(r; p)) . dW/dp_j`` per reference pixel, using
    the exact gradient of the bilinear interpolant at the warped location.
    Masked rows are zero.
    """
    image = _as_image(image)
    if normalize:
        image = normalize_intensity(image)
    pmap = pmap if pmap is not None else pixel_map(model, tri)
    dwdp = dwdp if dwdp is not None else warp_jacobian(model, tri, pmap)
    wf = warp_field(shape_from_params(model, p), model, tri, image.shape, pmap)
    pts = wf.coords[wf.mask]
    _, gx, gy = bilinear(image, pts[:, 0], pts[:, 1], with_gradient=True)
    jac = np.zeros((len(wf.mask), model.n_params))
    jac[wf.mask] = gx[:, None] * dwdp[wf.mask, 0, :] + gy[:, None] * dwdp[wf.mask, 1, :]
    return jac


def _affine_barycentric(points, tris, xs, ys):
    a, b, c = points[tris[:, 0]], points[tris[:, 1]], points[tris[:, 2]]
    det = (b[:, 1] - c[:, 1]) * (a[:, 0] - c[:, 0]) + (c[:, 0] - b[:, 0]) * (a[:, 1] - c[:, 1])
    l0 = ((b[:, 1] - c[:, 1]) * (xs - c[:, 0]) + (c[:, 0] - b[:, 0]) * (ys - c[:, 1])) / det
    l1 = ((c[:, 1] - a[:, 1]) * (xs - c[:, 0]) + (a[:, 0] - c[:, 0]) * (ys - c[:, 1])) / det
    return np.column_stack([l0, l1, 1.0 - l0 - l1])


def render_texture(texture, shape, model, tri, image_shape, texture_mask=None, context=2.0):
    """Inverse of :func:`warp_texture`: paint a reference-frame texture into
    an image at landmark positions ``shape``.

    Pixels up to ``context`` pixels outside the shape hull are filled by
    extending the affine map of the nearest triangle, the way a real face
    image continues past its outer landmarks. Everything else is zero.
    """
    texture = np.asarray(texture, dtype=np.float64).reshape(model.frame)
    if texture_mask is not None:
        # nearest-neighbour fill so bilinear taps at the mask edge see texture
        inside = np.asarray(texture_mask, dtype=bool).reshape(model.frame)
        if not inside.all():
            _, (ri, ci) = distance_transform_edt(~inside, return_indices=True)
            texture = texture[ri, ci]
    shape = as_shape(shape)
    h, w = image_shape[:2]
    tri_index, bary = rasterize(shape, tri.triangles, (h, w))
    inside = tri_index >= 0
    if context > 0 and inside.any() and not inside.all():
        dist, (ri, ci) = distance_transform_edt(~inside.reshape(h, w), return_indices=True)
        band = np.flatnonzero((dist.ravel() > 0) & (dist.ravel() <= context))
        nearest = tri_index[ri.ravel()[band] * w + ci.ravel()[band]]
        ys, xs = np.divmod(band, w)
        bary = bary.copy()
        bary[band] = _affine_barycentric(shape, tri.triangles[nearest], xs.astype(float), ys.astype(float))
        tri_index = tri_index.copy()
        tri_index[band] = nearest
    painted = tri_index >= 0
    verts = tri.triangles[tri_index[painted]]
    ref = np.einsum("pk,pkd->pd", bary[painted], model.mean_shape[verts])
    m, n = model.frame
    ref[:, 0] = np.clip(ref[:, 0], 0, n - 1)
    ref[:, 1] = np.clip(ref[:, 1], 0, m - 1)
    out = np.zeros(h * w)
    out[painted] = bilinear(texture, ref[:, 0], ref[:, 1])
    return out.reshape(h, w)
