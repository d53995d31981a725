"""Synthetic faces with known ground truth, plus brute-force oracles.

All randomness goes through ``numpy.random.default_rng(seed)`` (PCG64), so
every output is a pure function of its arguments.
"""
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .numlin import nuclear_norm
from .shapewarp import (
    build_shape_model,
    delaunay,
    params_from_shape,
    place_in_frame,
    rasterize,
    render_texture,
)
from .subspace import build_basis

# 32-point frontal face markup in unit coordinates (x right, y down).
_JAW = [(0.5 - 0.5 * np.cos(a), 0.35 + 0.65 * np.sin(a)) for a in np.linspace(0, np.pi, 9)]
_BROWS = [(0.15, 0.20), (0.27, 0.15), (0.40, 0.20), (0.60, 0.20), (0.73, 0.15), (0.85, 0.20)]
_EYES = [
    (0.15, 0.33), (0.27, 0.29), (0.40, 0.33), (0.27, 0.37),
    (0.60, 0.33), (0.73, 0.29), (0.85, 0.33), (0.73, 0.37),
]
_NOSE = [(0.50, 0.35), (0.50, 0.50), (0.42, 0.60), (0.58, 0.60), (0.50, 0.63)]
_MOUTH = [(0.33, 0.78), (0.50, 0.73), (0.67, 0.78), (0.50, 0.84)]
FACE_TEMPLATE = np.array(_JAW + _BROWS + _EYES + _NOSE + _MOUTH)
# outer eye corners, and everything except the jaw line
EYE_CORNERS = (15, 21)
INTERIOR = tuple(range(9, len(FACE_TEMPLATE)))


@dataclass
class SynthInstance:
    image: np.ndarray
    clean_image: np.ndarray
    gt_shape: np.ndarray
    init_shape: np.ndarray
    gt_params: np.ndarray
    gt_coeffs: np.ndarray
    gt_error_support: np.ndarray
    seed: int


@dataclass
class SynthModel:
    model: object
    tri: object
    basis: object
    train_images: list
    train_shapes: list


def template_shape(frame):
    return place_in_frame(FACE_TEMPLATE, frame)


def _deformation_modes(frame):
    """Three smooth displacement fields over the template (pixels per unit)."""
    u = FACE_TEMPLATE - 0.5
    scale = 0.9 * (min(frame) - 1)
    modes = [
        np.column_stack([u[:, 0] * (u[:, 1] < 0), np.zeros(len(u))]),  # upper-face width
        np.column_stack([np.zeros(len(u)), u[:, 1] * (u[:, 1] > 0)]),  # lower-face length
        np.column_stack([np.zeros(len(u)), u[:, 0] ** 2 - 0.1]),  # lateral droop
    ]
    return [scale * md for md in modes]


def train_shapes(seed, frame, count, deform=0.08, noise=0.05, jitter=1.0):
    """Frontal shapes: template + random smooth deformation modes + small
    per-point noise (pixels) + a small random similarity."""
    rng = np.random.default_rng(seed)
    base = template_shape(frame)
    modes = _deformation_modes(frame)
    centre = base.mean(axis=0)
    out = []
    for _ in range(count):
        s = base + sum(rng.normal(scale=deform) * md for md in modes)
        s = s + rng.normal(scale=noise, size=base.shape)
        ang = np.deg2rad(rng.normal(scale=jitter))
        scale = 1.0 + rng.normal(scale=0.01 * jitter)
        rot = scale * np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        s = (s - centre) @ rot.T + centre + rng.normal(scale=jitter, size=2)
        out.append(s)
    return out


def mean_pattern(frame):
    """Smooth bilaterally symmetric face-like pattern with values in [0.3, 0.7]."""
    m, n = frame
    yy, xx = np.mgrid[0:m, 0:n].astype(np.float64)
    shape = template_shape(frame)
    sigma = max(m, n) / 20.0

    def blob(cx, cy, sx, sy):
        return np.exp(-0.5 * (((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2))

    # forehead-to-chin shading plus eyes, brows, nose and mouth
    top, bottom = shape[:, 1].min(), shape[:, 1].max()
    pat = 0.62 - 0.12 * (yy - top) / max(bottom - top, 1.0)
    eye_l, eye_r = shape[15:19].mean(axis=0), shape[19:23].mean(axis=0)
    brow_l, brow_r = shape[9:12].mean(axis=0), shape[12:15].mean(axis=0)
    nose, mouth = shape[27], shape[28:32].mean(axis=0)
    pat = pat - 0.28 * (blob(*eye_l, 1.6 * sigma, sigma) + blob(*eye_r, 1.6 * sigma, sigma))
    pat = pat - 0.15 * (blob(*brow_l, 2.2 * sigma, 0.7 * sigma) + blob(*brow_r, 2.2 * sigma, 0.7 * sigma))
    pat = pat + 0.12 * blob(*nose, 0.9 * sigma, 2.5 * sigma)
    pat = pat - 0.25 * blob(*mouth, 2.6 * sigma, 0.9 * sigma)
    pat = 0.5 * (pat + pat[:, ::-1])
    lo, hi = pat.min(), pat.max()
    return 0.3 + 0.4 * (pat - lo) / (hi - lo)


def gen_textures(seed, frame, count, subspace_dim, amplitude=0.25):
    """Textures = symmetric mean pattern + band-limited random variation.

    The variation is a random combination of ``subspace_dim`` fixed smooth
    components with coefficient sum bounded by ``amplitude``, so values stay
    inside [0.05, 0.95] and the final clip to [0, 1] never binds.
    """
    if subspace_dim > count:
        raise ValueError(f"subspace_dim={subspace_dim} exceeds count={count}")
    rng = np.random.default_rng(seed)
    m, n = frame
    sigma = max(m, n) / 10.0
    comps = []
    for _ in range(subspace_dim):
        c = gaussian_filter(rng.standard_normal((m, n)), sigma, mode="reflect")
        comps.append(c / np.max(np.abs(c)))
    comps = np.array(comps).reshape(subspace_dim, -1)
    z = rng.uniform(-1.0, 1.0, size=(count, subspace_dim)) * (amplitude / max(subspace_dim, 1))
    base = mean_pattern(frame).ravel()
    tex = np.clip(base + z @ comps, 0.0, 1.0)
    return [t.reshape(m, n) for t in tex]


def symmetric_texture(seed, frame, subspace_dim=6):
    t = gen_textures(seed, frame, max(subspace_dim, 1), subspace_dim)[0]
    return 0.5 * (t + t[:, ::-1])


def make_model(seed=0, frame=(40, 40), n_train=60, k=20, subspace_dim=20, n_s=None):
    """Shape model, triangulation and appearance basis from synthetic
    frontal training data rendered at random frontal shapes."""
    pad = 4
    shapes = [s + pad for s in train_shapes(seed, frame, n_train)]
    model = build_shape_model(shapes, n_s=n_s, frame=frame)
    tri = delaunay(model.mean_shape)
    textures = gen_textures(seed + 1, frame, n_train, subspace_dim)
    full = np.ones(frame[0] * frame[1], dtype=bool)
    canvas = (frame[0] + 2 * pad, frame[1] + 2 * pad)
    images = [render_texture(t, s, model, tri, canvas, full) for t, s in zip(textures, shapes)]
    basis = build_basis(images, shapes, model, tri, k)
    return SynthModel(model=model, tri=tri, basis=basis, train_images=images, train_shapes=shapes)


def draw_coefficients(basis, rng, spread=0.15):
    """Coefficients of a plausible clean texture: the mean plus a random mix
    of basis directions of relative size ``spread``, scaled to peak at 1."""
    U = basis.u
    g = rng.standard_normal(U.shape[1])
    t = basis.mean + spread * np.linalg.norm(basis.mean) * (U @ g) / np.linalg.norm(g)
    c = U.T @ t
    if (U @ c)[basis.mask].min() < 0:
        c = U.T @ basis.mean
    return c / (U @ c)[basis.mask].max()


def spike_pixels(values, candidates, count, magnitude, rng, keep_range=True):
    """Add ``+-magnitude`` to ``count`` distinct entries chosen from
    ``candidates``. With ``keep_range`` the sign is chosen so the result stays
    in [0, 1] (random when both fit)."""
    candidates = np.asarray(candidates)
    if count > candidates.size:
        raise ValueError(f"cannot corrupt {count} of {candidates.size} candidate pixels")
    support = np.sort(rng.choice(candidates, size=count, replace=False))
    signs = rng.choice([-1.0, 1.0], size=count)
    out = values.copy()
    if keep_range:
        v = out[support]
        up_ok = v + magnitude <= 1.0
        down_ok = v - magnitude >= 0.0
        signs = np.where(up_ok & ~down_ok, 1.0, signs)
        signs = np.where(down_ok & ~up_ok, -1.0, signs)
    out[support] += signs * magnitude
    return out, support


def similarity_about_centroid(shape, rotation_deg, scale_pct, translation):
    centre = shape.mean(axis=0)
    ang = np.deg2rad(rotation_deg)
    s = 1.0 + scale_pct / 100.0
    rot = s * np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    return (shape - centre) @ rot.T + centre + np.asarray(translation, dtype=np.float64)


def gen_instance(
    basis,
    model,
    tri,
    seed,
    translation_px=0.0,
    rotation_deg=0.0,
    scale_pct=0.0,
    sparsity=0.0,
    spike_mag=0.5,
    margin=0,
    image_shape=None,
):
    """Render a clean in-span face under a known similarity perturbation and
    corrupt ``floor(sparsity * f)`` face pixels by ``+-spike_mag``.

    ``translation_px`` is either an exact ``(tx, ty)`` or a magnitude whose
    direction is drawn from the seed. ``margin`` pads the image around the
    reference frame; the initial shape is the mean shape offset by it.
    """
    if not 0 <= sparsity < 1:
        raise ValueError(f"sparsity must be in [0, 1), got {sparsity}")
    rng = np.random.default_rng(seed)
    m, n = model.frame
    if image_shape is None:
        image_shape = (m + 2 * margin, n + 2 * margin)
    c0 = draw_coefficients(basis, rng)
    clean_texture = basis.u @ c0
    if np.ndim(translation_px) == 0:
        ang = rng.uniform(0, 2 * np.pi)
        translation = float(translation_px) * np.array([np.cos(ang), np.sin(ang)])
    else:
        translation = np.asarray(translation_px, dtype=np.float64)
    init_shape = model.mean_shape + margin
    gt_shape = similarity_about_centroid(init_shape, rotation_deg, scale_pct, translation)
    clean = render_texture(clean_texture, gt_shape, model, tri, image_shape, basis.mask)

    count = int(np.floor(sparsity * m * n))
    face, _ = rasterize(gt_shape, tri.triangles, image_shape)
    candidates = np.flatnonzero(face >= 0)
    flat, support = spike_pixels(clean.ravel(), candidates, count, spike_mag, rng)
    return SynthInstance(
        image=flat.reshape(image_shape),
        clean_image=clean,
        gt_shape=gt_shape,
        init_shape=init_shape,
        gt_params=params_from_shape(model, gt_shape),
        gt_coeffs=c0,
        gt_error_support=support,
        seed=int(seed),
    )


# -- oracles -------------------------------------------------------------------


def sampling_oracle(objective, candidate, perturbations=10_000, radius=1e-3, seed=0, rtol=1e-12):
    """True iff ``objective(candidate)`` is no worse than at every one of
    ``perturbations`` random points on the sphere of ``radius`` around it.

    ``objective`` is called once with the candidate and once with a stacked
    array of shape ``(perturbations,) + candidate.shape``.
    """
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    candidate = np.asarray(candidate, dtype=np.float64)
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((perturbations,) + candidate.shape)
    norms = np.sqrt(np.sum(d.reshape(perturbations, -1) ** 2, axis=1))
    d *= (radius / norms).reshape((-1,) + (1,) * candidate.ndim)
    base = float(objective(candidate))
    others = np.asarray(objective(candidate[None] + d))
    return bool(np.all(base <= others + rtol * (1.0 + abs(base))))


def _prox_objective(kind, q, tau):
    q = np.asarray(q, dtype=np.float64)
    if kind == "nuclear":
        def obj(x):
            if x.ndim == 2:
                return tau * nuclear_norm(x) + 0.5 * np.sum((x - q) ** 2)
            s = np.linalg.svd(x, compute_uv=False)
            return tau * s.sum(axis=-1) + 0.5 * np.sum((x - q) ** 2, axis=(-2, -1))
    elif kind == "l1":
        def obj(x):
            axes = tuple(range(x.ndim - q.ndim, x.ndim))
            return tau * np.sum(np.abs(x), axis=axes) + 0.5 * np.sum((x - q) ** 2, axis=axes)
    else:
        raise ValueError(f"unknown proximal kind {kind!r}; expected 'nuclear' or 'l1'")
    return obj


def prox_objective_oracle(kind, candidate, q, tau, perturbations=10_000, radius=1e-3, seed=0):
    """Check that ``candidate`` minimises ``tau*||x|| + 0.5*||x - q||^2``
    (nuclear or l1 norm) against random local perturbations."""
    return sampling_oracle(_prox_objective(kind, q, tau), candidate, perturbations, radius, seed)
