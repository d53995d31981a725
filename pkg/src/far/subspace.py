"""Clean-frontal appearance basis: construction and the FARB file format.

FARB layout (little endian, no padding)::

    b"FARB" | u32 version=1 | u32 m | u32 n | u32 k
    mask : f bytes (0/1)
    mean : f float64
    u    : f*k float64, column-major (column 0 first)
"""
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .io import atomic_write_bytes
from .numlin import RankTruncationWarning, orthonormalize, pca
from .shapewarp import pixel_map, warp_texture

MAGIC = b"FARB"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
ORTHO_TOL = 1e-10


class BasisFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AppearanceBasis:
    frame: tuple
    mean: np.ndarray
    u: np.ndarray
    mask: np.ndarray

    @property
    def k(self):
        return self.u.shape[1]

    @property
    def n_pixels(self):
        return self.u.shape[0]

    def validate(self):
        m, n = self.frame
        f = m * n
        if self.u.shape[0] != f or self.mean.shape != (f,) or self.mask.shape != (f,):
            raise BasisFormatError(f"inconsistent sizes for a {m}x{n} frame")
        gram_err = np.max(np.abs(self.u.T @ self.u - np.eye(self.k))) if self.k else 0.0
        if gram_err > ORTHO_TOL:
            raise BasisFormatError(f"basis columns not orthonormal (max Gram error {gram_err:.3g})")
        if np.any(self.u[~self.mask] != 0) or np.any(self.mean[~self.mask] != 0):
            raise BasisFormatError("masked pixels must be zero in u and mean")
        inside = self.mean[self.mask]
        if inside.size and (inside.min() < 0 or inside.max() > 1):
            raise BasisFormatError("mean texture leaves [0, 1] on unmasked pixels")
        return self


def basis_from_textures(textures, mask, frame, k):
    """PCA of masked textures with the mean direction folded into the span.

    ``textures`` is ``(N, f)``. The first ``k`` principal directions are kept,
    the mean texture is appended as one more column and the set is
    re-orthonormalised, giving at most ``k + 1`` columns.
    """
    textures = np.asarray(textures, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    f = textures.shape[1]
    rows = textures[:, mask].T
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RankTruncationWarning)
        mean_in, eig = pca(rows, k)
    for w in caught:
        warnings.warn(str(w.message), RankTruncationWarning, stacklevel=2)
    cols = orthonormalize(np.column_stack([eig, mean_in]))
    u = np.zeros((f, cols.shape[1]))
    u[mask] = cols
    mean = np.zeros(f)
    mean[mask] = mean_in
    return AppearanceBasis(frame=tuple(frame), mean=mean, u=u, mask=mask.copy()).validate()


def build_basis(images, shapes, model, tri, k):
    """Warp training images into the reference frame and build the basis.

    Pixels that fall outside any training image are excluded from the mask.
    """
    if len(images) != len(shapes):
        raise ValueError(f"{len(images)} images but {len(shapes)} shapes")
    if len(images) < 2:
        raise ValueError(f"need at least 2 training pairs, got {len(images)}")
    pmap = pixel_map(model, tri)
    textures = []
    mask = pmap.inside.copy()
    for img, shp in zip(images, shapes):
        x, valid = warp_texture(img, shp, model, tri, pmap=pmap)
        textures.append(x)
        mask &= valid
    return basis_from_textures(np.stack(textures), mask, model.frame, k)


def to_bytes(basis):
    m, n = basis.frame
    return b"".join(
        [
            _HEADER.pack(MAGIC, VERSION, m, n, basis.k),
            basis.mask.astype(np.uint8).tobytes(),
            basis.mean.astype("<f8").tobytes(),
            np.asfortranarray(basis.u).astype("<f8").tobytes(order="F"),
        ]
    )


def from_bytes(data):
    if len(data) < _HEADER.size:
        raise BasisFormatError(f"truncated header: expected {_HEADER.size} bytes, got {len(data)}")
    magic, version, m, n, k = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BasisFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise BasisFormatError(f"unsupported FARB version {version}, expected {VERSION}")
    f = m * n
    expected = _HEADER.size + f + 8 * f + 8 * f * k
    if len(data) != expected:
        raise BasisFormatError(f"payload length mismatch: expected {expected} bytes, got {len(data)}")
    off = _HEADER.size
    raw_mask = np.frombuffer(data, dtype=np.uint8, count=f, offset=off)
    if np.any(raw_mask > 1):
        raise BasisFormatError("mask bytes must be 0 or 1")
    off += f
    mean = np.frombuffer(data, dtype="<f8", count=f, offset=off).astype(np.float64)
    off += 8 * f
    u = np.frombuffer(data, dtype="<f8", count=f * k, offset=off).reshape((f, k), order="F")
    basis = AppearanceBasis(frame=(m, n), mean=mean, u=np.array(u, dtype=np.float64), mask=raw_mask.astype(bool))
    return basis.validate()


def save_basis(basis, path):
    atomic_write_bytes(path, to_bytes(basis))


def load_basis(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
