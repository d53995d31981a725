"""File formats: pts landmarks, binary PGM images, JSON sidecars, shape
models, and atomic writes."""
import json
import os
import tempfile

import numpy as np

from .shapewarp import ShapeModel, Triangulation, as_shape


class FormatError(ValueError):
    pass


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


# -- pts ---------------------------------------------------------------------


def format_pts(shape):
    shape = as_shape(shape)
    lines = ["version: 1", f"n_points: {len(shape)}", "{"]
    lines += [f"{x:.6f} {y:.6f}" for x, y in shape]
    lines.append("}")
    return "\n".join(lines) + "\n"


def write_pts(shape):
    return format_pts(shape).encode("ascii")


def parse_pts(data):
    """Parse pts text (bytes or str) into a ``(v, 2)`` array."""
    if isinstance(data, bytes):
        data = data.decode("ascii", errors="replace")
    lines = data.splitlines()
    # skip blank lines but keep original numbering for diagnostics
    rows = [(i + 1, ln.strip()) for i, ln in enumerate(lines) if ln.strip()]
    if len(rows) < 3:
        raise FormatError(f"line {len(lines) or 1}: truncated pts header")
    (l0, version), (l1, count), (l2, brace) = rows[:3]
    if version.replace(" ", "") != "version:1":
        raise FormatError(f"line {l0}: expected 'version: 1', got {version!r}")
    key, _, value = count.partition(":")
    if key.strip() != "n_points":
        raise FormatError(f"line {l1}: expected 'n_points: <v>', got {count!r}")
    try:
        v = int(value)
    except ValueError:
        raise FormatError(f"line {l1}: bad point count {value.strip()!r}") from None
    if brace != "{":
        raise FormatError(f"line {l2}: expected '{{', got {brace!r}")
    body = rows[3:]
    closing = [j for j, (_, ln) in enumerate(body) if ln == "}"]
    if not closing:
        raise FormatError(f"line {len(lines)}: missing closing '}}'")
    end = closing[0]
    if end != v:
        raise FormatError(
            f"line {body[end][0]}: header declares n_points {v} but file has {end} points"
        )
    pts = []
    for lineno, ln in body[:end]:
        parts = ln.split()
        if len(parts) != 2:
            raise FormatError(f"line {lineno}: expected 'x y', got {ln!r}")
        try:
            pts.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise FormatError(f"line {lineno}: non-numeric coordinate in {ln!r}") from None
    return as_shape(np.array(pts))


def read_pts(path):
    with open(path, "rb") as fh:
        return parse_pts(fh.read())


def save_pts(shape, path):
    atomic_write_bytes(path, write_pts(shape))


# -- PGM ---------------------------------------------------------------------


def _pnm_header(data):
    """Return (magic, width, height, maxval, payload offset)."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic = tokens[0].decode("ascii", errors="replace")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"malformed PNM header {tokens!r}") from None
    return magic, width, height, maxval, pos


def decode_image(data):
    """Decode binary PGM (P5) or PPM (P6) bytes to a float grid in [0, 1].

    Colour input is reduced to gray by averaging the three channels.
    """
    if data[:2] not in (b"P5", b"P6"):
        raise FormatError(f"unsupported image magic {data[:2]!r}; expected b'P5' (or b'P6')")
    magic, width, height, maxval, off = _pnm_header(data)
    if not 0 < maxval < 256:
        raise FormatError(f"only 8-bit images are supported, maxval={maxval}")
    channels = 1 if magic == "P5" else 3
    need = width * height * channels
    raster = np.frombuffer(data, dtype=np.uint8, count=-1, offset=off)
    if raster.size < need:
        raise FormatError(f"truncated raster: expected {need} bytes, got {raster.size}")
    raster = raster[:need].reshape(height, width, channels).astype(np.float64)
    gray = raster.mean(axis=2) if channels == 3 else raster[..., 0]
    return gray / maxval


def encode_image(grid):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {grid.shape}")
    q = np.rint(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def read_image(path):
    with open(path, "rb") as fh:
        return decode_image(fh.read())


def write_image(grid, path):
    atomic_write_bytes(path, encode_image(grid))


# -- JSON sidecars -------------------------------------------------------------


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_sidecar(path, gt_shape, gt_params, gt_error_support, seed, **extra):
    payload = {
        "gt_shape": np.asarray(gt_shape).tolist(),
        "gt_params": np.asarray(gt_params).tolist(),
        "gt_error_support": [int(i) for i in gt_error_support],
        "seed": int(seed),
    }
    payload.update({k: np.asarray(v).tolist() if isinstance(v, np.ndarray) else v for k, v in extra.items()})
    atomic_write_text(path, _dump(payload))


def read_sidecar(path):
    with open(path) as fh:
        payload = json.load(fh)
    missing = {"gt_shape", "gt_params", "gt_error_support", "seed"} - set(payload)
    if missing:
        raise FormatError(f"{path}: sidecar missing keys {sorted(missing)}")
    payload["gt_shape"] = as_shape(payload["gt_shape"], "gt_shape")
    payload["gt_params"] = np.asarray(payload["gt_params"], dtype=np.float64)
    return payload


def save_shape_model(path, model, tri):
    payload = {
        "format": "far-shape-model",
        "version": 1,
        "frame": list(model.frame),
        "mean_shape": model.mean_shape.tolist(),
        "basis": model.basis.tolist(),
        "triangles": tri.triangles.tolist(),
    }
    atomic_write_text(path, _dump(payload))


def load_shape_model(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "far-shape-model" or payload.get("version") != 1:
        raise FormatError(f"{path}: not a version-1 far shape model")
    basis = np.asarray(payload["basis"], dtype=np.float64)
    err = np.max(np.abs(basis.T @ basis - np.eye(basis.shape[1])))
    if err > 1e-10:
        raise FormatError(f"{path}: shape basis not orthonormal (max Gram error {err:.3g})")
    model = ShapeModel(
        mean_shape=as_shape(payload["mean_shape"], "mean_shape"),
        basis=basis,
        frame=tuple(int(d) for d in payload["frame"]),
    )
    tri = Triangulation(np.asarray(payload["triangles"], dtype=np.int64))
    return model, tri
