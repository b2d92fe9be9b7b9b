"""
Volume files (MetaImage-style ``.mhd`` header + ``.raw`` payload) and the
model directory format.

Payloads are little-endian with x varying fastest. Vector fields store their
three components interleaved per voxel.
"""

import json
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ModelFormatError, VolumeFormatError
from .fields import DeformationField, GridSpec, ScalarVolume, VelocityField, check_compatible
from .gamma import GammaCurve
from .validation import LabelVolume

MODEL_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"

_MET_TYPES = {"MET_FLOAT": "<f4", "MET_DOUBLE": "<f8", "MET_INT": "<i4"}
_TYPE_NAMES = {"float32": "MET_FLOAT", "float64": "MET_DOUBLE", "int32": "MET_INT"}
_KIND_KEY = "AgeModelKind"


def _format_floats(vals):
    return " ".join(repr(float(v)) for v in vals)


def _payload(vol, element_type):
    if isinstance(vol, LabelVolume):
        return "label", "MET_INT", 1, vol.labels
    if isinstance(vol, (VelocityField, DeformationField)):
        kind = "velocity" if isinstance(vol, VelocityField) else "deformation"
        return kind, _TYPE_NAMES[element_type], 3, vol.vectors
    if isinstance(vol, ScalarVolume):
        return "scalar", _TYPE_NAMES[element_type], 1, vol.data
    raise TypeError(f"cannot write {type(vol).__name__}")


def write_volume(vol, path, element_type="float64"):
    """Write ``vol`` to ``path`` (``.mhd``) and a sibling ``.raw`` file.

    Floating-point data is stored as ``element_type`` (``float64`` keeps
    values bit-exact, ``float32`` halves the size). Labels are always int32.
    Output bytes depend only on the volume.
    """
    if element_type not in ("float32", "float64"):
        raise ValueError(f"unsupported element type {element_type!r}")
    path = Path(path)
    raw = path.with_suffix(".raw")
    kind, met, channels, arr = _payload(vol, element_type)
    g = vol.grid
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        f"DimSize = {' '.join(str(d) for d in g.dims)}",
        f"ElementSpacing = {_format_floats(g.spacing)}",
        f"Offset = {_format_floats(g.origin)}",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        f"ElementNumberOfChannels = {channels}",
        f"ElementType = {met}",
        f"{_KIND_KEY} = {kind}",
        f"ElementDataFile = {raw.name}",
    ]
    # x fastest on disk: transpose the [x, y, z(, c)] array to C order [z, y, x(, c)]
    axes = (2, 1, 0, 3) if channels == 3 else (2, 1, 0)
    data = np.ascontiguousarray(np.transpose(arr, axes), dtype=_MET_TYPES[met])
    try:
        raw.write_bytes(data.tobytes())
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write volume {path}: {exc}") from exc


def _parse_header(path):
    try:
        text = Path(path).read_bytes()
    except OSError as exc:
        raise VolumeFormatError(f"cannot read header {path}: {exc}") from exc
    fields = {}
    offset = 0
    for line in text.splitlines(keepends=True):
        stripped = line.strip()
        if stripped:
            try:
                key, value = stripped.decode("ascii").split("=", 1)
            except (UnicodeDecodeError, ValueError):
                raise VolumeFormatError(f"{path}: malformed header line at byte offset {offset}")
            fields[key.strip()] = (value.strip(), offset)
        offset += len(line)
    return fields


def _numbers(fields, key, cast, path, count=3):
    if key not in fields:
        raise VolumeFormatError(f"{path}: header is missing {key}")
    value, offset = fields[key]
    try:
        out = tuple(cast(v) for v in value.split())
    except ValueError:
        raise VolumeFormatError(f"{path}: invalid {key} at byte offset {offset}: {value!r}")
    if len(out) != count:
        raise VolumeFormatError(f"{path}: {key} at byte offset {offset} needs {count} values")
    return out, offset


def read_volume(path):
    """Read a volume written by :func:`write_volume` (or a compatible header).

    Returns a :class:`ScalarVolume`, :class:`VelocityField`,
    :class:`DeformationField` or :class:`LabelVolume`.
    """
    path = Path(path)
    fields = _parse_header(path)
    ndims, _ = _numbers(fields, "NDims", int, path, 1) if "NDims" in fields else ((3,), 0)
    if ndims[0] not in (2, 3):
        raise VolumeFormatError(f"{path}: NDims must be 2 or 3")
    n = ndims[0]
    dims, off = _numbers(fields, "DimSize", int, path, n)
    if any(d <= 0 for d in dims):
        raise VolumeFormatError(f"{path}: invalid header, DimSize at byte offset {off} "
                                f"has a non-positive entry {dims}")
    spacing = _numbers(fields, "ElementSpacing", float, path, n)[0] if "ElementSpacing" in fields \
        else (1.0,) * n
    origin = _numbers(fields, "Offset", float, path, n)[0] if "Offset" in fields else (0.0,) * n
    if n == 2:
        dims, spacing, origin = dims + (1,), spacing + (1.0,), origin + (0.0,)
    try:
        grid = GridSpec(dims, spacing, origin)
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: invalid header: {exc}") from exc

    met, off = fields.get("ElementType", (None, 0))
    if met not in _MET_TYPES:
        raise VolumeFormatError(f"{path}: unknown element type {met!r} at byte offset {off}")
    channels = int(fields.get("ElementNumberOfChannels", ("1", 0))[0])
    if channels not in (1, 3):
        raise VolumeFormatError(f"{path}: unsupported channel count {channels}")
    msb = fields.get("BinaryDataByteOrderMSB", ("False", 0))[0]
    if msb.lower() == "true":
        raise VolumeFormatError(f"{path}: big-endian payloads are not supported")
    if "ElementDataFile" not in fields:
        raise VolumeFormatError(f"{path}: header is missing ElementDataFile")
    raw = path.parent / fields["ElementDataFile"][0]
    try:
        payload = raw.read_bytes()
    except OSError as exc:
        raise VolumeFormatError(f"cannot read data file {raw}: {exc}") from exc

    dtype = np.dtype(_MET_TYPES[met])
    expected = int(np.prod(dims)) * channels * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(f"{raw}: size mismatch, expected {expected} bytes, found "
                                f"{len(payload)} (data ends at byte offset {len(payload)})")
    arr = np.frombuffer(payload, dtype=dtype)
    kind = fields.get(_KIND_KEY, (None, 0))[0]
    if channels == 3:
        vec = np.transpose(arr.reshape(dims[::-1] + (3,)), (2, 1, 0, 3)).astype(np.float64)
        cls = DeformationField if kind == "deformation" else VelocityField
        return cls(grid, vec)
    data = np.transpose(arr.reshape(dims[::-1]), (2, 1, 0))
    if met == "MET_INT" and kind != "scalar":
        return LabelVolume(grid, data)
    return ScalarVolume(grid, data.astype(np.float64))


# ---------------------------------------------------------------------------
# model directory

_COMPONENTS = {"G": "G.mhd", "v_forward": "v_forward.mhd", "v_backward": "v_backward.mhd"}


def manifest_dict(model):
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "tool_version": __version__,
        "files": dict(_COMPONENTS),
        "ages": [float(a) for a in model.ages],
        "m_index": int(model.m_index),
        "m_age": float(model.m_age),
        "gamma": model.gamma.to_dict(),
        "provenance": model.provenance,
    }


def save_model(model, directory):
    """Write the manifest and the three component volumes into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_volume(model.G, directory / _COMPONENTS["G"])
    write_volume(model.v_f_transported, directory / _COMPONENTS["v_forward"])
    write_volume(model.v_b_transported, directory / _COMPONENTS["v_backward"])
    text = json.dumps(manifest_dict(model), indent=2, sort_keys=True)
    (directory / MANIFEST_NAME).write_text(text + "\n")


def read_manifest(directory):
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise ModelFormatError(f"missing model manifest {path}")
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"cannot parse manifest {path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version!r} "
                               f"(this tool reads version {MODEL_FORMAT_VERSION})")
    return manifest


def load_model(directory):
    from .model import AgingModel

    directory = Path(directory)
    manifest = read_manifest(directory)
    vols = {}
    for key in _COMPONENTS:
        rel = manifest.get("files", {}).get(key)
        if rel is None:
            raise ModelFormatError(f"manifest does not list component {key!r}")
        path = directory / rel
        if not path.is_file():
            raise ModelFormatError(f"missing model component {key!r}: {path}")
        vols[key] = read_volume(path)
    if not isinstance(vols["G"], ScalarVolume):
        raise ModelFormatError("G must be a scalar volume")
    for key in ("v_forward", "v_backward"):
        if not isinstance(vols[key], VelocityField):
            raise ModelFormatError(f"{key} must be a velocity field")
    check_compatible(vols["G"], vols["v_forward"], vols["v_backward"])
    try:
        gamma = GammaCurve.from_dict(manifest["gamma"])
        return AgingModel(G=vols["G"], v_f_transported=vols["v_forward"],
                          v_b_transported=vols["v_backward"], gamma=gamma,
                          m_index=int(manifest["m_index"]), m_age=float(manifest["m_age"]),
                          ages=[float(a) for a in manifest["ages"]],
                          provenance=manifest.get("provenance", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"incomplete manifest in {directory}: {exc}") from exc


def write_pgm(img, path, z=None):
    """Export the middle (or given) z slice as an 8-bit binary PGM, rows along y."""
    data = img.data
    z = data.shape[2] // 2 if z is None else z
    sl = data[:, :, z].T
    lo, hi = float(sl.min()), float(sl.max())
    scaled = np.zeros_like(sl) if hi == lo else (sl - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    header = f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pix.tobytes())


def write_csv(path, header, rows):
    """Comma-separated output with a header line; floats use ``repr``."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
                              for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_ages(path):
    """One age per non-blank line."""
    ages = []
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            ages.append(float(line))
        except ValueError:
            raise VolumeFormatError(f"{path}: line {i} is not a number: {line!r}")
    return ages


def list_volumes(directory):
    """Sorted ``.mhd`` files of a directory."""
    return sorted(str(p) for p in Path(directory).glob("*.mhd"))


__all__ = ["read_volume", "write_volume", "save_model", "load_model", "read_manifest",
           "write_pgm", "write_csv", "read_ages", "list_volumes", "MODEL_FORMAT_VERSION"]
