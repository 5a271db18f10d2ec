"""NIfTI-1 volume and deformation I/O, and YAML configuration files.

Volumes are read through nibabel after a small header pre-check so that the
common failure modes (bad header, exotic datatype, short file) produce a
:class:`NiftiError` with a precise message instead of a library traceback.

Deformations are written as 3-vector NIfTI images holding displacements in
world millimetres (``descrip`` records the unit); voxel-unit export is
available with ``voxel_units=True``.
"""
import gzip
import json
import struct
from pathlib import Path

import nibabel as nib
import numpy as np
import yaml

from fdreg.deformation import DeformationField
from fdreg.pipeline import RegistrationConfig
from fdreg.volume import Volume

HEADER_SIZE = 348
# datatype code -> bytes per voxel for the codes we accept
SUPPORTED_DATATYPES = {
    2: 1,  # uint8
    4: 2,  # int16
    8: 4,  # int32
    16: 4,  # float32
    64: 8,  # float64
    256: 1,  # int8
    512: 2,  # uint16
    768: 4,  # uint32
    1024: 8,  # int64
    1280: 8,  # uint64
}
_SAVE_CODES = {np.dtype(np.float32): 16, np.dtype(np.float64): 64}
DESCRIP_MM = b"fdreg displacement mm"
DESCRIP_VOX = b"fdreg displacement voxel"
INTENT_VECTOR = 1007


class NiftiError(ValueError):
    """Unreadable or unsupported NIfTI file."""


def _read_bytes(path):
    path = Path(path)
    if not path.is_file():
        raise NiftiError(f"{path}: no such file")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise NiftiError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def check_header(raw, name="<bytes>"):
    """Validate the fixed NIfTI-1 header fields; returns (endian, datatype, dims).

    Raises :class:`NiftiError` naming the byte offset of the first bad field.
    """
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{name}: malformed header: file has {len(raw)} bytes, "
                         f"header needs {HEADER_SIZE} (offset {len(raw)})")
    for endian in "<>":
        if struct.unpack_from(endian + "i", raw, 0)[0] == HEADER_SIZE:
            break
    else:
        value = struct.unpack_from("<i", raw, 0)[0]
        raise NiftiError(f"{name}: malformed header at offset 0: sizeof_hdr is {value}, expected 348")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiError(f"{name}: malformed header at offset 344: bad magic {magic!r}")
    if magic == b"ni1\x00":
        raise NiftiError(f"{name}: header/image pairs (.hdr/.img) are not supported")
    dims = struct.unpack_from(endian + "8h", raw, 40)
    if not 1 <= dims[0] <= 7 or any(d < 1 for d in dims[1:dims[0] + 1]):
        raise NiftiError(f"{name}: malformed header at offset 40: invalid dim {dims}")
    datatype = struct.unpack_from(endian + "h", raw, 70)[0]
    if datatype not in SUPPORTED_DATATYPES:
        raise NiftiError(f"{name}: unsupported datatype code {datatype}")
    vox_offset = struct.unpack_from(endian + "f", raw, 108)[0]
    if vox_offset < HEADER_SIZE:
        raise NiftiError(f"{name}: malformed header at offset 108: vox_offset {vox_offset}")
    n = int(np.prod(dims[1:dims[0] + 1]))
    need = int(vox_offset) + n * SUPPORTED_DATATYPES[datatype]
    if len(raw) < need:
        raise NiftiError(f"{name}: truncated file: {len(raw)} bytes, image data needs {need}")
    return endian, datatype, dims[1:dims[0] + 1]


def _best_affine(header):
    sform, scode = header.get_sform(coded=True)
    qform, qcode = header.get_qform(coded=True)
    if scode is None:
        scode = 0
    if qcode is None:
        qcode = 0
    if scode == 0 and qcode == 0:
        return header.get_base_affine()
    # ties go to the sform, which can hold shears
    return sform if scode >= qcode else qform


def _channels_first(arr):
    if arr.ndim == 3:
        return arr[None]
    if arr.ndim == 4:
        return np.moveaxis(arr, 3, 0)
    if arr.ndim == 5 and arr.shape[3] == 1:
        return np.moveaxis(arr[:, :, :, 0, :], 3, 0)
    raise NiftiError(f"cannot interpret image of shape {arr.shape} as a (channel) volume")


def load_nifti(path, dtype=np.float64):
    """Read a single-file NIfTI-1 image (optionally gzipped) as a :class:`Volume`.

    Scaling (``scl_slope``/``scl_inter``) is applied. Non-finite voxels are
    set to 0 and marked invalid in ``valid_mask``.
    """
    raw = _read_bytes(path)
    check_header(raw, str(path))
    try:
        img = nib.Nifti1Image.from_bytes(raw)
        data = np.asarray(img.dataobj, dtype=np.float64)
    except Exception as exc:  # nibabel raises a variety of types
        raise NiftiError(f"{path}: could not decode image data ({exc})") from None
    data = _channels_first(data)
    finite = np.all(np.isfinite(data), axis=0)
    data = np.where(finite[None], data, 0.0)
    return Volume(data, _best_affine(img.header), finite, dtype=dtype)


def _image(data_last, affine, dtype):
    dtype = np.dtype(dtype)
    if dtype not in _SAVE_CODES:
        raise NiftiError(f"can only save float32/float64, got {dtype}")
    img = nib.Nifti1Image(np.asarray(data_last, dtype=dtype), affine)
    img.header.set_data_dtype(dtype)
    img.header.set_sform(affine, code=2)
    img.header.set_qform(affine, code=2)
    img.header["scl_slope"] = 1.0
    img.header["scl_inter"] = 0.0
    return img


def save_nifti(vol, path, dtype=None):
    """Write a :class:`Volume` (channels last); defaults to its own precision.

    ``valid_mask`` is not stored.
    """
    data = vol.data[0] if vol.channels == 1 else np.moveaxis(vol.data, 0, -1)
    nib.save(_image(data, vol.affine, dtype or vol.data.dtype), str(path))


def save_displacement(d, path, voxel_units=False, dtype=np.float64):
    """Write a deformation as a vector image (X, Y, Z, 1, 3)."""
    vec = d.displacement if voxel_units else d.to_world_mm()
    img = _image(np.moveaxis(vec, 0, -1)[:, :, :, None, :], d.geometry.affine, dtype)
    img.header.set_intent(INTENT_VECTOR)
    img.header["descrip"] = DESCRIP_VOX if voxel_units else DESCRIP_MM
    nib.save(img, str(path))


def load_displacement(path, voxel_units=None):
    """Read a deformation written by :func:`save_displacement`.

    The unit is taken from the file's description unless ``voxel_units`` is
    given explicitly; unlabelled files are assumed to hold millimetres.
    """
    raw = _read_bytes(path)
    check_header(raw, str(path))
    vol = load_nifti(path)
    if vol.channels != 3:
        raise NiftiError(f"{path}: a deformation needs 3 components, got {vol.channels}")
    if voxel_units is None:
        descrip = nib.Nifti1Image.from_bytes(raw).header["descrip"].item()
        voxel_units = descrip.startswith(DESCRIP_VOX)
    if voxel_units:
        return DeformationField(vol.data, vol.geometry)
    return DeformationField.from_world_mm(vol.data, vol.geometry)


def load_config(path):
    """Parse a YAML config into a validated :class:`RegistrationConfig`."""
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ValueError(f"{path}: invalid YAML ({exc})") from None
    return RegistrationConfig.from_dict(data or {})


def save_config(config, path):
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))


def save_deformation(result, out_dir, voxel_units=False):
    """Write ``forward``/``inverse`` displacements plus config and loss trace.

    Files: ``forward.nii.gz``, ``inverse.nii.gz``, ``config.yaml`` and
    ``trace.json``. Returns the output directory as a :class:`Path`.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_displacement(result.forward, out / "forward.nii.gz", voxel_units)
    save_displacement(result.inverse, out / "inverse.nii.gz", voxel_units)
    save_config(result.config, out / "config.yaml")
    trace = {
        "units": "voxel" if voxel_units else "mm",
        "loss": [float(x) for x in result.loss_trace],
        "level": [int(x) for x in result.level_trace],
    }
    (out / "trace.json").write_text(json.dumps(trace))
    return out


def residual_volume(result, geometry):
    """Per-center residuals of the last iteration scattered onto ``geometry``.

    Voxels that were not sampling centers are 0 and marked invalid.
    """
    res = result.residuals
    if res is None:
        raise ValueError("result carries no residuals")
    data = np.zeros(geometry.shape)
    mask = np.zeros(geometry.shape, dtype=bool)
    idx = tuple(np.asarray(res["centers"]).T)
    data[idx] = res["per_center"]
    mask[idx] = True
    return Volume(data, geometry.affine, mask)
