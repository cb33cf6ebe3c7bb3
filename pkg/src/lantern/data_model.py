"""Core complex-tensor types and the deterministic binary volume container.

A volume file is a single self-describing container: one UTF-8 JSON header
line terminated by ``\\n``, followed by a raw little-endian payload.  Complex
volumes (``.cvol``) store interleaved (real, imag) pairs; binary masks
(``.cmask``) store one byte per entry.  The payload is laid out with t
slowest, then y, then x fastest, so the format is platform independent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DynamicImage",
    "KSpaceData",
    "Dataset",
    "HeaderError",
    "PayloadError",
    "NonFiniteError",
    "save_volume",
    "load_volume",
]

_COMPLEX_DTYPES = {"c64": np.complex64, "c128": np.complex128}
_DTYPE_NAMES = {np.dtype(np.complex64): "c64", np.dtype(np.complex128): "c128"}


class HeaderError(ValueError):
    """The JSON header of a container file is missing or malformed."""


class PayloadError(ValueError):
    """The payload length disagrees with the header, or bytes are corrupt."""


class NonFiniteError(ValueError):
    """A volume contains NaN or Inf entries."""


def _as_volume_array(data, name: str) -> np.ndarray:
    arr = np.asarray(data)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be a 3D (nx, ny, nt) array, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.complexfloating):
        arr = arr.astype(np.complex128)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class DynamicImage:
    """Complex spatiotemporal volume of shape (nx, ny, nt).

    Holds stacked cardiac-phase images; immutable once constructed so
    instances are safe to share across workers.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = _as_volume_array(self.data, "DynamicImage.data")
        if arr.shape[0] < 2 or arr.shape[1] < 2 or arr.shape[2] < 1:
            raise ValueError(f"volume too small: {arr.shape} (need nx >= 2, ny >= 2, nt >= 1)")
        object.__setattr__(self, "data", arr)

    @property
    def nx(self) -> int:
        return self.data.shape[0]

    @property
    def ny(self) -> int:
        return self.data.shape[1]

    @property
    def nt(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class KSpaceData:
    """Per-frame 2D Fourier coefficients on the Cartesian grid, shape (nx, ny, nt).

    Undersampled data is stored zero-filled: entries off the sampling
    support are exactly zero.
    """

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _as_volume_array(self.data, "KSpaceData.data"))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class Dataset:
    """List of (kspace, mask, ground-truth image) triples of identical shape."""

    samples: list = field(default_factory=list)

    def __post_init__(self):
        shapes = {y.shape for y, _, _ in self.samples}
        shapes |= {gt.shape for _, _, gt in self.samples}
        if len(shapes) > 1:
            raise ValueError(f"dataset samples disagree on shape: {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def _write_container(path, header: dict, payload: bytes) -> None:
    blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + payload
    with open(path, "wb") as f:
        f.write(blob)


def _read_container(path) -> tuple[dict, bytes]:
    with open(path, "rb") as f:
        blob = f.read()
    newline = blob.find(b"\n")
    if newline < 0:
        raise HeaderError(f"{path}: no header line found")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"{path}: malformed JSON header: {exc}") from exc
    if not isinstance(header, dict):
        raise HeaderError(f"{path}: header is not a JSON object")
    return header, blob[newline + 1 :]


def save_volume(path, image: DynamicImage) -> None:
    """Write a complex volume to ``path`` in the ``.cvol`` container format.

    Round-trips bit-exactly through :func:`load_volume` on any platform.
    """
    arr = image.data
    dtype_name = _DTYPE_NAMES[arr.dtype]
    header = {
        "nx": image.nx,
        "ny": image.ny,
        "nt": image.nt,
        "dtype": dtype_name,
        "byte_order": "little",
    }
    # file order: t slowest, then y, then x fastest
    payload = np.ascontiguousarray(arr.transpose(2, 1, 0)).astype(
        "<c8" if dtype_name == "c64" else "<c16"
    ).tobytes()
    _write_container(path, header, payload)


def load_volume(path) -> DynamicImage:
    """Read a ``.cvol`` container written by :func:`save_volume`."""
    header, payload = _read_container(path)
    try:
        nx, ny, nt = int(header["nx"]), int(header["ny"]), int(header["nt"])
        dtype_name = header["dtype"]
    except (KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"{path}: header missing required fields: {exc}") from exc
    if dtype_name not in _COMPLEX_DTYPES:
        raise HeaderError(f"{path}: unknown dtype {dtype_name!r}")
    if header.get("byte_order", "little") != "little":
        raise HeaderError(f"{path}: unsupported byte order {header.get('byte_order')!r}")
    width = 8 if dtype_name == "c64" else 16
    expected = nx * ny * nt * width
    if len(payload) != expected:
        raise PayloadError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    flat = np.frombuffer(payload, dtype="<c8" if dtype_name == "c64" else "<c16")
    arr = flat.reshape(nt, ny, nx).transpose(2, 1, 0)
    return DynamicImage(arr.astype(_COMPLEX_DTYPES[dtype_name]))


def _save_u8_container(path, arr3d: np.ndarray, extra_header: dict) -> None:
    header = {
        "nx": int(arr3d.shape[0]),
        "ny": int(arr3d.shape[1]),
        "nt": int(arr3d.shape[2]),
        "dtype": "u8",
        "byte_order": "little",
    }
    header.update(extra_header)
    payload = np.ascontiguousarray(arr3d.transpose(2, 1, 0)).astype(np.uint8).tobytes()
    _write_container(path, header, payload)


def _load_u8_container(path) -> tuple[np.ndarray, dict]:
    header, payload = _read_container(path)
    try:
        nx, ny, nt = int(header["nx"]), int(header["ny"]), int(header["nt"])
    except (KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"{path}: header missing required fields: {exc}") from exc
    if header.get("dtype") != "u8":
        raise HeaderError(f"{path}: expected dtype 'u8', got {header.get('dtype')!r}")
    if len(payload) != nx * ny * nt:
        raise PayloadError(
            f"{path}: payload is {len(payload)} bytes, header implies {nx * ny * nt}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(nt, ny, nx).transpose(2, 1, 0)
    return arr.copy(), header
