"""
DICOM-lite: the explicit-VR little-endian, uncompressed, single-frame grayscale subset.

Anything outside the subset raises `UnsupportedFeatureError` naming what was found. Element
values other than the image geometry and pixel data are kept as opaque bytes.
"""

from collections.abc import Mapping
from dataclasses import dataclass, field
import hashlib
import logging
from pathlib import Path
import struct
from types import MappingProxyType

import numpy as np

from covilearn.errors import ArgumentError, FormatError, MissingFileError, UnsupportedFeatureError

logger = logging.getLogger(__name__)

PREAMBLE_LENGTH = 128
MAGIC = b"DICM"
EXPLICIT_VR_LITTLE_ENDIAN = "1.2.840.10008.1.2.1"
IMPLEMENTATION_CLASS_UID = "1.2.826.0.1.3680043.10.1453.1"
DIGITAL_XRAY_STORAGE = "1.2.840.10008.5.1.4.1.1.1.1"

TRANSFER_SYNTAX_NAMES = {
    "1.2.840.10008.1.2": "Implicit VR Little Endian",
    "1.2.840.10008.1.2.1.99": "Deflated Explicit VR Little Endian",
    "1.2.840.10008.1.2.2": "Explicit VR Big Endian",
    "1.2.840.10008.1.2.4.50": "JPEG Baseline",
    "1.2.840.10008.1.2.4.51": "JPEG Extended",
    "1.2.840.10008.1.2.4.57": "JPEG Lossless",
    "1.2.840.10008.1.2.4.70": "JPEG Lossless SV1",
    "1.2.840.10008.1.2.4.80": "JPEG-LS Lossless",
    "1.2.840.10008.1.2.4.81": "JPEG-LS Near-Lossless",
    "1.2.840.10008.1.2.4.90": "JPEG 2000 Lossless",
    "1.2.840.10008.1.2.4.91": "JPEG 2000",
    "1.2.840.10008.1.2.5": "RLE Lossless",
}

# VRs whose explicit header carries two reserved bytes and a 32-bit length.
LONG_VRS = frozenset({"OB", "OD", "OF", "OL", "OV", "OW", "SQ", "SV", "UC", "UN", "UR", "UT", "UV"})
UNDEFINED_LENGTH = 0xFFFFFFFF

Tag = tuple[int, int]

TRANSFER_SYNTAX: Tag = (0x0002, 0x0010)
SAMPLES_PER_PIXEL: Tag = (0x0028, 0x0002)
PHOTOMETRIC: Tag = (0x0028, 0x0004)
NUMBER_OF_FRAMES: Tag = (0x0028, 0x0008)
ROWS: Tag = (0x0028, 0x0010)
COLUMNS: Tag = (0x0028, 0x0011)
BITS_ALLOCATED: Tag = (0x0028, 0x0100)
BITS_STORED: Tag = (0x0028, 0x0101)
PIXEL_REPRESENTATION: Tag = (0x0028, 0x0103)
PIXEL_DATA: Tag = (0x7FE0, 0x0010)


@dataclass(frozen=True)
class DicomElement:
    vr: str
    value: bytes

    def text(self) -> str:
        return self.value.decode("ascii", errors="replace").rstrip("\x00 ")

    def unsigned(self) -> int:
        if self.vr == "US" and len(self.value) >= 2:
            return struct.unpack_from("<H", self.value)[0]
        if self.vr == "UL" and len(self.value) >= 4:
            return struct.unpack_from("<I", self.value)[0]
        if self.vr == "IS":
            try:
                return int(self.text() or "0")
            except ValueError:
                raise FormatError(f"integer string element holds '{self.text()}'") from None
        raise FormatError(f"cannot read an unsigned integer from VR {self.vr} ({len(self.value)} bytes)")


@dataclass(frozen=True)
class DicomLiteFile:
    preamble: bytes
    elements: Mapping[Tag, DicomElement] = field(repr=False)
    transfer_syntax: str
    rows: int
    columns: int
    bits_allocated: int
    bits_stored: int
    photometric: str
    pixel_data: bytes = field(repr=False)

    @property
    def max_value(self) -> int:
        return (1 << self.bits_stored) - 1

    def pixels(self) -> np.ndarray:
        """(rows, columns) unsigned array; MONOCHROME1 is inverted so larger means brighter."""
        dtype = np.dtype("u1") if self.bits_allocated == 8 else np.dtype("<u2")
        count = self.rows * self.columns
        values = np.frombuffer(self.pixel_data, dtype=dtype, count=count).reshape(self.rows, self.columns)
        values = values & self.max_value
        if self.photometric == "MONOCHROME1":
            values = self.max_value - values
        return values.astype(np.uint16 if self.bits_allocated == 16 else np.uint8)


class _Cursor:
    def __init__(self, data: bytes, offset: int) -> None:
        self.data = data
        self.offset = offset

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset

    def take(self, n: int) -> bytes:
        if n > self.remaining:
            raise FormatError(f"truncated DICOM element at byte {self.offset}: need {n} bytes, {self.remaining} left")
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def element(self) -> tuple[Tag, DicomElement]:
        start = self.offset
        group, number = struct.unpack("<HH", self.take(4))
        tag = (group, number)
        vr = self.take(2).decode("ascii", errors="replace")
        if not (vr.isalpha() and vr.isupper()):
            raise UnsupportedFeatureError("implicit VR encoding", f"no VR for tag {_format_tag(tag)} at byte {start}")
        if vr in LONG_VRS:
            self.take(2)
            (length,) = struct.unpack("<I", self.take(4))
        else:
            (length,) = struct.unpack("<H", self.take(2))
        if length == UNDEFINED_LENGTH:
            raise UnsupportedFeatureError("undefined-length element", f"tag {_format_tag(tag)} ({vr})")
        if tag == PIXEL_DATA and length > self.remaining:
            raise FormatError(f"truncated pixel data: expected {length} bytes, got {self.remaining}")
        return tag, DicomElement(vr, self.take(length))


def _format_tag(tag: Tag) -> str:
    return f"({tag[0]:04X},{tag[1]:04X})"


def _require(elements: Mapping[Tag, DicomElement], tag: Tag, what: str) -> DicomElement:
    if tag not in elements:
        raise FormatError(f"missing {what} {_format_tag(tag)}")
    return elements[tag]


def parse_dicom_lite(data: bytes) -> DicomLiteFile:
    if len(data) < PREAMBLE_LENGTH + len(MAGIC) or data[PREAMBLE_LENGTH : PREAMBLE_LENGTH + 4] != MAGIC:
        raise FormatError("not a DICOM file (missing DICM marker at byte 128)")

    cursor = _Cursor(data, PREAMBLE_LENGTH + len(MAGIC))
    elements: dict[Tag, DicomElement] = {}
    # File meta group is always explicit VR little endian.
    while cursor.remaining >= 4 and struct.unpack_from("<H", data, cursor.offset)[0] == 0x0002:
        tag, element = cursor.element()
        elements[tag] = element

    syntax = _require(elements, TRANSFER_SYNTAX, "transfer syntax").text()
    if syntax != EXPLICIT_VR_LITTLE_ENDIAN:
        name = TRANSFER_SYNTAX_NAMES.get(syntax, "unknown")
        raise UnsupportedFeatureError(f"transfer syntax {syntax}", name)

    while cursor.remaining > 0:
        tag, element = cursor.element()
        elements[tag] = element

    samples = elements[SAMPLES_PER_PIXEL].unsigned() if SAMPLES_PER_PIXEL in elements else 1
    if samples != 1:
        raise UnsupportedFeatureError("multi-sample pixels", f"samples per pixel = {samples}")
    frames = elements[NUMBER_OF_FRAMES].unsigned() if NUMBER_OF_FRAMES in elements else 1
    if frames != 1:
        raise UnsupportedFeatureError("multi-frame image", f"{frames} frames")
    if PIXEL_REPRESENTATION in elements and elements[PIXEL_REPRESENTATION].unsigned() != 0:
        raise UnsupportedFeatureError("signed pixel representation")

    rows = _require(elements, ROWS, "rows").unsigned()
    columns = _require(elements, COLUMNS, "columns").unsigned()
    bits_allocated = _require(elements, BITS_ALLOCATED, "bits allocated").unsigned()
    if bits_allocated not in (8, 16):
        raise UnsupportedFeatureError(f"{bits_allocated}-bit pixels")
    bits_stored = elements[BITS_STORED].unsigned() if BITS_STORED in elements else bits_allocated
    if not 1 <= bits_stored <= bits_allocated:
        raise FormatError(f"bits stored {bits_stored} outside 1..{bits_allocated}")
    photometric = elements[PHOTOMETRIC].text() if PHOTOMETRIC in elements else "MONOCHROME2"
    if photometric not in ("MONOCHROME1", "MONOCHROME2"):
        raise UnsupportedFeatureError(f"photometric interpretation {photometric}")
    if rows == 0 or columns == 0:
        raise FormatError(f"empty image: {rows}x{columns}")

    pixel_data = _require(elements, PIXEL_DATA, "pixel data").value
    expected = rows * columns * bits_allocated // 8
    padded = expected + (expected % 2)
    if len(pixel_data) not in (expected, padded):
        raise FormatError(f"truncated pixel data: expected {expected} bytes, got {len(pixel_data)}")

    return DicomLiteFile(
        preamble=data[:PREAMBLE_LENGTH],
        elements=MappingProxyType(elements),
        transfer_syntax=syntax,
        rows=rows,
        columns=columns,
        bits_allocated=bits_allocated,
        bits_stored=bits_stored,
        photometric=photometric,
        pixel_data=pixel_data[:expected],
    )


def load_dicom_lite(path: Path) -> DicomLiteFile:
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise MissingFileError(path) from None
    return parse_dicom_lite(data)


# ------------------------------------------------------------------------------
# Writer
# ------------------------------------------------------------------------------


def _pad(value: bytes, vr: str) -> bytes:
    if len(value) % 2 == 0:
        return value
    return value + (b"\x00" if vr in ("UI", "OB") else b" ")


def _encode(tag: Tag, vr: str, value: bytes) -> bytes:
    value = _pad(value, vr)
    head = struct.pack("<HH", *tag) + vr.encode("ascii")
    if vr in LONG_VRS:
        return head + b"\x00\x00" + struct.pack("<I", len(value)) + value
    return head + struct.pack("<H", len(value)) + value


def _us(value: int) -> bytes:
    return struct.pack("<H", value)


def emit_dicom_lite(pixels: np.ndarray, bits: int = 8, *, photometric: str = "MONOCHROME2") -> bytes:
    """Encode a (rows, columns) unsigned array as a DICOM-lite file readable by standard toolkits."""
    array = np.asarray(pixels)
    if array.ndim != 2 or 0 in array.shape:
        raise ArgumentError(f"pixels must be a non-empty 2-D array, got shape {array.shape}")
    if bits not in (8, 16):
        raise ArgumentError(f"bits must be 8 or 16, got {bits}")
    if not np.issubdtype(array.dtype, np.integer) or array.min() < 0 or array.max() > (1 << bits) - 1:
        raise ArgumentError(f"pixels must be integers in [0, {(1 << bits) - 1}]")
    if photometric not in ("MONOCHROME1", "MONOCHROME2"):
        raise ArgumentError(f"photometric must be MONOCHROME1 or MONOCHROME2, got {photometric}")

    rows, columns = array.shape
    payload = array.astype("u1" if bits == 8 else "<u2").tobytes()
    instance_uid = "2.25." + str(int(hashlib.sha256(payload).hexdigest()[:30], 16))

    meta = b"".join(
        [
            _encode((0x0002, 0x0001), "OB", b"\x00\x01"),
            _encode((0x0002, 0x0002), "UI", DIGITAL_XRAY_STORAGE.encode()),
            _encode((0x0002, 0x0003), "UI", instance_uid.encode()),
            _encode(TRANSFER_SYNTAX, "UI", EXPLICIT_VR_LITTLE_ENDIAN.encode()),
            _encode((0x0002, 0x0012), "UI", IMPLEMENTATION_CLASS_UID.encode()),
        ]
    )
    dataset = b"".join(
        [
            _encode((0x0008, 0x0016), "UI", DIGITAL_XRAY_STORAGE.encode()),
            _encode((0x0008, 0x0018), "UI", instance_uid.encode()),
            _encode((0x0008, 0x0060), "CS", b"DX"),
            _encode(SAMPLES_PER_PIXEL, "US", _us(1)),
            _encode(PHOTOMETRIC, "CS", photometric.encode()),
            _encode(ROWS, "US", _us(rows)),
            _encode(COLUMNS, "US", _us(columns)),
            _encode(BITS_ALLOCATED, "US", _us(bits)),
            _encode(BITS_STORED, "US", _us(bits)),
            _encode((0x0028, 0x0102), "US", _us(bits - 1)),
            _encode(PIXEL_REPRESENTATION, "US", _us(0)),
            _encode(PIXEL_DATA, "OB" if bits == 8 else "OW", payload),
        ]
    )
    group_length = _encode((0x0002, 0x0000), "UL", struct.pack("<I", len(meta)))
    return bytes(PREAMBLE_LENGTH) + MAGIC + group_length + meta + dataset
