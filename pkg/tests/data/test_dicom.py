import io
from pathlib import Path
import struct

import numpy as np
import pytest

from covilearn.dicom import (
    EXPLICIT_VR_LITTLE_ENDIAN,
    NUMBER_OF_FRAMES,
    PIXEL_DATA,
    ROWS,
    emit_dicom_lite,
    load_dicom_lite,
    parse_dicom_lite,
)
from covilearn.errors import ArgumentError, FormatError, MissingFileError, UnsupportedFeatureError
from covilearn.imaging import decode_image
from tests.utilities import with_dicom_element

JPEG_BASELINE = "1.2.840.10008.1.2.4.50"


def test_round_trip_2x2() -> None:
    parsed = parse_dicom_lite(emit_dicom_lite(np.array([[0, 1], [2, 3]], dtype=np.uint8)))
    assert parsed.rows == 2
    assert parsed.columns == 2
    assert parsed.bits_allocated == 8
    assert parsed.transfer_syntax == EXPLICIT_VR_LITTLE_ENDIAN
    assert parsed.pixels().reshape(-1).tolist() == [0, 1, 2, 3]


@pytest.mark.parametrize("shape", [(1, 1), (3, 3), (5, 7), (16, 9)])
@pytest.mark.parametrize("bits", [8, 16])
def test_round_trip_shapes(shape: tuple[int, int], bits: int) -> None:
    rng = np.random.default_rng(shape[0] * 100 + shape[1] + bits)
    pixels = rng.integers(0, 1 << bits, size=shape)
    parsed = parse_dicom_lite(emit_dicom_lite(pixels, bits))
    assert parsed.pixels().shape == shape
    assert np.array_equal(parsed.pixels(), pixels)
    assert parsed.max_value == (1 << bits) - 1


def test_preamble_and_elements() -> None:
    data = emit_dicom_lite(np.zeros((4, 6), dtype=np.uint8))
    parsed = parse_dicom_lite(data)
    assert parsed.preamble == bytes(128)
    assert data[128:132] == b"DICM"
    assert parsed.elements[ROWS].unsigned() == 4
    assert parsed.elements[PIXEL_DATA].vr == "OB"


def test_writer_is_deterministic() -> None:
    pixels = np.arange(12, dtype=np.uint8).reshape(3, 4)
    assert emit_dicom_lite(pixels) == emit_dicom_lite(pixels)


def test_monochrome1_is_inverted() -> None:
    parsed = parse_dicom_lite(emit_dicom_lite(np.array([[0, 255]], dtype=np.uint8), photometric="MONOCHROME1"))
    assert parsed.photometric == "MONOCHROME1"
    assert parsed.pixels().tolist() == [[255, 0]]


def test_bad_magic() -> None:
    data = bytearray(emit_dicom_lite(np.zeros((2, 2), dtype=np.uint8)))
    data[128:132] = b"DICX"

    with pytest.raises(FormatError) as excinfo:
        parse_dicom_lite(bytes(data))
    assert "DICM" in str(excinfo.value)

    with pytest.raises(FormatError):
        parse_dicom_lite(b"short")


def test_truncated_pixel_data() -> None:
    data = emit_dicom_lite(np.array([[0, 1], [2, 3]], dtype=np.uint8))

    with pytest.raises(FormatError) as excinfo:
        parse_dicom_lite(data[:-1])
    assert str(excinfo.value) == "truncated pixel data: expected 4 bytes, got 3"


def test_non_integer_string_element() -> None:
    data = with_dicom_element(emit_dicom_lite(np.zeros((2, 2), dtype=np.uint8)), NUMBER_OF_FRAMES, "IS", b"x1")

    with pytest.raises(FormatError) as excinfo:
        parse_dicom_lite(data)
    assert not isinstance(excinfo.value, UnsupportedFeatureError)
    assert "'x1'" in str(excinfo.value)

    single = with_dicom_element(emit_dicom_lite(np.zeros((2, 2), dtype=np.uint8)), NUMBER_OF_FRAMES, "IS", b"1 ")
    assert parse_dicom_lite(single).rows == 2


def test_compressed_transfer_syntax_is_named() -> None:
    data = emit_dicom_lite(np.zeros((2, 2), dtype=np.uint8))
    # UIDs are padded to even length with a NUL
    original = EXPLICIT_VR_LITTLE_ENDIAN.encode() + b"\x00"
    patched = _replace_uid(data, original, JPEG_BASELINE)

    with pytest.raises(UnsupportedFeatureError) as excinfo:
        parse_dicom_lite(patched)
    assert JPEG_BASELINE in str(excinfo.value)
    assert "JPEG Baseline" in str(excinfo.value)


def _replace_uid(data: bytes, original: bytes, uid: str) -> bytes:
    """Rewrite the transfer syntax element (0002,0010), fixing its length and the group length."""
    tag = struct.pack("<HH", 0x0002, 0x0010) + b"UI"
    start = data.index(tag)
    (length,) = struct.unpack_from("<H", data, start + 6)
    assert data[start + 8 : start + 8 + length] == original
    value = uid.encode()
    if len(value) % 2:
        value += b"\x00"
    element = tag + struct.pack("<H", len(value)) + value
    patched = bytearray(data[:start] + element + data[start + 8 + length :])
    group_length_at = 128 + 4 + 8
    (group_length,) = struct.unpack_from("<I", patched, group_length_at)
    struct.pack_into("<I", patched, group_length_at, group_length + len(value) - length)
    return bytes(patched)


def test_emit_rejects_bad_input() -> None:
    with pytest.raises(ArgumentError):
        emit_dicom_lite(np.zeros((2, 2, 2), dtype=np.uint8))
    with pytest.raises(ArgumentError):
        emit_dicom_lite(np.array([[256]]), bits=8)
    with pytest.raises(ArgumentError):
        emit_dicom_lite(np.zeros((2, 2), dtype=np.uint8), bits=12)


def test_sixteen_bit_scaling_through_decoder() -> None:
    values = np.array([[0, 1], [128, 255]], dtype=np.uint16)
    eight = decode_image(emit_dicom_lite(values.astype(np.uint8), 8))
    sixteen = decode_image(emit_dicom_lite(values * 257, 16))

    assert eight.max_value == 255
    assert sixteen.max_value == 65535
    assert np.array_equal(eight.pixels.numpy() / 255, sixteen.pixels.numpy() / 65535)


def test_load_missing_file(tmp_path: Path) -> None:
    with pytest.raises(MissingFileError):
        load_dicom_lite(tmp_path / "missing.dcm")


def test_readable_by_pydicom() -> None:
    pydicom = pytest.importorskip("pydicom")
    pixels = np.arange(20, dtype=np.uint16).reshape(4, 5) * 1000
    dataset = pydicom.dcmread(io.BytesIO(emit_dicom_lite(pixels, 16)))

    assert dataset.Rows == 4
    assert dataset.Columns == 5
    assert dataset.BitsAllocated == 16
    assert dataset.file_meta.TransferSyntaxUID == EXPLICIT_VR_LITTLE_ENDIAN
    assert np.array_equal(np.frombuffer(dataset.PixelData, dtype="<u2").reshape(4, 5), pixels)
