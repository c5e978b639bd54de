import gzip
import struct

import nibabel as nib
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from augment3d.volume import (
    BadDim,
    BadMagic,
    TruncatedPayload,
    UnsupportedDatatype,
    Volume3,
    build_header,
    minmax,
    read_nifti,
    write_nifti,
)


def nib_write(path, data, slope=None, inter=None, dtype=None):
    img = nib.Nifti1Image(data if dtype is None else data.astype(dtype), np.eye(4))
    if dtype is not None:
        img.set_data_dtype(dtype)
    if slope is not None:
        img.header.set_slope_inter(slope, inter)
    nib.save(img, str(path))


def test_reads_full_size_volume_written_by_nibabel(tmp_path, rng):
    data = rng.normal(size=(61, 73, 61)).astype(np.float32)
    assert data.size == 271_633
    nib_write(tmp_path / "reho.nii.gz", data)
    vol, meta = read_nifti(tmp_path / "reho.nii.gz")
    assert vol.shape == (61, 73, 61)
    assert meta.datatype == 16
    np.testing.assert_array_equal(vol.data, data)


def test_nan_and_inf_become_zero(tmp_path):
    data = np.ones((3, 3, 3), dtype=np.float32)
    data[0, 0, 0] = np.nan
    data[1, 2, 0] = np.inf
    nib_write(tmp_path / "a.nii", data)
    vol, _ = read_nifti(tmp_path / "a.nii")
    assert vol.data[0, 0, 0] == 0.0
    assert vol.data[1, 2, 0] == 0.0
    assert np.isfinite(vol.data).all()


@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.int32, np.float32, np.float64])
def test_supported_datatypes_with_scaling(tmp_path, dtype):
    raw = np.arange(24).reshape(2, 3, 4)
    nib_write(tmp_path / "s.nii", raw, slope=0.5, inter=-1.0, dtype=dtype)
    vol, meta = read_nifti(tmp_path / "s.nii")
    assert vol.data.dtype == np.float32
    # independent decoder: nibabel applies the same scaling rule
    expected = np.asarray(nib.load(str(tmp_path / "s.nii")).dataobj, dtype=np.float64)
    np.testing.assert_allclose(vol.data, expected.astype(np.float32))
    np.testing.assert_allclose(vol.data, raw * 0.5 - 1.0)


def test_zero_slope_means_unscaled(tmp_path):
    data = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    write_nifti(Volume3(data), tmp_path / "z.nii")
    raw = bytearray((tmp_path / "z.nii").read_bytes())
    struct.pack_into("<ff", raw, 112, 0.0, 5.0)
    (tmp_path / "z.nii").write_bytes(bytes(raw))
    vol, _ = read_nifti(tmp_path / "z.nii")
    np.testing.assert_array_equal(vol.data, data)


def test_x_fastest_ordering_matches_nibabel(tmp_path, rng):
    data = rng.normal(size=(4, 5, 6)).astype(np.float32)
    write_nifti(Volume3(data), tmp_path / "o.nii")
    np.testing.assert_array_equal(np.asarray(nib.load(str(tmp_path / "o.nii")).dataobj), data)
    vol = Volume3(data)
    assert vol.voxels[1] == data[1, 0, 0]
    assert vol.voxels[4] == data[0, 1, 0]


def test_write_size_rule(tmp_path):
    write_nifti(Volume3.zeros((2, 2, 2)), tmp_path / "z.nii", gzip=False)
    assert (tmp_path / "z.nii").stat().st_size == 352 + 32


def test_written_header_fields(tmp_path):
    write_nifti(Volume3.zeros((61, 73, 61)), tmp_path / "h.nii")
    raw = (tmp_path / "h.nii").read_bytes()
    assert struct.unpack_from("<i", raw, 0)[0] == 348
    assert struct.unpack_from("<8h", raw, 40) == (3, 61, 73, 61, 1, 1, 1, 1)
    assert struct.unpack_from("<h", raw, 70)[0] == 16
    assert struct.unpack_from("<3f", raw, 108) == (352.0, 1.0, 0.0)
    assert raw[344:348] == b"n+1\x00"
    assert raw[348:352] == b"\x00" * 4
    hdr = nib.load(str(tmp_path / "h.nii")).header
    assert hdr["dim"].tolist() == [3, 61, 73, 61, 1, 1, 1, 1]


def test_gzip_output_is_detected_and_deterministic(tmp_path, rng):
    vol = Volume3(rng.normal(size=(5, 4, 3)))
    write_nifti(vol, tmp_path / "a.nii.gz", gzip=True)
    write_nifti(vol, tmp_path / "b.nii.gz", gzip=True)
    raw = (tmp_path / "a.nii.gz").read_bytes()
    assert raw[:2] == b"\x1f\x8b"
    assert raw == (tmp_path / "b.nii.gz").read_bytes()
    assert read_nifti(tmp_path / "a.nii.gz")[0] == vol


def test_big_endian_file(tmp_path, rng):
    data = rng.normal(size=(3, 4, 5)).astype(np.float32)
    hdr = bytearray(352)
    struct.pack_into(">i", hdr, 0, 348)
    struct.pack_into(">8h", hdr, 40, 3, 3, 4, 5, 1, 1, 1, 1)
    struct.pack_into(">hh", hdr, 70, 16, 32)
    struct.pack_into(">3f", hdr, 108, 352.0, 1.0, 0.0)
    hdr[344:348] = b"n+1\x00"
    payload = data.ravel(order="F").astype(">f4").tobytes()
    (tmp_path / "be.nii").write_bytes(bytes(hdr) + payload)
    vol, meta = read_nifti(tmp_path / "be.nii")
    assert meta.byteorder == ">"
    np.testing.assert_array_equal(vol.data, data)


def test_singleton_fourth_dim_accepted(tmp_path):
    data = np.arange(8, dtype=np.float32).reshape(2, 2, 2, 1)
    nib_write(tmp_path / "t.nii", data)
    vol, meta = read_nifti(tmp_path / "t.nii")
    assert meta.dim[0] == 4 and vol.shape == (2, 2, 2)


def test_error_bad_magic(tmp_path):
    (tmp_path / "x.nii").write_bytes(b"\x00" * 400)
    with pytest.raises(BadMagic):
        read_nifti(tmp_path / "x.nii")
    raw = bytearray(build_header((2, 2, 2)) + b"\x00" * 32)
    raw[344:348] = b"ni1\x00"  # header/image pair flavour
    (tmp_path / "pair.nii").write_bytes(bytes(raw))
    with pytest.raises(BadMagic):
        read_nifti(tmp_path / "pair.nii")


def test_error_unsupported_datatype(tmp_path):
    raw = bytearray(build_header((2, 2, 2)) + b"\x00" * 64)
    struct.pack_into("<h", raw, 70, 512)  # uint16
    (tmp_path / "u.nii").write_bytes(bytes(raw))
    with pytest.raises(UnsupportedDatatype):
        read_nifti(tmp_path / "u.nii")


def test_error_truncated(tmp_path):
    (tmp_path / "t.nii").write_bytes(build_header((2, 2, 2)) + b"\x00" * 31)
    with pytest.raises(TruncatedPayload):
        read_nifti(tmp_path / "t.nii")
    full = gzip.compress(build_header((2, 2, 2)) + b"\x00" * 32)
    (tmp_path / "t.nii.gz").write_bytes(full[:-10])
    with pytest.raises(TruncatedPayload):
        read_nifti(tmp_path / "t.nii.gz")


@pytest.mark.parametrize("dims", [(2, 4, 4, 1, 1, 1, 1, 1), (4, 2, 2, 2, 3, 1, 1, 1), (5, 2, 2, 2, 1, 1, 1, 1)])
def test_error_bad_dim(tmp_path, dims):
    raw = bytearray(build_header((2, 2, 2)) + b"\x00" * 400)
    struct.pack_into("<8h", raw, 40, *dims)
    (tmp_path / "d.nii").write_bytes(bytes(raw))
    with pytest.raises(BadDim):
        read_nifti(tmp_path / "d.nii")


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(OSError):
        read_nifti(tmp_path / "nope.nii")


def test_reading_twice_is_identical(tmp_path, rng):
    write_nifti(Volume3(rng.normal(size=(4, 4, 4))), tmp_path / "r.nii.gz", gzip=True)
    assert read_nifti(tmp_path / "r.nii.gz")[0] == read_nifti(tmp_path / "r.nii.gz")[0]


finite32 = st.floats(allow_nan=False, allow_infinity=False, width=32)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)), elements=finite32),
    st.booleans(),
)
def test_round_trip_property(tmp_path_factory, data, compress):
    path = tmp_path_factory.mktemp("rt") / ("v.nii.gz" if compress else "v.nii")
    vol = Volume3(data)
    write_nifti(vol, path, gzip=compress)
    back, _ = read_nifti(path)
    assert back.voxels.tobytes() == vol.voxels.tobytes()


def test_minmax():
    assert minmax(Volume3.zeros((2, 2, 2))) == (0.0, 0.0)
    assert minmax(Volume3(np.array([-1.0, 0.0, 2.0]).reshape(3, 1, 1))) == (-1.0, 2.0)
    assert minmax(Volume3(np.full((2, 3, 1), 3.5))) == (3.5, 3.5)


def test_volume_rejects_non_finite_and_is_immutable():
    with pytest.raises(ValueError):
        Volume3(np.full((2, 2, 2), np.nan))
    vol = Volume3.zeros((2, 2, 2))
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1.0
