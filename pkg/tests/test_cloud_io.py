import struct

import numpy as np
import pytest

from smnet.cloud_io import CloudFormatError, read_cloud, write_cloud


@pytest.mark.parametrize("suffix", [".pcd", ".xyz", ".ply"])
def test_round_trip(tmp_path, suffix):
    pts = np.random.default_rng(0).normal(size=(17, 3)).astype(np.float32).astype(np.float64)
    write_cloud(tmp_path / f"c{suffix}", pts)
    np.testing.assert_allclose(read_cloud(tmp_path / f"c{suffix}").points, pts, rtol=1e-7)


def test_pcd1_layout(tmp_path):
    write_cloud(tmp_path / "c.pcd", [[1, 2, 3]])
    blob = (tmp_path / "c.pcd").read_bytes()
    assert blob[:4] == b"PCD1"
    assert struct.unpack_from("<Q", blob, 4)[0] == 1
    assert struct.unpack_from("<3f", blob, 12) == (1.0, 2.0, 3.0)


def test_pcd1_truncated(tmp_path):
    (tmp_path / "c.pcd").write_bytes(b"PCD1" + struct.pack("<Q", 5) + b"\0" * 12)
    with pytest.raises(CloudFormatError):
        read_cloud(tmp_path / "c.pcd")


def test_ply_with_extra_properties(tmp_path):
    text = """ply
format ascii 1.0
comment made by hand
element vertex 2
property float nx
property float x
property float y
property float z
property uchar red
element face 1
property list uchar int vertex_indices
end_header
9 1 2 3 255
9 4 5 6 0
3 0 1 1
"""
    (tmp_path / "c.ply").write_text(text)
    np.testing.assert_array_equal(read_cloud(tmp_path / "c.ply").points, [[1, 2, 3], [4, 5, 6]])


def test_binary_ply_rejected(tmp_path):
    (tmp_path / "c.ply").write_text("ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(CloudFormatError):
        read_cloud(tmp_path / "c.ply")


def test_xyz_errors_name_the_line(tmp_path):
    (tmp_path / "c.xyz").write_text("1 2 3\n4 5\n")
    with pytest.raises(CloudFormatError, match=":2"):
        read_cloud(tmp_path / "c.xyz")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.xyz"):
        read_cloud(tmp_path / "nope.xyz")
