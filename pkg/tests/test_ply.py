import numpy as np
import pytest

from srqh.core import PointCloud, RangeError
from srqh.ply import PlyParseError, read_ply, write_ply


def _write(tmp_path, text, name="a.ply"):
    p = tmp_path / name
    p.write_bytes(text.encode() if isinstance(text, str) else text)
    return p


HEADER = "ply\nformat ascii 1.0\nelement vertex {n}\nproperty float x\nproperty float y\nproperty float z\nend_header\n"


class TestPly:
    def test_ascii_binary_equal(self, tmp_path):
        rng = np.random.default_rng(0)
        pc = PointCloud.from_points(rng.integers(0, 100, (50, 3)), None)
        write_ply(pc, tmp_path / "a.ply")
        write_ply(pc, tmp_path / "b.ply", binary=True)
        a, b = read_ply(tmp_path / "a.ply"), read_ply(tmp_path / "b.ply")
        np.testing.assert_array_equal(a.points, pc.points)
        np.testing.assert_array_equal(b.points, pc.points)

    def test_normals_round_trip(self, tmp_path):
        pts = np.array([[0, 0, 0], [1, 0, 0]])
        nrm = np.array([[0.0, 0.0, 1.0], [0.6, 0.8, 0.0]])
        pc = PointCloud.from_points(pts, nrm)
        for binary in (False, True):
            write_ply(pc, tmp_path / "n.ply", binary=binary)
            back = read_ply(tmp_path / "n.ply")
            np.testing.assert_allclose(back.normals, pc.normals, atol=1e-6)

    def test_rounding_and_scale(self, tmp_path):
        p = _write(tmp_path, HEADER.format(n=3) + "0.5 1.4 2.6\n2.5 0 0\n10 10 10\n")
        pc = read_ply(p)
        assert {tuple(r) for r in pc.points} == {(1, 1, 3), (3, 0, 0), (10, 10, 10)}
        np.testing.assert_array_equal(read_ply(p, scale=0.1).points.max(0), [1, 1, 1])

    def test_negative_coordinates_rejected(self, tmp_path):
        with pytest.raises(RangeError):
            read_ply(_write(tmp_path, HEADER.format(n=1) + "-1 0 0\n"))

    def test_duplicates_merged(self, tmp_path):
        p = _write(tmp_path, HEADER.format(n=2) + "1 1 1\n1.2 0.9 1\n")
        assert len(read_ply(p)) == 1

    def test_comments_and_extra_properties(self, tmp_path):
        text = ("ply\nformat ascii 1.0\ncomment hi\nelement vertex 1\nproperty float x\nproperty float y\n"
                "property float z\nproperty uchar red\nelement face 0\nproperty list uchar int vertex_indices\n"
                "end_header\n1 2 3 255\n")
        np.testing.assert_array_equal(read_ply(_write(tmp_path, text)).points, [[1, 2, 3]])

    def test_missing_magic(self, tmp_path):
        with pytest.raises(PlyParseError) as e:
            read_ply(_write(tmp_path, "plx\nend_header\n"))
        assert e.value.line == 1

    def test_unsupported_format(self, tmp_path):
        with pytest.raises(PlyParseError) as e:
            read_ply(_write(tmp_path, HEADER.replace("ascii", "binary_big_endian").format(n=0)))
        assert e.value.line == 2

    def test_short_ascii_body(self, tmp_path):
        with pytest.raises(PlyParseError) as e:
            read_ply(_write(tmp_path, HEADER.format(n=3) + "1 2 3\n"))
        assert e.value.line is not None

    def test_bad_ascii_value(self, tmp_path):
        with pytest.raises(PlyParseError):
            read_ply(_write(tmp_path, HEADER.format(n=1) + "1 two 3\n"))

    def test_truncated_binary(self, tmp_path):
        pc = PointCloud.from_points(np.arange(30).reshape(10, 3))
        write_ply(pc, tmp_path / "b.ply", binary=True)
        data = (tmp_path / "b.ply").read_bytes()
        with pytest.raises(PlyParseError) as e:
            read_ply(_write(tmp_path, data[:-5], "t.ply"))
        assert e.value.offset is not None

    def test_missing_coordinate(self, tmp_path):
        text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n1 2\n"
        with pytest.raises(PlyParseError):
            read_ply(_write(tmp_path, text))
