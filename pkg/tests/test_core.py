import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srqh import core
from srqh.core import CodingConfig, InvalidInput, InvalidParameter, PointCloud, RangeError, SparseTensor

coord_sets = st.lists(st.tuples(*[st.integers(0, 255)] * 3), min_size=1, max_size=200)


def pc_of(pts):
    return PointCloud.from_points(np.array(pts, dtype=np.int64))


class TestScaling:
    def test_identity(self):
        np.testing.assert_array_equal(core.downscale_coords(pc_of([(4, 4, 4)]), 1).points, [[4, 4, 4]])

    def test_half_rounds_away_from_zero(self):
        np.testing.assert_array_equal(core.downscale_coords(pc_of([(7, 7, 7)]), 2).points, [[4, 4, 4]])

    def test_dedup(self):
        np.testing.assert_array_equal(core.downscale_coords(pc_of([(8, 8, 8), (9, 9, 9)]), 4).points, [[2, 2, 2]])

    def test_rejects_non_power_of_two(self):
        with pytest.raises(InvalidParameter):
            core.downscale_coords(pc_of([(1, 1, 1)]), 3)

    def test_upscale(self):
        np.testing.assert_array_equal(core.upscale_coords([[4, 4, 4]], 1), [[4, 4, 4]])
        np.testing.assert_array_equal(core.upscale_coords([[2, 3, 4]], 2), [[4, 6, 8]])

    def test_upscale_overflow(self):
        with pytest.raises(RangeError):
            core.upscale_coords([[2 ** 20, 0, 0]], 2)

    @given(coord_sets, st.sampled_from([1, 2, 4, 8]))
    def test_down_after_up_is_identity(self, pts, f):
        pc = pc_of(pts)
        up = PointCloud.from_points(core.upscale_coords(pc.points, f))
        np.testing.assert_array_equal(core.downscale_coords(up, f).points, pc.points)


class TestBlocks:
    def test_single_block(self):
        blocks = core.split_blocks(pc_of([(5, 5, 5)]), 128)
        assert len(blocks) == 1
        np.testing.assert_array_equal(blocks[0].origin, [0, 0, 0])

    def test_two_blocks(self):
        blocks = core.split_blocks(pc_of([(5, 5, 5), (130, 0, 0)]), 128)
        np.testing.assert_array_equal([b.origin for b in blocks], [[0, 0, 0], [128, 0, 0]])

    def test_empty(self):
        assert core.split_blocks(PointCloud(np.zeros((0, 3))), 8) == []

    @given(coord_sets, st.sampled_from([4, 16, 64]))
    def test_round_trip_and_morton_order(self, pts, bs):
        pc = pc_of(pts)
        blocks = core.split_blocks(pc, bs)
        np.testing.assert_array_equal(core.merge_blocks(blocks).points, pc.points)
        ids = [b.index for b in blocks]
        assert ids == sorted(ids)
        for b in blocks:
            assert b.tensor.coords.max() < bs and np.all(b.origin % bs == 0)
            np.testing.assert_array_equal(core.morton_code(b.origin[None] // bs), [b.index])

    def test_merge_rejects_overlap(self):
        b = core.split_blocks(pc_of([(1, 1, 1)]), 8)[0]
        with pytest.raises(InvalidInput):
            core.merge_blocks([b, b])


class TestCandidates:
    def test_origin_children(self):
        np.testing.assert_array_equal(core.child_candidates([[0, 0, 0]]), core.CHILD_OFFSETS)

    def test_offset_children(self):
        kids = core.child_candidates([[1, 2, 3]])
        np.testing.assert_array_equal(kids, 2 * np.array([[1, 2, 3]]) + core.CHILD_OFFSETS)

    @given(coord_sets)
    def test_count_disjoint_and_parents(self, pts):
        s = pc_of(pts).points
        kids = core.child_candidates(s)
        assert len(kids) == 8 * len(s)
        assert core.is_sorted_unique(kids)
        # parents on the coarse grid are recovered by floor division
        np.testing.assert_array_equal(core.sort_unique(kids >> 1), s)

    def test_labels(self):
        cand = core.child_candidates([[0, 0, 0]])
        lab = core.occupancy_labels(cand, [[0, 0, 0], [1, 1, 1]])
        np.testing.assert_array_equal(lab, [1, 0, 0, 0, 0, 0, 0, 1])
        np.testing.assert_array_equal(core.occupancy_labels(cand, cand), np.ones(8))

    def test_labels_structural_mismatch(self):
        with pytest.raises(core.StructuralMismatch):
            core.occupancy_labels(core.child_candidates([[0, 0, 0]]), [[5, 5, 5]])

    def test_labels_random_oracle(self):
        rng = np.random.default_rng(1)
        cand = core.child_candidates(core.sort_unique(rng.integers(0, 32, (300, 3))))
        tgt = cand[rng.random(len(cand)) < 0.3]
        lab = core.occupancy_labels(cand, tgt)
        tset = {tuple(t) for t in tgt}
        np.testing.assert_array_equal(lab, [int(tuple(c) in tset) for c in cand])

    @given(coord_sets)
    def test_parent_covered_count(self, pts):
        t = pc_of(pts).points
        lab = core.occupancy_labels(core.child_candidates(core.sort_unique(t >> 1)), t)
        assert lab.sum() == len(t)


class TestTopK:
    def test_basic(self):
        t = SparseTensor(np.array([[0, 0, 0], [0, 0, 1], [0, 0, 2]]), np.array([[0.9], [0.2], [0.5]]))
        np.testing.assert_array_equal(core.top_k_select(t, 2), [[0, 0, 0], [0, 0, 2]])
        np.testing.assert_array_equal(core.top_k_select(t, 3), t.coords)

    def test_tie_smaller_coord_wins(self):
        t = SparseTensor(np.array([[0, 0, 0], [0, 0, 1], [0, 0, 2]]), np.array([[0.5], [0.5], [0.5]]))
        np.testing.assert_array_equal(core.top_k_select(t, 1), [[0, 0, 0]])

    def test_k_out_of_range(self):
        t = SparseTensor(np.array([[0, 0, 0]]), np.array([[0.5]]))
        with pytest.raises(InvalidParameter):
            core.top_k_select(t, 2)

    def test_sort_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            c = core.sort_unique(rng.integers(0, 16, (100, 3)))
            p = rng.integers(0, 10, len(c)) / 10.0  # many ties
            k = len(c) // 2
            got = core.top_k_select(SparseTensor(c, p[:, None]), k)
            order = sorted(range(len(c)), key=lambda i: (-p[i], tuple(c[i])))[:k]
            np.testing.assert_array_equal(got, core.sort_unique(c[order]))


class TestKnn:
    def test_examples(self):
        np.testing.assert_array_equal(core.knn([[0, 0, 0]], [[0, 0, 0]], 1), [[0]])
        np.testing.assert_array_equal(core.knn([[0, 0, 0]], [[1, 0, 0], [3, 0, 0]], 2), [[0, 1]])

    def test_empty_refs(self):
        with pytest.raises(InvalidInput):
            core.knn([[0, 0, 0]], np.zeros((0, 3)), 1)

    def test_padding_repeats_nearest(self):
        np.testing.assert_array_equal(core.knn([[0, 0, 0]], [[2, 0, 0], [1, 0, 0]], 4), [[1, 0, 1, 1]])

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        refs = rng.integers(0, 20, (500, 3))
        q = rng.integers(0, 20, (50, 3))
        got = core.knn(q, refs, 5)
        for qi, row in zip(q, got):
            d = [int(((qi - r) ** 2).sum()) for r in refs]
            want = sorted(range(len(refs)), key=lambda i: (d[i], i))[:5]
            np.testing.assert_array_equal(row, want)


class TestConfig:
    def test_parse_chain(self):
        chain = core.parse_chain("5,4,T;4,2,T;3,1,F")
        assert chain == [CodingConfig(5, 4, True), CodingConfig(4, 2, True), CodingConfig(3, 1, False)]
        assert str(chain[0]) == "5,4,T"

    @pytest.mark.parametrize("text", ["0,1,F", "6,1,F", "3,3,F", "3", "3,1,X"])
    def test_bad_configs(self, text):
        with pytest.raises(InvalidParameter):
            CodingConfig.parse(text)

    def test_coordinate_range(self):
        with pytest.raises(RangeError):
            core.check_coords([[2 ** 21, 0, 0]])

    def test_sparse_tensor_invariants(self):
        with pytest.raises(InvalidInput):
            SparseTensor(np.array([[1, 0, 0], [0, 0, 0]]), np.zeros((2, 1))).validate()
        with pytest.raises(InvalidInput):
            SparseTensor(np.array([[0, 0, 0]]), np.zeros((2, 1)))

    @settings(max_examples=50)
    @given(coord_sets)
    def test_pack_round_trip(self, pts):
        c = np.array(pts, dtype=np.int64)
        np.testing.assert_array_equal(core.unpack(core.pack(c)), c)
        np.testing.assert_array_equal(core.morton_decode(core.morton_code(c)), c)
