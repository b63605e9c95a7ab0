import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gaitstr.errors import DegeneratePoseError, InsufficientFramesError, InvalidInputError
from gaitstr.skeleton import (
    COCO17,
    OPENPOSE18,
    SYNTH13,
    BoneSequence,
    JointSequence,
    SkeletonTopology,
    bones_to_joints,
    decode_skeleton_archive,
    encode_skeleton_archive,
    gaussian_kernel,
    get_topology,
    inject_jitter,
    joints_to_bones,
    normalize_skeleton,
    read_skeleton_jsonl,
    select_frame_indices,
    select_frames,
    smooth_average,
    smooth_gaussian,
    write_skeleton_jsonl,
)

from oracles import bones_loop

CHAIN = SkeletonTopology("chain3", 3, ((0, 1), (1, 2)), 0)
PAIR = SkeletonTopology("pair", 2, ((0, 1),), 0)

coords = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def joint_arrays(k=13, max_t=6):
    return st.integers(1, max_t).flatmap(lambda t: arrays(np.float64, (t, k, 2), elements=coords))


def random_joints(t=5, topo=SYNTH13, seed=0):
    return JointSequence(np.random.default_rng(seed).normal(size=(t, topo.num_joints, 2)), topo)


# --- topologies -------------------------------------------------------------------------


@pytest.mark.parametrize("topo, k", [(SYNTH13, 13), (COCO17, 17), (OPENPOSE18, 18)])
def test_builtin_topologies_are_spanning_trees(topo, k):
    assert topo.num_joints == k
    assert topo.num_bones == k - 1
    assert sorted(topo.children().tolist() + [topo.root]) == list(range(k))
    assert get_topology(topo.name) is topo


@pytest.mark.parametrize("edges", [
    ((0, 1), (1, 0)),            # cycle, root is a child
    ((0, 1), (0, 1)),            # duplicate child
    ((0, 1),),                   # too few edges for 3 joints
    ((0, 1), (1, 5)),            # index out of range
])
def test_invalid_topologies_rejected(edges):
    with pytest.raises(InvalidInputError):
        SkeletonTopology("bad", 3, edges, 0)


def test_unknown_topology_name():
    with pytest.raises(InvalidInputError):
        get_topology("mpii16")


def test_sequence_validation():
    with pytest.raises(InvalidInputError):
        JointSequence(np.zeros((2, 12, 2)), SYNTH13)
    with pytest.raises(InvalidInputError):
        JointSequence(np.full((2, 13, 2), np.nan), SYNTH13)
    with pytest.raises(InvalidInputError):
        BoneSequence(np.zeros((2, 13, 2)), SYNTH13)


# --- joints <-> bones ---------------------------------------------------------------------


def test_single_edge_bone():
    bones = joints_to_bones(JointSequence(np.array([[[0.0, 0.0], [0.0, 1.0]]]), PAIR))
    np.testing.assert_array_equal(bones.data, [[[0.0, 1.0]]])


def test_collapsed_pose_gives_zero_bones():
    bones = joints_to_bones(JointSequence(np.zeros((3, 13, 2)), SYNTH13))
    assert not bones.data.any()


def test_bones_match_loop_oracle():
    j = random_joints(3)
    np.testing.assert_array_equal(joints_to_bones(j).data, bones_loop(j.data, SYNTH13.edges))


def test_zero_bones_collapse_to_root():
    bones = BoneSequence(np.zeros((2, 12, 2)), SYNTH13)
    joints = bones_to_joints(bones, np.full((2, 2), 5.0))
    assert np.all(joints.data == 5.0)


def test_chain_path_sum():
    bones = BoneSequence(np.array([[[1.0, 0.0], [0.0, 1.0]]]), CHAIN)
    joints = bones_to_joints(bones, np.zeros((1, 2)))
    np.testing.assert_array_equal(joints.data[0], [[0, 0], [1, 0], [1, 1]])


def test_bones_to_joints_rejects_wrong_root_count():
    with pytest.raises(InvalidInputError):
        bones_to_joints(BoneSequence(np.zeros((2, 12, 2)), SYNTH13), np.zeros((3, 2)))


@pytest.mark.parametrize("topo", [SYNTH13, COCO17, OPENPOSE18])
@settings(max_examples=30, deadline=None)
@given(data=st.data())
def test_round_trip_property(topo, data):
    arr = data.draw(joint_arrays(topo.num_joints))
    j = JointSequence(arr, topo)
    back = bones_to_joints(joints_to_bones(j), j.roots())
    np.testing.assert_allclose(back.data, arr, atol=1e-9, rtol=0)


# --- normalization ------------------------------------------------------------------------


def test_normalize_worked_example():
    # bounding box (1, 0) .. (3, 4): height 4, centre (2, 2)
    frame = np.array([[1.0, 0.0], [3.0, 4.0], [2.0, 1.0]])
    out = normalize_skeleton(JointSequence(frame[None], CHAIN)).data[0]
    np.testing.assert_allclose(out, [[-0.5, -1.0], [0.5, 1.0], [0.0, -0.5]])
    assert out[:, 1].max() == 1.0


def test_normalize_degenerate_frame():
    data = np.zeros((2, 3, 2))
    data[0, :, 1] = [0, 1, 2]
    with pytest.raises(DegeneratePoseError):
        normalize_skeleton(JointSequence(data, CHAIN))


def _has_height(arr):
    return bool(np.all(np.ptp(arr[..., 1], axis=1) > 1e-3))


@settings(max_examples=60, deadline=None)
@given(joint_arrays(), st.floats(0.1, 10), st.floats(-5, 5), st.floats(-5, 5))
def test_normalize_properties(arr, scale, dx, dy):
    if not _has_height(arr):
        return
    j = JointSequence(arr, SYNTH13)
    n = normalize_skeleton(j)
    lo, hi = n.data.min(axis=1), n.data.max(axis=1)
    np.testing.assert_allclose((lo + hi) / 2, 0.0, atol=1e-9)
    np.testing.assert_allclose(hi[:, 1] - lo[:, 1], 2.0, atol=1e-9)
    np.testing.assert_allclose(normalize_skeleton(n).data, n.data, atol=1e-9)
    moved = JointSequence(arr * scale + np.array([dx, dy]), SYNTH13)
    np.testing.assert_allclose(normalize_skeleton(moved).data, n.data, atol=1e-8)


# --- frame selection ----------------------------------------------------------------------


def test_center_selection():
    np.testing.assert_array_equal(select_frame_indices(100, 60, "center"), np.arange(20, 80))
    # odd slack: the extra frame is dropped on the right
    np.testing.assert_array_equal(select_frame_indices(7, 4, "center"), [1, 2, 3, 4])


def test_repeat_selection():
    expected = list(range(10)) * 2 + list(range(5))
    np.testing.assert_array_equal(select_frame_indices(10, 25, "repeat"), expected)
    np.testing.assert_array_equal(select_frame_indices(30, 25, "repeat"), np.arange(25))


@pytest.mark.parametrize("mode", ["center", "repeat"])
def test_selection_identity_when_lengths_match(mode):
    j = random_joints(6)
    np.testing.assert_array_equal(select_frames(j, 6, mode).data, j.data)


def test_selection_errors():
    with pytest.raises(InsufficientFramesError):
        select_frame_indices(5, 6, "center")
    with pytest.raises(InvalidInputError):
        select_frame_indices(5, 3, "middle")
    with pytest.raises(InvalidInputError):
        select_frame_indices(0, 3, "repeat")


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40))
def test_center_is_contiguous_slice(t, n):
    if t < n:
        return
    idx = select_frame_indices(t, n, "center")
    assert len(idx) == n
    assert np.all(np.diff(idx) == 1)
    assert idx[0] == (t - n) // 2


# --- jitter ------------------------------------------------------------------------------


def test_jitter_frame_count():
    j = random_joints(60)
    out, mask = inject_jitter(j, 0.1, 0.2, seed=3)
    assert mask.any(axis=1).sum() == 6
    changed = np.any(out.data != j.data, axis=2)
    assert np.array_equal(changed, mask)
    assert np.abs(out.data - j.data).max() <= 0.2


def test_jitter_zero_rate_and_magnitude():
    j = random_joints(20)
    out, mask = inject_jitter(j, 0.0, 0.5, seed=1)
    assert np.array_equal(out.data, j.data) and not mask.any()
    out, mask = inject_jitter(j, 0.5, 0.0, seed=1)
    assert np.array_equal(out.data, j.data) and mask.any()


def test_jitter_deterministic_and_validated():
    j = random_joints(20)
    a, ma = inject_jitter(j, 0.3, 0.1, seed=9)
    b, mb = inject_jitter(j, 0.3, 0.1, seed=9)
    assert np.array_equal(a.data, b.data) and np.array_equal(ma, mb)
    with pytest.raises(InvalidInputError):
        inject_jitter(j, 1.5, 0.1, seed=0)
    with pytest.raises(InvalidInputError):
        inject_jitter(j, 0.1, -1.0, seed=0)


# --- smoothing ----------------------------------------------------------------------------


def test_smoothing_preserves_constants():
    j = JointSequence(np.full((7, 13, 2), 3.25), SYNTH13)
    assert np.array_equal(smooth_average(j).data, j.data)
    np.testing.assert_allclose(smooth_gaussian(j).data, j.data, atol=1e-15)


def test_window_one_is_identity():
    j = random_joints(7)
    np.testing.assert_array_equal(smooth_average(j, 1).data, j.data)
    np.testing.assert_array_equal(smooth_gaussian(j, 1).data, j.data)


def test_box_impulse_response():
    data = np.zeros((7, 2, 2))
    data[3, 1, 0] = 1.0
    out = smooth_average(JointSequence(data, PAIR)).data[:, 1, 0]
    np.testing.assert_allclose(out, [0, 0, 1 / 3, 1 / 3, 1 / 3, 0, 0])


def test_edges_replicated():
    data = np.zeros((4, 2, 2))
    data[0] = 1.0
    out = smooth_average(JointSequence(data, PAIR)).data[:, 0, 0]
    # frame 0 sees (replicated 1, 1, 0)
    np.testing.assert_allclose(out, [2 / 3, 1 / 3, 0, 0])


def test_gaussian_kernel():
    k = gaussian_kernel(3, 1.0)
    w = np.exp(-0.5)
    np.testing.assert_allclose(k, np.array([w, 1.0, w]) / (1 + 2 * w))


def test_even_window_rejected():
    with pytest.raises(InvalidInputError):
        smooth_average(random_joints(5), 2)
    with pytest.raises(InvalidInputError):
        smooth_gaussian(random_joints(5), 4)
    with pytest.raises(InvalidInputError):
        smooth_gaussian(random_joints(5), 3, sigma=0.0)


# --- archives -----------------------------------------------------------------------------


def test_binary_archive_round_trip_and_layout():
    j = random_joints(4)
    blob = encode_skeleton_archive(j)
    assert blob[:4] == b"GSKL"
    back = decode_skeleton_archive(blob)
    assert isinstance(back, JointSequence) and back.topology is SYNTH13
    np.testing.assert_array_equal(back.data, j.data.astype(np.float32))
    bones = decode_skeleton_archive(encode_skeleton_archive(joints_to_bones(j)))
    assert isinstance(bones, BoneSequence)


def test_binary_archive_rejects_garbage():
    with pytest.raises(InvalidInputError):
        decode_skeleton_archive(b"NOPE" + bytes(40))
    blob = encode_skeleton_archive(random_joints(4))
    with pytest.raises(InvalidInputError):
        decode_skeleton_archive(blob[:-4])


def test_jsonl_archive_round_trip(tmp_path):
    j = random_joints(3)
    path = write_skeleton_jsonl(tmp_path / "s.jsonl", j)
    back = read_skeleton_jsonl(path)
    np.testing.assert_array_equal(back.data, j.data)
