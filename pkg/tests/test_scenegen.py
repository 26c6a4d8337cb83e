import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqdet3d.geometry import Box3D, iou_bev, range_to_ego, transform_box
from seqdet3d.scenegen import (
    GenConfig,
    GenerationError,
    Scene,
    SceneFormatError,
    format_scene,
    generate_dataset,
    dihedral_scene,
    generate_scene,
    parse_scene,
    point_counts,
    points_in_box,
    read_dataset,
    read_scene,
    write_dataset,
    write_scene,
)
from seqdet3d.tokenizer import OrderingStrategy, VocabLayout, dequantize, encode_scene, quantize

CFG = GenConfig()


def test_empty_scene_has_only_clutter():
    s = generate_scene(GenConfig(k_min=0, k_max=0), seed=3)
    assert s.boxes == [] and len(s.points) > 0
    assert format_scene(Scene("e", np.zeros((0, 4)), [], 0)) == "scene e 0 0 0\n"


def test_same_seed_same_bytes():
    assert format_scene(generate_scene(CFG, 11)) == format_scene(generate_scene(CFG, 11))
    assert format_scene(generate_scene(CFG, 11)) != format_scene(generate_scene(CFG, 12))


def test_scene_invariants():
    lay = VocabLayout()
    for s in generate_dataset(CFG, 30, seed=1):
        assert CFG.k_min <= len(s.boxes) <= CFG.k_max
        assert np.abs(s.points[:, :2]).max() <= CFG.half_extent
        assert all(c >= 1 for c in point_counts(s))
        for i, a in enumerate(s.boxes):
            for b in s.boxes[i + 1 :]:
                assert iou_bev(a, b) < 0.01
            # generated values sit inside the codec ranges, so nothing clamps
            for k in ("x", "y", "z", "l", "w", "h", "vx", "vy"):
                spec = lay.attr(k)
                assert spec.min <= getattr(a, k) < spec.min + spec.bins * spec.width


def test_near_boxes_get_more_points():
    near, far = [], []
    for s in generate_dataset(CFG, 100, seed=2):
        for b, c in zip(s.boxes, point_counts(s)):
            r = range_to_ego(b)
            if r < 15:
                near.append(c)
            elif r > 30:
                far.append(c)
    assert near and far
    assert np.mean(near) > np.mean(far)


def test_crowded_field_of_view_fails():
    with pytest.raises(GenerationError):
        generate_scene(GenConfig(half_extent=4.0, center_margin=1.0, k_min=300, k_max=300), seed=0)


def test_round_trip_files(tmp_path):
    scenes = generate_dataset(CFG, 100, seed=5)
    write_dataset(scenes, tmp_path)
    assert read_dataset(tmp_path) == scenes
    write_scene(scenes[0], tmp_path / "one.scene")
    assert read_scene(tmp_path / "one.scene") == scenes[0]


def test_malformed_files_name_the_problem():
    text = format_scene(generate_scene(CFG, 4))
    lines = text.splitlines()
    with pytest.raises(SceneFormatError, match="expected .* found"):
        parse_scene("\n".join(lines[:-2]) + "\n")
    bad = list(lines)
    bad[3] = "p 1.0 oops 2.0 0.5"
    with pytest.raises(SceneFormatError, match="line 4"):
        parse_scene("\n".join(bad) + "\n")
    with pytest.raises(SceneFormatError, match="line 1"):
        parse_scene("scenery\n")


def test_points_in_box_examples():
    b = Box3D(5.0, 5.0, 0.0, 2.0, 1.0, 1.0, 0.3)
    s = Scene("t", np.array([[5.0, 5.0, 0.0, 0.0], [9.0, 7.0, 0.0, 0.0]]), [b], 0)
    assert points_in_box(s, b) == 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-math.pi, math.pi))
def test_counts_survive_joint_rotation(seed, ang):
    s = generate_scene(CFG, seed)
    c, sn = math.cos(ang), math.sin(ang)
    pts = s.points.copy()
    pts[:, 0], pts[:, 1] = c * s.points[:, 0] - sn * s.points[:, 1], sn * s.points[:, 0] + c * s.points[:, 1]
    rot = Scene(s.scene_id, pts, [transform_box(b, ang) for b in s.boxes], s.seed)
    # points generated on faces sit strictly inside, so rounding cannot flip them
    assert point_counts(rot) == point_counts(s)


def test_dihedral_examples():
    b = Box3D(3.0, 1.0, -1.0, 4.0, 2.0, 1.5, 0.25, 1.0, -0.5, category=2)
    s = Scene("a", np.array([[3.0, 1.0, -1.0, 0.5]]), [b])
    quarter = dihedral_scene(s, 1)
    qb = quarter.boxes[0]
    assert (qb.x, qb.y, qb.vx, qb.vy) == (-1.0, 3.0, 0.5, 1.0)
    assert math.isclose(qb.yaw, 0.25 + math.pi / 2)
    assert quarter.points[0, :2].tolist() == [-1.0, 3.0]
    mb = dihedral_scene(s, 4).boxes[0]
    assert (mb.x, mb.y, mb.vy, mb.yaw) == (3.0, -1.0, 0.5, -0.25)
    assert dihedral_scene(s, 0) is s
    with pytest.raises(ValueError):
        dihedral_scene(s, 8)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 7))
def test_dihedral_keeps_ranges_counts_and_order(seed, k):
    s = generate_scene(CFG, seed)
    t = dihedral_scene(s, k)
    assert t.points.shape == s.points.shape
    assert np.allclose(np.hypot(t.points[:, 0], t.points[:, 1]), np.hypot(s.points[:, 0], s.points[:, 1]))
    assert point_counts(t) == point_counts(s)
    lay = VocabLayout()
    # category and size tokens follow the same near-to-far order
    a, b = encode_scene(s.boxes, OrderingStrategy(), lay), encode_scene(t.boxes, OrderingStrategy(), lay)
    for i in range(1, len(a) - 1, 10):
        assert a[i] == b[i] and a[i + 3 : i + 6] == b[i + 3 : i + 6]
    for box in t.boxes:
        assert abs(box.x) <= CFG.half_extent and abs(box.y) <= CFG.half_extent
