import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fhgs.ingestion import build_initial_scene
from fhgs.scene import (GaussianScene, InvalidParameterError, decode_frame,
                        decode_frames, frame_jacobians, sigmoid, validate_scene)

from conftest import make_camera, make_random_scene, random_quats


def test_decode_frame_identity():
    t_u, t_v, t_w = decode_frame([1.0, 0.0, 0.0, 0.0])
    np.testing.assert_array_equal(t_u, [1, 0, 0])
    np.testing.assert_array_equal(t_v, [0, 1, 0])
    np.testing.assert_array_equal(t_w, [0, 0, 1])


def test_decode_frame_quarter_turn_about_z():
    s = np.sin(np.pi / 4)
    t_u, t_v, t_w = decode_frame([np.cos(np.pi / 4), 0.0, 0.0, s])
    np.testing.assert_allclose(t_u, [0, 1, 0], atol=1e-12)
    np.testing.assert_allclose(t_v, [-1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(t_w, [0, 0, 1], atol=1e-12)


def test_decode_frames_orthonormal_sweep():
    rng = np.random.default_rng(0)
    q = random_quats(rng, 1000)
    R = decode_frames(q)
    eye = np.einsum("nij,nkj->nik", R, R)
    assert np.max(np.abs(eye - np.eye(3))) < 1e-12
    cross = np.cross(R[:, :, 0], R[:, :, 1], axis=1)
    assert np.max(np.abs(cross - R[:, :, 2])) < 1e-6


@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4))
def test_decode_frame_right_handed(qvals):
    q = np.array(qvals)
    if np.linalg.norm(q) < 1e-3:
        q = np.array([1.0, 0, 0, 0])
    t_u, t_v, t_w = decode_frame(q)
    np.testing.assert_allclose(np.cross(t_u, t_v), t_w, atol=1e-9)
    assert abs(np.linalg.norm(t_u) - 1) < 1e-9


def test_decode_frame_renormalizes():
    t_u, _, _ = decode_frame([1.0005, 0.0, 0.0, 0.0])
    np.testing.assert_allclose(t_u, [1, 0, 0], atol=1e-12)


@pytest.mark.parametrize("bad", [[np.nan, 0, 0, 0], [1, np.inf, 0, 0]])
def test_decode_frame_rejects_nonfinite(bad):
    with pytest.raises(InvalidParameterError):
        decode_frame(bad)


def test_decode_frame_rejects_zero_norm():
    with pytest.raises(InvalidParameterError):
        decode_frame([0.0, 0.0, 0.0, 0.0])


def test_frame_jacobians_match_finite_differences():
    rng = np.random.default_rng(3)
    q = random_quats(rng, 20)
    dt_u, dt_v, dt_w = frame_jacobians(q)
    h = 1e-7
    for n in range(5):
        for j in range(4):
            qp, qm = q[n].copy(), q[n].copy()
            qp[j] += h
            qm[j] -= h
            # differentiate the raw polynomial map, before renormalization
            def poly(qq):
                w, x, y, z = qq
                return np.array([
                    [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                    [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                    [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
                ])
            fd = (poly(qp) - poly(qm)) / (2 * h)
            np.testing.assert_allclose(dt_u[n, :, j], fd[:, 0], atol=1e-6)
            np.testing.assert_allclose(dt_v[n, :, j], fd[:, 1], atol=1e-6)
            np.testing.assert_allclose(dt_w[n, :, j], fd[:, 2], atol=1e-6)


def test_primitive_invariants_by_construction():
    scene = make_random_scene(10, d=4, seed=5)
    p = scene.primitive(3)
    assert np.all(p.scales > 0)
    assert 0 < p.opacity < 1
    assert abs(np.linalg.norm(p.feature) - 1) < 1e-6


def test_scene_roundtrip_primitives():
    scene = make_random_scene(7, d=4, seed=2)
    rebuilt = GaussianScene.from_primitives([scene.primitive(i) for i in range(7)])
    for name in ("positions", "rotations", "log_scales", "opacity_logits", "colors", "features"):
        np.testing.assert_array_equal(getattr(scene, name), getattr(rebuilt, name))


def test_feature_checksum_tracks_bits():
    scene = make_random_scene(5, d=4, seed=1)
    before = scene.feature_checksum()
    scene.positions += 1.0
    assert scene.feature_checksum() == before
    scene.features[0, 0] = np.float32(scene.features[0, 0]) + np.float32(1e-6)
    assert scene.feature_checksum() != before


def test_validate_scene_clean(tiny_init):
    assert validate_scene(tiny_init) == []


def test_validate_scene_flags_scaled_feature(tiny_init):
    import copy
    init = copy.deepcopy(tiny_init)
    vid = init.cameras[0].id
    init.feature_maps[vid].data[0, 0] *= 2.0
    problems = validate_scene(init)
    assert any("non-unit feature" in p for p in problems)


def test_validate_scene_flags_improper_rotation(tiny_init):
    import copy
    init = copy.deepcopy(tiny_init)
    W = np.asarray(init.cameras[0].world_to_camera).copy()
    W[:3, 0] *= -1  # det -1, still orthonormal
    init.cameras[0].world_to_camera = W
    problems = validate_scene(init)
    assert any("improper rotation" in p for p in problems)


def test_camera_violations_bad_intrinsics():
    cam = make_camera()
    cam.fx = -1.0
    assert any("focal" in v for v in cam.violations())


def test_sigmoid_stable_extremes():
    assert sigmoid(np.float64(800.0)) == 1.0
    assert sigmoid(np.float64(-800.0)) == 0.0
    assert abs(sigmoid(np.float64(0.0)) - 0.5) < 1e-15
