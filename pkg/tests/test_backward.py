import numpy as np
import pytest

from fhgs import backward, rasterizer
from fhgs.backward import (FdReport, GradBuffer, backward_frame, fd_check,
                           grad_alpha, grad_w_lcf, grad_w_lcf_naive, grad_w_lgt)
from fhgs.dual_drive import SimilarityActivation, lcf_bruteforce
from fhgs.rasterizer import RenderOptions, forward_frame

from conftest import make_camera, make_random_scene, random_fragment_arrays


def test_grad_w_lgt_is_sigma():
    assert grad_w_lgt(0.5) == 0.5
    assert grad_w_lgt(0.0) == 0.0


def test_gradbuffer_has_no_feature_slot():
    g = GradBuffer.zeros(3)
    assert not hasattr(g, "features")
    assert {"positions", "rotations", "log_scales", "opacity_logits", "colors"} <= set(vars(g))


def test_grad_w_lcf_single_fragment():
    out = grad_w_lcf(np.array([0.5]), np.array([1.0]), np.array([[1.0, 0.0]]))
    np.testing.assert_array_equal(out, [0.0])


def test_grad_w_lcf_orthogonal_pair_hand_values():
    # far-to-near: fragment 1 farthest; sigma_2 = 1
    w = np.array([0.5, 0.5])
    sigma = np.array([0.7, 1.0])
    f = np.array([[1.0, 0.0], [0.0, 1.0]])
    g = grad_w_lcf(w, sigma, f)
    np.testing.assert_allclose(g, [0.5, 0.5], atol=1e-15)


def test_grad_w_lcf_matches_naive():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(60):
        n = int(rng.integers(0, 48))
        w, sigma, f = random_fragment_arrays(rng, n, 8)
        a = grad_w_lcf(w, sigma, f)
        b = grad_w_lcf_naive(w, sigma, f)
        if n:
            den = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)
            worst = max(worst, float(np.max(np.abs(a - b) / den)))
    assert worst <= 1e-10


def test_grad_w_lcf_matches_finite_differences():
    rng = np.random.default_rng(3)
    h = 1e-6
    worst = 0.0
    for _ in range(25):
        n = int(rng.integers(1, 33))
        w, sigma, f = random_fragment_arrays(rng, n, 8)
        g = grad_w_lcf(w, sigma, f)
        for k in rng.choice(n, size=min(n, 4), replace=False):
            wp, wm = w.copy(), w.copy()
            wp[k] += h
            wm[k] -= h
            fd = (lcf_bruteforce(wp, sigma, f) - lcf_bruteforce(wm, sigma, f)) / (2 * h)
            worst = max(worst, abs(fd - g[k]) / max(abs(fd), abs(g[k]), 1e-9))
    assert worst <= 1e-6


def test_grad_w_lcf_zero_when_all_sigma_zero():
    rng = np.random.default_rng(4)
    w, _, f = random_fragment_arrays(rng, 12, 4)
    np.testing.assert_array_equal(grad_w_lcf(w, np.zeros(12), f), np.zeros(12))


def test_grad_w_lcf_matched_cluster_feels_no_force():
    # a fragment whose own polarity and every nearer fragment's polarity are
    # zero gets gradient exactly zero, even when farther polarities are not
    rng = np.random.default_rng(14)
    w, _, f = random_fragment_arrays(rng, 9, 4)
    sigma = np.zeros(9)
    k = 4  # far-to-near index of the probe fragment
    sigma[:k] = rng.uniform(0.2, 1.0, k)  # farther fragments may be charged
    g = grad_w_lcf(w, sigma, f)
    assert g[k] == 0.0


def test_grad_alpha_single_fragment():
    g = grad_alpha(np.array([0.3]), np.array([1.0]), np.array([2.0]))
    np.testing.assert_allclose(g, [2.0])


def test_grad_alpha_two_fragment_chain_rule():
    # near fragment occludes far: dL/da_near = g_near - w_far*g_far/(1-a_near)
    a = np.array([0.4, 0.6])
    T = np.array([1.0, 0.6])
    gw = np.array([1.5, 2.0])
    w = a * T
    g = grad_alpha(a, T, gw)
    np.testing.assert_allclose(g[0], 1.0 * 1.5 - w[1] * 2.0 / (1 - 0.4), rtol=1e-12)
    np.testing.assert_allclose(g[1], 0.6 * 2.0, rtol=1e-12)


def test_grad_alpha_matches_finite_differences():
    rng = np.random.default_rng(5)
    h = 1e-6
    for _ in range(20):
        n = int(rng.integers(1, 20))
        a = rng.uniform(0.01, 0.9, n)
        gw = rng.normal(size=n)

        def loss(alpha):
            T = np.concatenate([[1.0], np.cumprod(1 - alpha)[:-1]])
            return float(np.dot(gw, alpha * T))

        T_excl = np.concatenate([[1.0], np.cumprod(1 - a)[:-1]])
        g = grad_alpha(a, T_excl, gw)
        for k in rng.choice(n, size=min(n, 3), replace=False):
            ap, am = a.copy(), a.copy()
            ap[k] += h
            am[k] -= h
            fd = (loss(ap) - loss(am)) / (2 * h)
            assert abs(fd - g[k]) / max(abs(fd), abs(g[k]), 1e-4) < 1e-6


def _views_from(init):
    return [(cam, init.images[cam.id].astype(np.float64),
             init.feature_maps[cam.id].data.astype(np.float64)) for cam in init.cameras]


@pytest.mark.parametrize("selector,tol", [("rgb", 1e-3), ("gt", 1e-3), ("cf", 1e-3), ("all", 1e-3)])
def test_backward_matches_fd(selector, tol, tiny_init, tiny_scene):
    rng = np.random.default_rng(6)
    keep = rng.choice(len(tiny_scene), size=35, replace=False)
    sub = type(tiny_scene)(
        tiny_scene.positions[keep], tiny_scene.rotations[keep], tiny_scene.log_scales[keep],
        tiny_scene.opacity_logits[keep], tiny_scene.colors[keep], tiny_scene.features[keep])
    report = fd_check(sub, _views_from(tiny_init), selector, n_probes=40, seed=8)
    assert report.passed(tol), report.summary()


def test_backward_matches_fd_paper_literal(tiny_init, tiny_scene):
    rng = np.random.default_rng(7)
    keep = rng.choice(len(tiny_scene), size=30, replace=False)
    sub = type(tiny_scene)(
        tiny_scene.positions[keep], tiny_scene.rotations[keep], tiny_scene.log_scales[keep],
        tiny_scene.opacity_logits[keep], tiny_scene.colors[keep], tiny_scene.features[keep])
    opts = RenderOptions(dtype=np.float64, traversal="paper_literal")
    report = fd_check(sub, _views_from(tiny_init), "all", n_probes=30, seed=9, opts=opts)
    assert report.passed(1e-3), report.summary()


def test_backward_zero_image_grad_no_color_gradient():
    scene = make_random_scene(10, d=4, seed=1)
    cam = make_camera(width=24, height=24, fx=30, fy=30)
    cache = forward_frame(scene, cam, RenderOptions(dtype=np.float64))
    grads = backward_frame(scene, cache, np.zeros((24, 24, 3)), 0.0, 0.0)
    assert np.all(grads.colors == 0)
    assert np.all(grads.positions == 0)


def test_backward_stationary_center_pixel():
    # dalpha/d(u,v) vanishes at the gaussian mode, so a loss touching only the
    # center pixel produces no position gradient there
    from test_rasterizer import one_splat_scene
    scene = one_splat_scene(position=(0.0, 0.0, 2.0), log_scale=-1.0)
    cam = make_camera(width=17, height=17, fx=30, fy=30)
    cache = forward_frame(scene, cam, RenderOptions(dtype=np.float64))
    g_img = np.zeros((17, 17, 3))
    g_img[8, 8, 0] = 1.0  # pixel whose ray passes through the splat center
    grads = backward_frame(scene, cache, g_img, 0.0, 0.0)
    np.testing.assert_allclose(grads.positions[0], 0.0, atol=1e-12)
    np.testing.assert_allclose(grads.log_scales[0], 0.0, atol=1e-12)
    assert abs(grads.opacity_logits[0]) > 0  # opacity still sees the pixel


def test_fd_check_empty_scene(tiny_init):
    scene = make_random_scene(0, d=8)
    report = fd_check(scene, _views_from(tiny_init), "all", n_probes=10, seed=0)
    assert report.probes == [] and report.passed(1e-9)


def test_fd_check_requires_double():
    with pytest.raises(ValueError):
        fd_check(make_random_scene(1, d=8), [], "all",
                 opts=RenderOptions(dtype=np.float32))


def test_fd_report_summary_and_pass():
    rep = FdReport()
    assert rep.passed(0.0)
    rep.nonfinite = 1
    assert not rep.passed(1.0)
    assert "NON-FINITE" in rep.summary()
