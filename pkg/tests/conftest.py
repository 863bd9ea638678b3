import numpy as np
import pytest

from fhgs import ingestion
from fhgs.scene import Camera, GaussianScene


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small analytic dataset shared across modules: 2 objects, d=8, 4 views, 48x48."""
    out = tmp_path_factory.mktemp("data") / "tiny"
    ingestion.synth_scene(out, n_objects=2, feature_dim=8, n_views=4,
                          width=48, height=48, seed=11, points_per_object=60)
    return out


@pytest.fixture(scope="session")
def tiny_init(tiny_dataset):
    return ingestion.load_dataset(tiny_dataset)


@pytest.fixture(scope="session")
def tiny_scene(tiny_init):
    scene, index, excluded = ingestion.build_initial_scene(tiny_init, seed=0)
    return scene


def make_camera(width=64, height=64, fx=80.0, fy=80.0, cam_id=0,
                world_to_camera=None) -> Camera:
    W = np.eye(4) if world_to_camera is None else np.asarray(world_to_camera, dtype=np.float64)
    return Camera(id=cam_id, width=width, height=height, fx=fx, fy=fy,
                  cx=width / 2.0, cy=height / 2.0, world_to_camera=W)


def random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def make_random_scene(n=30, d=8, seed=0, depth_range=(2.0, 5.0), spread=1.6,
                      scale_range=(-3.2, -1.4), logit_range=(-2.0, 1.5)) -> GaussianScene:
    """Random primitives in front of the default camera (+z), unit features."""
    rng = np.random.default_rng(seed)
    pos = np.stack([
        rng.uniform(-spread, spread, n),
        rng.uniform(-spread, spread, n),
        rng.uniform(*depth_range, n),
    ], axis=1)
    feats = rng.normal(size=(n, d))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    return GaussianScene(
        positions=pos.astype(np.float32),
        rotations=random_quats(rng, n).astype(np.float32),
        log_scales=rng.uniform(*scale_range, (n, 2)).astype(np.float32),
        opacity_logits=rng.uniform(*logit_range, n).astype(np.float32),
        colors=rng.uniform(0.0, 1.0, (n, 3)).astype(np.float32),
        features=feats.astype(np.float32),
    )


def random_fragment_arrays(rng, n, d, wsum_cap=0.95):
    """(w, sigma, features) arrays as a traversal would produce them."""
    w = rng.uniform(0.0, 1.0, n)
    total = w.sum()
    if total > 0:
        w *= wsum_cap * rng.uniform(0.3, 1.0) / total
    sigma = rng.uniform(0.0, 1.0, n)
    f = rng.normal(size=(n, d))
    f /= np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
    return w, sigma, f
