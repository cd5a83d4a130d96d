import numpy as np
import pytest

from audiogaze.data import GazeTrajectory, GroundedPatch, TimedWord, make_bundle
from audiogaze.model import ModelConfig, ModelParams
from audiogaze.synthetic import SynthConfig, generate, grid_centers


def tiny_bundle(n_words=2, subjects=2, d=8, grid_n=4, size=(1024, 1024), seed=0,
                scene_id="tiny", grounded_every=2):
    rng = np.random.default_rng(seed)
    scale = np.array(size, dtype=np.float64)
    centers = grid_centers(grid_n) * scale
    emb = rng.normal(size=(grid_n * grid_n, d))
    words = []
    for i in range(n_words):
        g = None
        if grounded_every and i % grounded_every == 0:
            k = int(rng.integers(grid_n * grid_n))
            g = GroundedPatch(centers[k], emb[k])
        words.append(TimedWord(i + 1, f"w{i}", rng.normal(size=d), 0.3 * i, 0.3 * i + 0.25, g))
    trajs = [GazeTrajectory(j + 1, rng.uniform(0.05, 0.95, size=(n_words, 2)) * scale)
             for j in range(subjects)]
    return make_bundle(scene_id, size, centers, emb, scale * 0.5, words, trajs, grid_n=grid_n)


@pytest.fixture
def bundle():
    return tiny_bundle(n_words=6, subjects=4)


@pytest.fixture
def small_config():
    return ModelConfig(embed_dim=8, hidden=6, key_dim=5, mlp_hidden=4)


@pytest.fixture
def params(small_config):
    return ModelParams.init(small_config, seed=3)


@pytest.fixture(scope="session")
def synth_small():
    return generate(SynthConfig(n_scenes=12, words_per_scene=7, subjects=4, embed_dim=8, seed=5))
