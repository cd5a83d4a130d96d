import json

import numpy as np
import pytest

from audiogaze import diffcore as dc
from audiogaze.data import Dataset, split_dataset
from audiogaze.errors import DivergedLoss, ShapeMismatch
from audiogaze.model import GROUPS, ModelConfig, ModelParams
from audiogaze.synthetic import SynthConfig, generate
from audiogaze.training import (Checkpoint, SceneCache, TrainConfig, Trainer, adamw_init,
                                adamw_step, argmax_predictor, constant_predictor, evaluate,
                                evaluate_predictor, mean_loss, scene_loss)

SMALL = dict(embed_dim=8, hidden=6, key_dim=4, mlp_hidden=4)


def _params(seed=0):
    return ModelParams.init(ModelConfig(**SMALL), seed)


@pytest.fixture(scope="module")
def small_dataset():
    bundles = generate(SynthConfig(n_scenes=20, words_per_scene=6, subjects=4, embed_dim=8,
                                   seed=11))
    return split_dataset(bundles, seed=2)


def _cfg(**kw):
    base = dict(lr=3e-3, epochs_stage1=3, epochs_stage2=3, batch_size=4, grid_res=64, seed=5)
    return TrainConfig(**(base | kw))


# optimizer ----------------------------------------------------------------------

def test_adamw_zero_gradient_no_decay_is_identity():
    p = _params()
    before = p.state()
    cfg = TrainConfig(weight_decay=0.0)
    adamw_step(p, {n: np.zeros(t.shape) for n, t in p.tensors.items()}, adamw_init(p), cfg)
    for n, v in p.state().items():
        np.testing.assert_array_equal(v, before[n])


def test_adamw_first_step_by_hand():
    p = _params()
    name = "dyn.alpha_logit"
    p[name].value = np.array(0.3)
    cfg = TrainConfig(lr=1e-4, weight_decay=0.0)
    adamw_step(p, {name: np.array(1.0)}, adamw_init(p), cfg)
    # m_hat = 1, v_hat = 1 at t = 1
    assert p[name].value == pytest.approx(0.3 - 1e-4 / (1.0 + 1e-8), abs=1e-18)


def test_adamw_decay_is_decoupled_and_applied_first():
    p = _params()
    name = "dyn.alpha_logit"
    p[name].value = np.array(2.0)
    cfg = TrainConfig(lr=0.1, weight_decay=0.5)
    adamw_step(p, {name: np.array(1.0)}, adamw_init(p), cfg)
    assert p[name].value == pytest.approx(2.0 * (1 - 0.05) - 0.1 / (1 + 1e-8), abs=1e-15)


def _adam_reference(x0, grads, lr, b1, b2, eps):
    """Plain Adam, written from the textbook update."""
    x, m, v = x0.copy(), np.zeros_like(x0), np.zeros_like(x0)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g ** 2
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
    return x


def test_adamw_without_decay_matches_adam():
    p = _params(1)
    name = "dyn.A.W1"
    x0 = p[name].value.copy()
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=x0.shape) for _ in range(100)]
    cfg = TrainConfig(lr=1e-2, weight_decay=0.0)
    state = adamw_init(p)
    for g in grads:
        adamw_step(p, {name: g}, state, cfg)
    ref = _adam_reference(x0, grads, 1e-2, 0.9, 0.999, 1e-8)
    np.testing.assert_allclose(p[name].value, ref, rtol=0, atol=1e-12)


def test_adamw_shape_mismatch():
    p = _params()
    with pytest.raises(ShapeMismatch):
        adamw_step(p, {"dyn.A.W1": np.zeros(3)}, adamw_init(p), TrainConfig())


# losses and gradient flow -----------------------------------------------------------------

def test_every_group_gets_gradient_in_stage_two(small_dataset):
    p = _params(2)
    cache = SceneCache(grid_res=64)
    scene = small_dataset.train[0]
    dc.backward(scene_loss(scene, p, "pd", cache))
    for group in GROUPS:
        norm = sum(float(np.sum(t.grad ** 2)) for t in p.group(group) if t.grad is not None)
        assert norm > 0, group


def test_pd_loss_through_rollout_gradient(small_dataset):
    p = _params(3)
    cache = SceneCache(grid_res=64)
    scene = small_dataset.train[1]
    picks = [p["dyn.C.W1"], p["attn.W_k"], p["gru.W_r"], p["enc.W_in"], p["dyn.alpha_logit"]]
    err = dc.grad_check_params(lambda: scene_loss(scene, p, "pd", cache), picks, 1e-6)
    assert err < 1e-4


def test_diverged_loss_names_scene(small_dataset):
    tr = Trainer(small_dataset, _cfg())
    tr.params["dyn.A.b2"].value = np.array([np.nan, 0.0])
    with pytest.raises(DivergedLoss) as info:
        tr.run_epoch()
    assert info.value.scene_id in {b.scene_id for b in small_dataset.train}


# training loop --------------------------------------------------------------------------

def test_stage_switch_is_monotone(small_dataset):
    tr = Trainer(small_dataset, _cfg(epochs_stage1=2, epochs_stage2=2))
    stages = []
    res = tr.fit(lambda t: stages.append(t.curves[-1]["stage"]))
    assert stages == ["mse", "mse", "pd", "pd"]
    assert res.stage1.stage == "mse" and res.best.stage == "pd"


def test_plateau_triggers_switch(small_dataset):
    tr = Trainer(small_dataset, _cfg(lr=1e-9, epochs_stage1=50, epochs_stage2=1,
                                     plateau_patience=2))
    tr.fit()
    mse_epochs = [r for r in tr.curves if r["stage"] == "mse"]
    assert len(mse_epochs) == 3  # first epoch sets the best, two more without improvement


def test_mse_only_skips_stage_two(small_dataset):
    res = Trainer(small_dataset, _cfg(stage="mse-only")).fit()
    assert {r["stage"] for r in res.last.curves} == {"mse"}


def test_two_runs_bit_identical(small_dataset):
    a = Trainer(small_dataset, _cfg()).fit()
    b = Trainer(small_dataset, _cfg()).fit()
    assert json.dumps(a.best.to_dict()) == json.dumps(b.best.to_dict())
    assert json.dumps(a.last.to_dict()) == json.dumps(b.last.to_dict())


@pytest.mark.parametrize("pause_after", [2, 4])
def test_resume_equivalence(small_dataset, tmp_path, pause_after):
    full = Trainer(small_dataset, _cfg())
    full.fit()
    part = Trainer(small_dataset, _cfg())
    for _ in range(pause_after):
        part.step()
    path = tmp_path / "last.json"
    part.snapshot().save(path)
    resumed = Trainer.resume(small_dataset, Checkpoint.load(path))
    resumed.fit()
    assert resumed.curves == full.curves
    for n, v in full.params.state().items():
        assert np.array_equal(v, resumed.params.state()[n])


def test_checkpoint_reload_reproduces_val_loss(small_dataset, tmp_path):
    res = Trainer(small_dataset, _cfg()).fit()
    path = tmp_path / "best.json"
    res.best.save(path)
    cache = SceneCache(grid_res=64)
    a = mean_loss(small_dataset.val, res.best.params, "pd", cache)
    b = mean_loss(small_dataset.val, Checkpoint.load(path).params, "pd", cache)
    assert a == b


def test_overfit_single_scene():
    (scene,) = generate(SynthConfig(n_scenes=1, words_per_scene=10, subjects=2, embed_dim=8,
                                    subject_noise=0.0, n_twins=0, seed=4))
    ds = Dataset([scene], {scene.scene_id: "train"})
    cfg = TrainConfig(lr=1e-2, epochs_stage1=2000, plateau_patience=2000, batch_size=1,
                      stage="mse-only", grid_res=64)
    tr = Trainer(ds, cfg, ModelConfig(embed_dim=8, hidden=64))
    for epoch in range(2000):
        row = tr.step()
        if row["val_loss"] < 1e-3:
            break
    assert row["val_loss"] < 1e-3


# evaluation -----------------------------------------------------------------------

def test_argmax_oracle_scores_one(small_dataset):
    cache = SceneCache(grid_res=64)
    rep = evaluate_predictor(argmax_predictor(cache), small_dataset.test, cache)
    assert rep["aggregate"]["PDS"] == pytest.approx(1.0, abs=1e-6)
    assert len(rep["scenes"]) == len(small_dataset.test)


def test_report_shape_and_threads(small_dataset, monkeypatch):
    p = _params(4)
    cache = SceneCache(grid_res=64)
    serial = evaluate(p, small_dataset.test, cache)
    monkeypatch.setenv("AUDIOGAZE_THREADS", "3")
    threaded = evaluate(p, small_dataset.test, cache)
    assert serial == threaded
    assert set(serial["aggregate"]) == {"ED", "DTW", "ScanMatch", "PDS"}
    json.dumps(serial)


def test_constant_predictor_shape(small_dataset):
    scene = small_dataset.test[0]
    pred = constant_predictor([0.1, 0.9])(scene)
    assert pred.shape == (scene.n_words, 2)
