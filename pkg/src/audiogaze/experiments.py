"""Synthetic recovery and ablation experiments shared by scripts and tests.

The recovery suite is 250 generated scenes split 200/25/25. Training uses a
larger learning rate and longer plateau patience than the library defaults so
that a run finishes on one CPU core in a few minutes.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .data import split_dataset
from .dynamics import semantic_trace
from .model import ModelConfig
from .synthetic import SynthConfig, generate_with_truth
from .training import (SceneCache, TrainConfig, Trainer, best_constant_pds, evaluate,
                       variant_configs)

RECOVERY_SYNTH = dict(n_scenes=250, words_per_scene=26, subjects=8, subject_noise=0.03, seed=1)
RECOVERY_TRAIN = dict(lr=5e-3, batch_size=8, epochs_stage1=60, epochs_stage2=150,
                      plateau_patience=20, seed=0)
SPLIT_SEED = 0


@dataclass
class Suite:
    dataset: object
    truth: dict  # scene_id -> SceneTruth
    synth: SynthConfig
    cache: SceneCache = field(default_factory=SceneCache)


def recovery_suite(**overrides):
    synth = SynthConfig(**(RECOVERY_SYNTH | overrides))
    pairs = generate_with_truth(synth)
    dataset = split_dataset([b for b, _ in pairs], SPLIT_SEED)
    return Suite(dataset, {b.scene_id: t for b, t in pairs}, synth)


def recovery_train_config(**overrides):
    return TrainConfig(**(RECOVERY_TRAIN | overrides))


def semantic_accuracy(params, scenes, truth, cell_widths=1.5):
    """Share of groundable words whose attraction point lies within
    ``cell_widths`` grid cells of the generator's target center."""
    hits = total = 0
    for scene in scenes:
        t = truth[scene.scene_id]
        err = np.linalg.norm(semantic_trace(scene, params) - t.targets, axis=1)
        radius = cell_widths / scene.grid_n
        hits += int(np.sum(err[t.groundable] <= radius))
        total += int(np.sum(t.groundable))
    return hits / total


def train_variant(suite, variant, train_cfg, log_fn=None):
    """Train one ablation variant; returns the trainer's TrainResult."""
    model_cfg = ModelConfig(embed_dim=suite.synth.embed_dim)
    tc, mc = variant_configs(variant, train_cfg, model_cfg)
    return Trainer(suite.dataset, tc, mc, suite.cache, log_fn).fit()


def pds_on_test(suite, params):
    return evaluate(params, suite.dataset.test, suite.cache)["aggregate"]["PDS"]


def recovery_report(suite, result, elapsed=None):
    """Numbers checked by the end-to-end recovery criterion."""
    test = suite.dataset.test
    final = evaluate(result.best, test, suite.cache)["aggregate"]
    stage1 = evaluate(result.stage1, test, suite.cache)["aggregate"]
    const_pds, const_pt = best_constant_pds(test, suite.cache)
    return {
        "test_pds": final["PDS"],
        "test_metrics": final,
        "stage1_pds": stage1["PDS"],
        "stage1_metrics": stage1,
        "best_constant_pds": const_pds,
        "best_constant_point": [float(v) for v in const_pt],
        "semantic_accuracy": semantic_accuracy(result.best.params, test, suite.truth),
        "alpha": result.best.params.alpha,
        "epochs": len(result.last.curves),
        "train_seconds": elapsed,
    }


def run_recovery(suite=None, train_cfg=None, log_fn=None):
    suite = suite or recovery_suite()
    train_cfg = train_cfg or recovery_train_config()
    t0 = time.time()
    result = train_variant(suite, "full", train_cfg, log_fn)
    return suite, result, recovery_report(suite, result, time.time() - t0)


def ablation_pds(suite, full_result, train_cfg, variants=("no-salience", "no-dyns", "no-gru"),
                 log_fn=None):
    """Test PDS per variant; no-pdloss reuses the full run's stage-1 checkpoint."""
    scores = {"full": pds_on_test(suite, full_result.best.params),
              "no-pdloss": pds_on_test(suite, full_result.stage1.params)}
    for v in variants:
        fn = (lambda row, v=v: log_fn(v, row)) if log_fn else None
        scores[v] = pds_on_test(suite, train_variant(suite, v, train_cfg, fn).best.params)
    return scores


def ordering_holds(scores, tol=0.01):
    """full >= no-salience >= {no-dyns, no-gru} >= no-pdloss, ties within ``tol``."""
    s = scores
    checks = [
        s["full"] >= s["no-salience"] - tol,
        s["no-salience"] >= s["no-dyns"] - tol,
        s["no-salience"] >= s["no-gru"] - tol,
        s["no-dyns"] >= s["no-pdloss"] - tol,
        s["no-gru"] >= s["no-pdloss"] - tol,
    ]
    return all(checks)
