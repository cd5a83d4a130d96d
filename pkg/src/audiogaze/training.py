"""Two-stage training (MSE, then PD loss) with teacher forcing and AdamW."""

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import density, metrics
from .dynamics import FREE, TEACHER, rollout
from .encoder import prepare
from .errors import ConfigError, DivergedLoss, ShapeMismatch
from .model import VARIANTS, ModelConfig, ModelParams

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "audiogaze-checkpoint"
CHECKPOINT_VERSION = 1
STAGES = ("two-stage", "mse-only", "pd-only")
FORCING = ("subject", "free")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    epochs_stage1: int = 200
    epochs_stage2: int = 200
    plateau_patience: int = 5
    plateau_min_delta: float = 1e-3
    batch_size: int = 8  # scenes per optimizer step
    seed: int = 0
    grid_res: int = 256
    bandwidth_floor: float = density.DEFAULT_FLOOR
    stage: str = "two-stage"
    stage2_forcing: str = "subject"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.plateau_patience < 1:
            raise ConfigError("plateau_patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}")
        if self.stage2_forcing not in FORCING:
            raise ConfigError(f"stage2_forcing must be one of {FORCING}")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


# optimizer ----------------------------------------------------------------------

def adamw_init(params):
    return {
        "t": 0,
        "m": {n: np.zeros(t.shape) for n, t in params.tensors.items()},
        "v": {n: np.zeros(t.shape) for n, t in params.tensors.items()},
    }


def adamw_step(params, grads, state, cfg):
    """In-place AdamW update: decoupled decay first, then the bias-corrected
    Adam step. ``grads`` maps parameter names to arrays (missing = zero)."""
    b1, b2 = cfg.betas
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.tensors.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        elif np.shape(g) != p.shape:
            raise ShapeMismatch(f"gradient for {name}: {np.shape(g)} vs parameter {p.shape}")
        m = state["m"][name] = b1 * state["m"][name] + (1 - b1) * g
        v = state["v"][name] = b2 * state["v"][name] + (1 - b2) * g * g
        value = p.value * (1.0 - cfg.lr * cfg.weight_decay)
        p.value = value - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, state


# per-scene cache ------------------------------------------------------------------

class SceneCache:
    """Model arrays and per-step KDE mixtures, computed once per scene."""

    def __init__(self, floor=density.DEFAULT_FLOOR, grid_res=density.DEFAULT_GRID):
        self.floor = floor
        self.grid_res = grid_res
        self._arrays = {}
        self._mixes = {}
        self._stacked = {}

    def arrays(self, scene):
        a = self._arrays.get(scene.scene_id)
        if a is None:
            a = self._arrays[scene.scene_id] = prepare(scene)
        return a

    def mixtures(self, scene):
        m = self._mixes.get(scene.scene_id)
        if m is None:
            gaze = self.arrays(scene).gaze
            m = self._mixes[scene.scene_id] = density.fit_scene(gaze, self.floor, self.grid_res)
        return m

    def stacked(self, scene):
        s = self._stacked.get(scene.scene_id)
        if s is None:
            s = self._stacked[scene.scene_id] = density.StackedMixtures.from_mixtures(
                self.mixtures(scene))
        return s


def scene_loss(scene, params, loss, cache, forcing="subject"):
    """Per-sample loss for one scene with every subject as a sample.

    Teacher-forced predictions for all subjects are batched subject-major.
    ``loss`` is ``"mse"`` or ``"pd"``.
    """
    arrays = cache.arrays(scene)
    if loss == "pd" and forcing == "free":
        pred = rollout(scene, params, FREE, arrays=arrays)
        return density.pd_loss(cache.stacked(scene), pred)
    pred = rollout(scene, params, TEACHER, teacher=arrays.gaze, arrays=arrays)
    if loss == "mse":
        return density.mse_loss(pred, arrays.gaze.reshape(-1, 2))
    return density.pd_loss(cache.stacked(scene), pred)


def mean_loss(scenes, params, loss, cache, forcing="subject"):
    if not scenes:
        return float("nan")
    with dc.no_grad():
        vals = [scene_loss(s, params, loss, cache, forcing).item() for s in scenes]
    return float(np.mean(vals))


# checkpoints -----------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: ModelParams
    stage: str  # "mse" or "pd"
    epoch: int
    curves: list = field(default_factory=list)
    train_config: dict = field(default_factory=dict)
    optimizer: dict = None
    trainer: dict = None  # loop state for resuming
    extra: dict = field(default_factory=dict)  # named parameter snapshots

    def to_dict(self):
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "stage": self.stage,
            "epoch": self.epoch,
            "train_config": self.train_config,
            "curves": self.curves,
            "model": self.params.to_dict(),
        }
        if self.optimizer is not None:
            doc["optimizer"] = {
                "t": self.optimizer["t"],
                "m": {k: v.reshape(-1).tolist() for k, v in self.optimizer["m"].items()},
                "v": {k: v.reshape(-1).tolist() for k, v in self.optimizer["v"].items()},
            }
        if self.trainer is not None:
            doc["trainer"] = self.trainer
        if self.extra:
            doc["extra"] = {k: p.to_dict() for k, p in self.extra.items()}
        return doc

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError("not a checkpoint file")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {doc.get('version')}")
        params = ModelParams.from_dict(doc["model"])
        opt = None
        if "optimizer" in doc:
            shapes = {n: t.shape for n, t in params.tensors.items()}
            opt = {
                "t": int(doc["optimizer"]["t"]),
                "m": {k: np.array(v).reshape(shapes[k]) for k, v in doc["optimizer"]["m"].items()},
                "v": {k: np.array(v).reshape(shapes[k]) for k, v in doc["optimizer"]["v"].items()},
            }
        extra = {k: ModelParams.from_dict(v) for k, v in doc.get("extra", {}).items()}
        return cls(params, doc["stage"], int(doc["epoch"]), doc.get("curves", []),
                   doc.get("train_config", {}), opt, doc.get("trainer"), extra)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


# training loop ------------------------------------------------------------------------

def _improved(value, best, min_delta):
    if not math.isfinite(best):
        return True
    return value < best - min_delta * abs(best)


@dataclass
class TrainResult:
    best: Checkpoint  # best validation checkpoint of the final stage
    stage1: Checkpoint  # best stage-1 checkpoint
    last: Checkpoint  # resumable end state


class Trainer:
    """Stateful loop so that a run can be checkpointed and resumed exactly."""

    def __init__(self, dataset, config, model_config=None, cache=None, log_fn=None):
        self.cfg = config
        self.train = dataset.train
        self.val = dataset.val
        if not self.train:
            raise ConfigError("dataset has no training scenes")
        dims = {b.embed_dim for b in dataset.bundles}
        if len(dims) != 1:
            raise ConfigError(f"bundles disagree on embed_dim: {sorted(dims)}")
        if model_config is None:
            model_config = ModelConfig(embed_dim=dims.pop())
        elif model_config.embed_dim not in dims:
            raise ConfigError("model embed_dim does not match the bundles")
        self.cache = cache or SceneCache(config.bandwidth_floor, config.grid_res)
        self.log_fn = log_fn
        self.params = ModelParams.init(model_config, seed=config.seed)
        self.opt = adamw_init(self.params)
        self.stage = "pd" if config.stage == "pd-only" else "mse"
        self.epoch = 0  # epochs completed in the current stage
        self.total_epochs = 0
        self.best_val = math.inf
        self.bad_epochs = 0
        self.curves = []
        self.best_params = self.params.copy()
        self.best_epoch = 0
        self.stage1_best = None
        self.done = False

    # state ---------------------------------------------------------------
    def _trainer_state(self):
        return {
            "stage": self.stage, "epoch": self.epoch, "total_epochs": self.total_epochs,
            "best_val": self.best_val, "bad_epochs": self.bad_epochs,
            "best_epoch": self.best_epoch, "done": self.done,
        }

    def snapshot(self):
        extra = {"best": self.best_params}
        if self.stage1_best is not None:
            extra["stage1_best"] = self.stage1_best.params
            extra_meta = {"stage1_epoch": self.stage1_best.epoch}
        else:
            extra_meta = {}
        state = self._trainer_state() | extra_meta
        return Checkpoint(self.params.copy(), self.stage, self.total_epochs,
                          list(self.curves), self.cfg.to_dict(),
                          {"t": self.opt["t"],
                           "m": {k: v.copy() for k, v in self.opt["m"].items()},
                           "v": {k: v.copy() for k, v in self.opt["v"].items()}},
                          state, extra)

    @classmethod
    def resume(cls, dataset, ckpt, cache=None, log_fn=None):
        cfg = TrainConfig.from_dict(ckpt.train_config)
        tr = cls(dataset, cfg, ckpt.params.config, cache=cache, log_fn=log_fn)
        tr.params = ckpt.params.copy()
        tr.opt = {"t": ckpt.optimizer["t"],
                  "m": {k: v.copy() for k, v in ckpt.optimizer["m"].items()},
                  "v": {k: v.copy() for k, v in ckpt.optimizer["v"].items()}}
        st = ckpt.trainer
        tr.stage = st["stage"]
        tr.epoch = st["epoch"]
        tr.total_epochs = st["total_epochs"]
        tr.best_val = st["best_val"]
        tr.bad_epochs = st["bad_epochs"]
        tr.best_epoch = st["best_epoch"]
        tr.done = st["done"]
        tr.curves = list(ckpt.curves)
        tr.best_params = ckpt.extra["best"].copy()
        if "stage1_best" in ckpt.extra:
            tr.stage1_best = Checkpoint(ckpt.extra["stage1_best"].copy(), "mse",
                                        st.get("stage1_epoch", 0), [], cfg.to_dict())
        return tr

    # loop ---------------------------------------------------------------------
    def _loss_name(self):
        return "mse" if self.stage == "mse" else "pd"

    def _order(self):
        rng = np.random.default_rng([self.cfg.seed, 1 if self.stage == "mse" else 2, self.epoch])
        return rng.permutation(len(self.train))

    def run_epoch(self):
        loss = self._loss_name()
        forcing = self.cfg.stage2_forcing if loss == "pd" else "subject"
        order = self._order()
        bs = self.cfg.batch_size
        total = 0.0
        for a in range(0, len(order), bs):
            batch = [self.train[k] for k in order[a:a + bs]]
            self.params.zero_grad()
            for scene in batch:
                value = scene_loss(scene, self.params, loss, self.cache, forcing)
                v = value.item()
                if not math.isfinite(v):
                    raise DivergedLoss(scene.scene_id, v)
                total += v
                dc.backward(value * (1.0 / len(batch)))
            grads = {n: t.grad for n, t in self.params.tensors.items() if t.grad is not None}
            adamw_step(self.params, grads, self.opt, self.cfg)
        self.params.zero_grad()
        return total / len(order)

    def _max_epochs(self):
        return self.cfg.epochs_stage1 if self.stage == "mse" else self.cfg.epochs_stage2

    def step(self):
        """Run one epoch plus validation and stage bookkeeping."""
        if self.done:
            return None
        train_loss = self.run_epoch()
        loss = self._loss_name()
        forcing = self.cfg.stage2_forcing if loss == "pd" else "subject"
        val_loss = mean_loss(self.val or self.train, self.params, loss, self.cache, forcing)
        if not math.isfinite(val_loss):
            raise DivergedLoss("<validation>", val_loss)
        self.epoch += 1
        self.total_epochs += 1
        row = {"epoch": self.total_epochs, "stage": self.stage, "train_loss": train_loss,
               "val_loss": val_loss, "alpha": self.params.alpha}
        self.curves.append(row)
        if self.log_fn:
            self.log_fn(row)
        log.info("epoch %d stage %s train %.6g val %.6g", self.total_epochs, self.stage,
                 train_loss, val_loss)
        if _improved(val_loss, self.best_val, self.cfg.plateau_min_delta):
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if val_loss < self.best_val:
            self.best_val = val_loss
            self.best_params = self.params.copy()
            self.best_epoch = self.total_epochs
        plateau = self.bad_epochs >= self.cfg.plateau_patience
        if plateau or self.epoch >= self._max_epochs():
            self._end_stage()
        return row

    def _end_stage(self):
        if self.stage == "mse":
            self.stage1_best = Checkpoint(self.best_params.copy(), "mse", self.best_epoch,
                                          list(self.curves), self.cfg.to_dict())
            if self.cfg.stage == "two-stage":
                self.stage = "pd"
                self.epoch = 0
                self.best_val = math.inf
                self.bad_epochs = 0
                return
        self.done = True

    def fit(self, on_epoch=None):
        while not self.done:
            self.step()
            if on_epoch:
                on_epoch(self)
        return self.result()

    def result(self):
        best = Checkpoint(self.best_params.copy(), self.stage, self.best_epoch,
                          list(self.curves), self.cfg.to_dict())
        stage1 = self.stage1_best or best
        return TrainResult(best=best, stage1=stage1, last=self.snapshot())


def train_two_stage(dataset, config, model_config=None, cache=None, log_fn=None):
    return Trainer(dataset, config, model_config, cache, log_fn).fit()


# evaluation ---------------------------------------------------------------------------

def _threads():
    try:
        return max(1, int(os.environ.get("AUDIOGAZE_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class MetricOptions:
    scanmatch_grid: tuple = (8, 8)
    scanmatch_gap: float = 0.0
    dtw_normalize: bool = False


def score_prediction(scene, pred_norm, mixes, opts=None):
    """All four metrics for a normalized (n, 2) prediction."""
    opts = opts or MetricOptions()
    pred_px = scene.to_pixels(pred_norm)
    gts = scene.gaze()
    return {
        "ED": metrics.euclidean(pred_px, gts),
        "DTW": metrics.mean_dtw(pred_px, gts, opts.dtw_normalize),
        "ScanMatch": metrics.mean_scanmatch(pred_px, gts, scene.image_size,
                                            opts.scanmatch_grid, opts.scanmatch_gap),
        "PDS": density.trajectory_pds(mixes, pred_norm),
    }


def evaluate_predictor(predict_fn, scenes, cache=None, opts=None):
    """Metrics report for ``predict_fn(scene) -> (n, 2) normalized points``."""
    cache = cache or SceneCache()

    def one(scene):
        pred = np.asarray(predict_fn(scene), dtype=np.float64)
        row = score_prediction(scene, pred, cache.mixtures(scene), opts)
        return {"scene_id": scene.scene_id} | row

    workers = _threads()
    if workers > 1:
        for s in scenes:  # fill the cache serially, it is not thread-safe
            cache.mixtures(s)
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(one, scenes))
    else:
        rows = [one(s) for s in scenes]
    keys = ("ED", "DTW", "ScanMatch", "PDS")
    agg = {k: float(np.mean([r[k] for r in rows])) if rows else float("nan") for k in keys}
    return {"aggregate": agg, "scenes": rows}


def model_predictor(params, cache=None, mode=FREE):
    def predict_fn(scene):
        arrays = cache.arrays(scene) if cache else None
        with dc.no_grad():
            return rollout(scene, params, mode, arrays=arrays).value
    return predict_fn


def evaluate(params, scenes, cache=None, opts=None):
    """Free-rollout metrics report for a parameter set or checkpoint."""
    if isinstance(params, Checkpoint):
        params = params.params
    cache = cache or SceneCache()
    return evaluate_predictor(model_predictor(params, cache), scenes, cache, opts)


def constant_predictor(point):
    point = np.asarray(point, dtype=np.float64)
    return lambda scene: np.tile(point, (scene.n_words, 1))


def argmax_predictor(cache):
    return lambda scene: np.stack([m.argmax for m in cache.mixtures(scene)])


def best_constant_pds(scenes, cache, resolution=17):
    """Highest mean trajectory score over a lattice of constant predictions."""
    g = np.linspace(0.0, 1.0, resolution)
    best = (-1.0, None)
    for x in g:
        for y in g:
            pt = np.array([x, y])
            score = np.mean([density.trajectory_pds(cache.mixtures(s),
                                                    np.tile(pt, (s.n_words, 1)))
                             for s in scenes])
            if score > best[0]:
                best = (float(score), pt)
    return best


# ablations ----------------------------------------------------------------------------

def variant_configs(variant, train_cfg, model_cfg):
    """(TrainConfig, ModelConfig) for a named ablation variant."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    mc = ModelConfig.from_dict(model_cfg.to_dict() | VARIANTS[variant])
    tc = TrainConfig.from_dict(train_cfg.to_dict())
    if variant == "no-pdloss":
        tc.stage = "mse-only"
    return tc, mc


def run_ablation(dataset, variants, train_cfg, model_cfg=None, cache=None, opts=None,
                 split="test", log_fn=None):
    """Train and evaluate each variant; returns {variant: (report, checkpoint)}.

    When both ``full`` and ``no-pdloss`` are requested the latter reuses the
    full run's stage-1 checkpoint, which is exactly what an MSE-only run with
    the same seed produces.
    """
    if model_cfg is None:
        model_cfg = ModelConfig(embed_dim=dataset.bundles[0].embed_dim)
    cache = cache or SceneCache(train_cfg.bandwidth_floor, train_cfg.grid_res)
    scenes = dataset.part(split)
    out = {}
    results = {}
    for v in variants:
        if v == "no-pdloss" and "full" in variants and train_cfg.stage == "two-stage":
            continue
        tc, mc = variant_configs(v, train_cfg, model_cfg)
        fn = (lambda row, v=v: log_fn(v, row)) if log_fn else None
        results[v] = Trainer(dataset, tc, mc, cache, fn).fit()
    for v in variants:
        if v in results:
            ckpt = results[v].best
        else:
            ckpt = results["full"].stage1
        out[v] = (evaluate(ckpt, scenes, cache, opts), ckpt)
    return out
