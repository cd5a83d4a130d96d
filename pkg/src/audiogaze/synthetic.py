"""Synthetic scenes with a known gaze process.

Each scene gets random unit patch embeddings on an N x N grid. Groundable
words point at a target patch (embedding = kappa * patch embedding + noise);
ungroundable words come from a fixed function-word vocabulary shared by all
scenes and leave every subject heading for its previous target.

Subjects start on the salient patch and move with

    u   = s_{i-1} + g_i * (salient - s_{i-1})
    s_i = u + f_i * (target_i - u) + noise

where ``f_i = min(1, drift * dt_i / drift_ref_dt)`` and
``g_i = min(1, salience_pull * dt_i / drift_ref_dt)``. Displacements are linear in
``dt`` (the model's Euler step) up to a small second-order cross term and
until they saturate at 1. With ``drift=1`` every word lands exactly on its
target because all durations are at least ``drift_ref_dt``.

Some patches have a near-duplicate "twin" elsewhere in the image. Words about
such an object send each subject to the primary instance with probability
``twin_preference`` and to the twin otherwise, which gives the bimodal
per-step gaze distributions that separate density-based from mean-squared
objectives.
"""

from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import GazeTrajectory, GroundedPatch, TimedWord, make_bundle
from .errors import ConfigError


@dataclass
class SynthConfig:
    n_scenes: int = 100
    words_per_scene: int = 26
    subjects: int = 8
    embed_dim: int = 64
    grid_n: int = 4
    image_size: tuple = (1024, 1024)
    kappa: float = 1.0  # word-target association strength
    word_noise: float = 0.3  # norm of the isotropic noise added to word embeddings
    subject_noise: float = 0.03  # per-step subject jitter, normalized units
    drift: float = 0.25  # fraction of the way to the target per drift_ref_dt
    drift_ref_dt: float = 0.2
    salience_pull: float = 0.05
    ungroundable_rate: float = 0.2
    grounded_rate: float = 0.5
    ambiguous_rate: float = 0.3  # share of groundable words naming a twinned object
    n_twins: int = 2
    twin_preference: float = 0.8
    twin_noise: float = 0.5
    n_function_words: int = 12
    duration_range: tuple = (0.2, 0.7)
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.duration_range = tuple(self.duration_range)
        if self.subjects < 2:
            raise ConfigError("subjects must be >= 2 (per-step KDE needs several points)")
        if self.kappa <= 0:
            raise ConfigError("kappa must be > 0")
        if self.subject_noise < 0:
            raise ConfigError("subject_noise must be >= 0")
        if not 0 < self.drift <= 1:
            raise ConfigError("drift must lie in (0, 1]")
        if self.n_scenes < 1 or self.words_per_scene < 1:
            raise ConfigError("n_scenes and words_per_scene must be positive")
        lo, hi = self.duration_range
        if not 0 < lo <= hi:
            raise ConfigError("duration_range must satisfy 0 < lo <= hi")
        if self.drift_ref_dt <= 0:
            raise ConfigError("drift_ref_dt must be > 0")
        if 2 * self.n_twins > self.grid_n ** 2:
            raise ConfigError("too many twin pairs for the grid")
        for name in ("ungroundable_rate", "grounded_rate", "ambiguous_rate", "twin_preference"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")

    def to_dict(self):
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["duration_range"] = list(self.duration_range)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SceneTruth:
    """Generator-side ground truth for one scene (normalized coordinates)."""

    scene_id: str
    targets: np.ndarray  # (n, 2) primary target center per word
    groundable: np.ndarray  # (n,) bool
    ambiguous: np.ndarray  # (n,) bool, word names a twinned object
    noiseless: np.ndarray  # (n, 2) subject path with no jitter, primary instances


def _unit(rng, shape):
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def function_vocab(cfg):
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    return _unit(rng, (cfg.n_function_words, cfg.embed_dim))


def grid_centers(grid_n):
    """Normalized row-major cell centers."""
    c = (np.arange(grid_n) + 0.5) / grid_n
    gy, gx = np.meshgrid(c, c, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _scene(cfg, idx, rng, vocab):
    N, d, n, S = cfg.grid_n, cfg.embed_dim, cfg.words_per_scene, cfg.subjects
    P = N * N
    scale = np.array(cfg.image_size, dtype=np.float64)
    centers = grid_centers(N)
    emb = _unit(rng, (P, d))

    perm = rng.permutation(P)
    primaries = perm[:cfg.n_twins]
    twin_of = {}
    for a, b in zip(primaries, perm[cfg.n_twins:2 * cfg.n_twins]):
        mixed = emb[a] + cfg.twin_noise * _unit(rng, (d,))
        emb[b] = mixed / np.linalg.norm(mixed)
        twin_of[int(a)] = int(b)
    plain = np.array([p for p in range(P) if p not in twin_of])

    salient = int(rng.integers(P))
    lo, hi = cfg.duration_range
    durations = rng.uniform(lo, hi, size=n)
    ends = np.cumsum(durations)
    starts = np.concatenate([[0.0], ends[:-1]])  # contiguous, from t = 0
    dt = np.diff(ends, prepend=0.0)

    words = []
    target_patch = np.full(n, -1)
    groundable = np.zeros(n, dtype=bool)
    for i in range(n):
        if rng.random() < cfg.ungroundable_rate:
            k = int(rng.integers(cfg.n_function_words))
            noise = rng.standard_normal(d) * (cfg.word_noise / np.sqrt(d))
            words.append(TimedWord(i + 1, f"fn{k}", vocab[k] + noise, starts[i], ends[i], None))
            continue
        groundable[i] = True
        if len(twin_of) and rng.random() < cfg.ambiguous_rate:
            p = int(rng.choice(primaries))
        else:
            p = int(rng.choice(plain))
        target_patch[i] = p
        noise = rng.standard_normal(d) * (cfg.word_noise / np.sqrt(d))
        grounded = None
        if rng.random() < cfg.grounded_rate:
            grounded = GroundedPatch(centers[p] * scale, emb[p].copy())
        words.append(TimedWord(i + 1, f"obj{p}", cfg.kappa * emb[p] + noise,
                               starts[i], ends[i], grounded))

    ambiguous = np.array([p in twin_of for p in target_patch])
    sal = centers[salient]
    targets = np.empty((n, 2))
    current = sal
    for i in range(n):
        if target_patch[i] >= 0:
            current = centers[target_patch[i]]
        targets[i] = current

    f = np.minimum(1.0, cfg.drift * dt / cfg.drift_ref_dt)
    g = np.minimum(1.0, cfg.salience_pull * dt / cfg.drift_ref_dt)

    def walk(instance, jitter):
        s = sal.copy()
        goal = sal
        out = np.empty((n, 2))
        for i in range(n):
            if target_patch[i] >= 0:
                goal = centers[instance[i]]
            s = s + g[i] * (sal - s)  # salience pull, then drift toward the goal
            s = np.clip(s + f[i] * (goal - s) + jitter[i], 0.0, 1.0)
            out[i] = s
        return out

    noiseless = walk(target_patch, np.zeros((n, 2)))
    trajs = []
    for j in range(S):
        picks = rng.random(n)
        jitter = rng.standard_normal((n, 2)) * cfg.subject_noise
        instance = [
            twin_of[p] if p in twin_of and picks[i] >= cfg.twin_preference else p
            for i, p in enumerate(target_patch)
        ]
        trajs.append(GazeTrajectory(j + 1, walk(instance, jitter) * scale))

    scene_id = f"syn{cfg.seed}-{idx:05d}"
    bundle = make_bundle(
        scene_id, cfg.image_size, centers * scale, emb, sal * scale,
        words, trajs, grid_n=N,
    )
    truth = SceneTruth(scene_id, targets, groundable, ambiguous, noiseless)
    return bundle, truth


def generate_with_truth(cfg):
    """List of (bundle, truth) pairs, deterministic in ``cfg.seed``."""
    vocab = function_vocab(cfg)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_scenes)
    return [_scene(cfg, k, np.random.default_rng(s), vocab) for k, s in enumerate(seeds)]


def generate(cfg):
    return [b for b, _ in generate_with_truth(cfg)]
