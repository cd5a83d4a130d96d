"""Scene bundles: domain types, JSON format, validation and dataset split.

Files store pixel coordinates. The model works in coordinates normalized to
the unit square by the image size; :meth:`SceneBundle.normalize` converts.
"""

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ParseError, TooFewScenes, ValidationError

SPLITS = ("train", "val", "test")


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GroundedPatch:
    center: np.ndarray  # pixels, shape (2,)
    embedding: np.ndarray  # shape (d,)

    def __eq__(self, other):
        return (
            isinstance(other, GroundedPatch)
            and np.array_equal(self.center, other.center)
            and np.array_equal(self.embedding, other.embedding)
        )


@dataclass(frozen=True, eq=False)
class TimedWord:
    index: int  # 1-based
    text: str
    embedding: np.ndarray
    t_start: float
    t_end: float
    grounded: Optional[GroundedPatch] = None

    def __eq__(self, other):
        return (
            isinstance(other, TimedWord)
            and self.index == other.index
            and self.text == other.text
            and np.array_equal(self.embedding, other.embedding)
            and self.t_start == other.t_start
            and self.t_end == other.t_end
            and self.grounded == other.grounded
        )


@dataclass(frozen=True, eq=False)
class GazeTrajectory:
    subject: int
    points: np.ndarray  # pixels, shape (n, 2)

    def __eq__(self, other):
        return (
            isinstance(other, GazeTrajectory)
            and self.subject == other.subject
            and np.array_equal(self.points, other.points)
        )


@dataclass(frozen=True, eq=False)
class SceneBundle:
    scene_id: str
    image_size: tuple  # (W, H)
    embed_dim: int
    grid_n: int
    patch_centers: np.ndarray  # (N*N, 2) pixels, row-major
    patch_embeddings: np.ndarray  # (N*N, d)
    salient_point: np.ndarray  # (2,) pixels
    words: tuple
    trajectories: tuple

    def __eq__(self, other):
        return (
            isinstance(other, SceneBundle)
            and self.scene_id == other.scene_id
            and tuple(self.image_size) == tuple(other.image_size)
            and self.embed_dim == other.embed_dim
            and self.grid_n == other.grid_n
            and np.array_equal(self.patch_centers, other.patch_centers)
            and np.array_equal(self.patch_embeddings, other.patch_embeddings)
            and np.array_equal(self.salient_point, other.salient_point)
            and self.words == other.words
            and self.trajectories == other.trajectories
        )

    @property
    def n_words(self):
        return len(self.words)

    @property
    def n_subjects(self):
        return len(self.trajectories)

    @property
    def scale(self):
        return np.array(self.image_size, dtype=np.float64)

    def normalize(self, pts):
        return np.asarray(pts, dtype=np.float64) / self.scale

    def to_pixels(self, pts):
        return np.asarray(pts, dtype=np.float64) * self.scale

    def end_times(self):
        return np.array([w.t_end for w in self.words])

    def word_embeddings(self):
        return np.stack([w.embedding for w in self.words])

    def gaze(self):
        """Subject points in pixels, shape (subjects, n, 2)."""
        return np.stack([t.points for t in self.trajectories])


def make_bundle(scene_id, image_size, patch_centers, patch_embeddings,
                salient_point, words, trajectories, grid_n=None):
    """Build and validate a bundle from plain arrays/lists."""
    patch_embeddings = _frozen(patch_embeddings)
    if grid_n is None:
        grid_n = int(round(math.sqrt(len(patch_centers))))
    b = SceneBundle(
        scene_id=str(scene_id),
        image_size=(float(image_size[0]), float(image_size[1])),
        embed_dim=int(patch_embeddings.shape[-1]) if patch_embeddings.ndim == 2 else 0,
        grid_n=int(grid_n),
        patch_centers=_frozen(patch_centers),
        patch_embeddings=patch_embeddings,
        salient_point=_frozen(salient_point),
        words=tuple(words),
        trajectories=tuple(trajectories),
    )
    validate(b)
    return b


def validate(b):
    """Raise :class:`ValidationError` naming the first violated invariant."""
    W, H = b.image_size
    if not (W > 0 and H > 0):
        raise ValidationError(f"image size must be positive, got {b.image_size}")
    d, N = b.embed_dim, b.grid_n
    if N < 1:
        raise ValidationError(f"grid_n must be >= 1, got {N}")
    if b.patch_centers.shape != (N * N, 2):
        raise ValidationError(
            f"patch grid: expected {N * N} centers, got shape {b.patch_centers.shape}")
    if b.patch_embeddings.shape != (N * N, d):
        raise ValidationError(
            f"patch grid: expected embeddings of shape {(N * N, d)}, "
            f"got {b.patch_embeddings.shape}")
    c = b.patch_centers
    if not np.all((c[:, 0] > 0) & (c[:, 0] < W) & (c[:, 1] > 0) & (c[:, 1] < H)):
        raise ValidationError("patch centers must lie strictly inside the image")
    _check_point(b.salient_point, W, H, "salient point")
    if not np.all(np.isfinite(b.patch_embeddings)):
        raise ValidationError("patch embeddings must be finite")
    if len(b.words) == 0:
        raise ValidationError("transcript must contain at least one word")
    prev_end = -math.inf
    for k, w in enumerate(b.words, start=1):
        if w.index != k:
            raise ValidationError(f"word index: expected {k}, got {w.index}")
        if w.embedding.shape != (d,):
            raise ValidationError(
                f"word {k} embedding dimension {w.embedding.shape} != embed_dim {d}")
        if not np.all(np.isfinite(w.embedding)):
            raise ValidationError(f"word {k} embedding must be finite")
        if not (w.t_start < w.t_end):
            raise ValidationError(f"word {k} timing: t_start must be < t_end")
        if w.t_start < prev_end:
            raise ValidationError(f"word {k} timing: overlaps the previous word")
        if w.t_start < 0:
            raise ValidationError(f"word {k} timing: negative start time")
        prev_end = w.t_end
        if w.grounded is not None:
            g = w.grounded
            if g.embedding.shape != (d,):
                raise ValidationError(f"word {k} grounded embedding dimension mismatch")
            _check_point(g.center, W, H, f"word {k} grounded center")
    if len(b.trajectories) < 2:
        raise ValidationError(
            f"need at least 2 subject trajectories, got {len(b.trajectories)}")
    n = len(b.words)
    for t in b.trajectories:
        if t.points.ndim != 2 or t.points.shape[1] != 2:
            raise ValidationError(f"trajectory {t.subject}: points must be (n, 2)")
        if t.points.shape[0] != n:
            raise ValidationError(
                f"trajectory length {t.points.shape[0]} != word count {n} "
                f"(subject {t.subject})")
        p = t.points
        if not (np.all(np.isfinite(p)) and np.all(p >= 0)
                and np.all(p[:, 0] <= W) and np.all(p[:, 1] <= H)):
            raise ValidationError(f"trajectory {t.subject}: point outside the image")
        if not (1 <= t.subject <= len(b.trajectories)):
            raise ValidationError(f"trajectory subject id {t.subject} out of range")
    ids = [t.subject for t in b.trajectories]
    if len(set(ids)) != len(ids):
        raise ValidationError("trajectory subject ids must be unique")


def _check_point(p, W, H, what):
    if p.shape != (2,) or not np.all(np.isfinite(p)):
        raise ValidationError(f"{what} must be a finite (x, y) pair")
    if not (0 <= p[0] <= W and 0 <= p[1] <= H):
        raise ValidationError(f"{what} {p.tolist()} outside the image")


# JSON format ---------------------------------------------------------------

def bundle_to_dict(b):
    def emb(a):
        return [float(v) for v in a]

    return {
        "scene_id": b.scene_id,
        "image_size": [float(b.image_size[0]), float(b.image_size[1])],
        "embed_dim": b.embed_dim,
        "grid_n": b.grid_n,
        "patches": [
            {"center": emb(c), "emb": emb(e)}
            for c, e in zip(b.patch_centers, b.patch_embeddings)
        ],
        "salient_point": emb(b.salient_point),
        "words": [
            {
                "w": w.text,
                "t_start": float(w.t_start),
                "t_end": float(w.t_end),
                "emb": emb(w.embedding),
                "grounded": None if w.grounded is None else {
                    "center": emb(w.grounded.center),
                    "emb": emb(w.grounded.embedding),
                },
            }
            for w in b.words
        ],
        "trajectories": [
            {"subject": t.subject, "points": [emb(p) for p in t.points]}
            for t in b.trajectories
        ],
    }


def bundle_from_dict(doc):
    try:
        d = int(doc["embed_dim"])
        N = int(doc["grid_n"])
        patches = doc["patches"]
        centers = np.array([p["center"] for p in patches], dtype=np.float64).reshape(-1, 2)
        embs = np.array([p["emb"] for p in patches], dtype=np.float64).reshape(len(patches), -1)
        words = []
        for k, w in enumerate(doc["words"], start=1):
            g = w.get("grounded")
            grounded = None
            if g is not None:
                grounded = GroundedPatch(_frozen(g["center"]), _frozen(g["emb"]))
            words.append(TimedWord(
                index=k,
                text=str(w.get("w", "")),
                embedding=_frozen(w["emb"]),
                t_start=float(w["t_start"]),
                t_end=float(w["t_end"]),
                grounded=grounded,
            ))
        trajs = [
            GazeTrajectory(int(t["subject"]),
                           _frozen(np.array(t["points"], dtype=np.float64).reshape(-1, 2)))
            for t in doc["trajectories"]
        ]
        b = SceneBundle(
            scene_id=str(doc["scene_id"]),
            image_size=(float(doc["image_size"][0]), float(doc["image_size"][1])),
            embed_dim=d,
            grid_n=N,
            patch_centers=_frozen(centers),
            patch_embeddings=_frozen(embs),
            salient_point=_frozen(doc["salient_point"]),
            words=tuple(words),
            trajectories=tuple(trajs),
        )
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ParseError(f"malformed scene bundle: {exc!r}") from exc
    validate(b)
    return b


def save_bundle(b, path):
    Path(path).write_text(json.dumps(bundle_to_dict(b), separators=(",", ":")))


def load_bundle(path):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read scene bundle {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be a JSON object")
    return bundle_from_dict(doc)


# dataset ---------------------------------------------------------------------

@dataclass
class Dataset:
    bundles: list
    split: dict = field(default_factory=dict)  # scene_id -> split name

    def part(self, name):
        return [b for b in self.bundles if self.split[b.scene_id] == name]

    @property
    def train(self):
        return self.part("train")

    @property
    def val(self):
        return self.part("val")

    @property
    def test(self):
        return self.part("test")

    def by_id(self, scene_id):
        for b in self.bundles:
            if b.scene_id == scene_id:
                return b
        raise KeyError(scene_id)


def split_sizes(n):
    """8:1:1 with floors for val/test and the remainder going to train."""
    n_val = n // 10
    n_test = n // 10
    return n - n_val - n_test, n_val, n_test


def split_dataset(bundles, seed):
    if len(bundles) < 10:
        raise TooFewScenes(f"need at least 10 scenes to split, got {len(bundles)}")
    ordered = sorted(bundles, key=lambda b: b.scene_id)
    ids = [b.scene_id for b in ordered]
    if len(set(ids)) != len(ids):
        raise ValidationError("scene ids must be unique within a dataset")
    perm = np.random.default_rng(seed).permutation(len(ordered))
    n_train, n_val, _ = split_sizes(len(ordered))
    split = {}
    for rank, k in enumerate(perm):
        if rank < n_train:
            split[ids[k]] = "train"
        elif rank < n_train + n_val:
            split[ids[k]] = "val"
        else:
            split[ids[k]] = "test"
    return Dataset(bundles=ordered, split=split)


def save_manifest(paths, seed, manifest_path):
    """Dataset manifest: bundle paths (relative to the manifest) plus split seed."""
    base = Path(manifest_path).parent
    rel = [os.path.relpath(p, base) for p in paths]
    doc = {"bundles": rel, "split_seed": int(seed)}
    Path(manifest_path).write_text(json.dumps(doc, indent=1))


def load_dataset(manifest_path):
    try:
        doc = json.loads(Path(manifest_path).read_text())
        rel = doc["bundles"]
        seed = int(doc["split_seed"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad dataset manifest {manifest_path}: {exc}") from exc
    base = Path(manifest_path).parent
    bundles = [load_bundle(base / p) for p in rel]
    return split_dataset(bundles, seed)
