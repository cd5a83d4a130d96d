"""Gaze dynamics: force field, Euler step and trajectory rollout.

The motion vector combines an inherent-motion term on the current point, a
pull toward the salient point and a pull toward the word's semantic
attraction point; the next point is ``prev + dt * M`` clamped to the unit
square. All coordinates here are normalized.
"""

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .encoder import prepare, semantic_points
from .errors import LengthMismatch, NegativeDt

FREE = "free"
TEACHER = "teacher_forced"


def mlp(params, name, x):
    """2 -> m -> 2 tanh MLP applied row-wise to (B, 2)."""
    n = x.shape[0]
    p = f"dyn.{name}."
    hid = dc.tanh(x @ params[p + "W1"] + dc.ones_rows(params[p + "b1"], n))
    return hid @ params[p + "W2"] + dc.ones_rows(params[p + "b2"], n)


def alpha(params):
    return dc.sigmoid(params["dyn.alpha_logit"])


def _rows(x):
    x = dc.as_tensor(x)
    return x.reshape(1, 2) if x.ndim == 1 else x


def motion_vector(s_prev, s_sal, s_sem, params):
    """Motion vector(s) for (2,) points or (B, 2) batches."""
    single = dc.as_tensor(s_prev).ndim == 1
    s_prev, s_sal, s_sem = _rows(s_prev), _rows(s_sal), _rows(s_sem)
    a = alpha(params)
    m = mlp(params, "A", s_prev) + (1.0 - a) * mlp(params, "C", s_sem - s_prev)
    if params.config.use_salience:
        m = m + a * mlp(params, "B", s_sal - s_prev)
    return m.reshape(2) if single else m


def step(s_prev, dt, m, clamp=True):
    """Euler update ``s_prev + dt * m``; ``dt`` is a scalar or one value per row."""
    dt_arr = np.asarray(dt, dtype=np.float64)
    if np.any(dt_arr < 0):
        raise NegativeDt(f"dt must be >= 0, got {dt_arr.min()}")
    s_prev, m = dc.as_tensor(s_prev), dc.as_tensor(m)
    if dt_arr.ndim == 0:
        out = s_prev + m * float(dt_arr)
    else:
        scale = np.repeat(dt_arr.reshape(-1, 1), 2, axis=1).reshape(m.shape)
        out = s_prev + m * Tensor(scale)
    return dc.clip(out, 0.0, 1.0) if clamp else out


def feedforward_points(s_sem, salient, params):
    """Dynamics-free merge used by the no-dyns ablation, (n, 2)."""
    n = s_sem.shape[0]
    a = alpha(params)
    sal = Tensor(np.tile(salient, (n, 1)))
    out = a * mlp(params, "B", sal) + (1.0 - a) * mlp(params, "C", s_sem)
    return dc.clip(out, 0.0, 1.0) if params.config.clamp else out


def initial_point(arrays, params):
    if params.config.init_point == "center":
        return np.array([0.5, 0.5])
    return arrays.salient.copy()


def rollout(scene, params, mode=FREE, teacher=None, arrays=None, s_sem=None):
    """Predicted trajectory (n, 2) in normalized coordinates.

    ``mode`` is ``"free"`` (feed back own predictions) or ``"teacher_forced"``
    with ``teacher`` a (n, 2) normalized ground-truth trajectory whose point
    i-1 is fed at step i. ``teacher`` may also be (S, n, 2); the result is
    then (S*n, 2), subject-major.
    """
    if arrays is None:
        arrays = prepare(scene)
    cfg = params.config
    if s_sem is None:
        s_sem = semantic_points(arrays, params)
    n = arrays.n
    s0 = initial_point(arrays, params)
    if not cfg.use_dyns:
        out = feedforward_points(s_sem, arrays.salient, params)
        if mode == TEACHER and teacher is not None and np.ndim(teacher) == 3:
            return dc.concat([out] * len(teacher), axis=0)
        return out
    if mode == TEACHER:
        if teacher is None:
            raise ValueError("teacher-forced rollout needs a ground-truth trajectory")
        teacher = np.asarray(teacher, dtype=np.float64)
        gts = teacher[None] if teacher.ndim == 2 else teacher
        if gts.shape[1] != n:
            raise LengthMismatch(f"teacher length {gts.shape[1]} != word count {n}")
        S = gts.shape[0]
        prev = np.concatenate([np.broadcast_to(s0, (S, 1, 2)), gts[:, :-1]], axis=1)
        prev = Tensor(prev.reshape(S * n, 2))
        sem = s_sem if S == 1 else dc.concat([s_sem] * S, axis=0)
        sal = Tensor(np.tile(arrays.salient, (S * n, 1)))
        m = motion_vector(prev, sal, sem, params)
        return step(prev, np.tile(arrays.dt, S), m, clamp=cfg.clamp)
    if mode != FREE:
        raise ValueError(f"unknown rollout mode {mode!r}")
    s = Tensor(s0.reshape(1, 2))
    sal = Tensor(arrays.salient.reshape(1, 2))
    pts = []
    for i in range(n):
        m = motion_vector(s, sal, s_sem[i:i + 1], params)
        s = step(s, arrays.dt[i], m, clamp=cfg.clamp)
        pts.append(s)
    return dc.concat(pts, axis=0)


def predict(scene, params, arrays=None):
    """Free rollout without recording gradients, as a numpy (n, 2) array."""
    with dc.no_grad():
        return rollout(scene, params, FREE, arrays=arrays).value.copy()


def semantic_trace(scene, params, arrays=None):
    """Numpy (n, 2) semantic attraction points for every word."""
    if arrays is None:
        arrays = prepare(scene)
    with dc.no_grad():
        return semantic_points(arrays, params).value.copy()


def rollout_to_json(scene, points, mode):
    pix = scene.to_pixels(points)
    return {
        "scene_id": scene.scene_id,
        "points": [[float(x), float(y)] for x, y in pix],
        "mode": mode,
        "times": [float(t) for t in scene.end_times()],
    }

