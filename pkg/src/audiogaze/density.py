"""Gaussian KDE over subject gaze points and the probability density score.

A step's mixture places one diagonal Gaussian on each subject point with a
shared per-axis bandwidth. The score of a query point is its density divided
by the mixture's maximum density, so it lies in [0, 1].
"""

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import LengthMismatch, TooFewPoints

DEFAULT_FLOOR = 0.02
DEFAULT_GRID = 256
REFINE_STEPS = 10


@dataclass(frozen=True)
class KdeMixture:
    means: np.ndarray  # (K, 2) normalized
    bandwidth: np.ndarray  # (2,) per-axis sigma
    max_density: float
    argmax: np.ndarray  # (2,) location of max_density

    @property
    def peak(self):
        """Density at the mean of a single isolated component."""
        return 1.0 / (2 * np.pi * self.bandwidth[0] * self.bandwidth[1])


def silverman(points, floor=DEFAULT_FLOOR):
    pts = np.asarray(points, dtype=np.float64)
    std = pts.std(axis=0, ddof=1)
    return np.maximum(1.06 * std * len(pts) ** (-0.2), floor)


def _density(means, bw, s):
    s = np.asarray(s, dtype=np.float64)
    flat = s.reshape(-1, 2)
    z = (flat[:, None, :] - means[None, :, :]) / bw
    e = np.exp(-0.5 * (z ** 2).sum(axis=-1))
    out = e.mean(axis=1) / (2 * np.pi * bw[0] * bw[1])
    return out.reshape(s.shape[:-1])


def density_at(mix, s):
    """Mixture density at ``s`` (shape (..., 2))."""
    return _density(mix.means, mix.bandwidth, s)


def density_grad(mix, s):
    """Gradient and Hessian of the density at a single point."""
    bw2 = mix.bandwidth ** 2
    d = (s[None, :] - mix.means) / bw2  # (K, 2)
    e = np.exp(-0.5 * ((s[None, :] - mix.means) ** 2 / bw2).sum(axis=-1))
    c = 1.0 / (len(mix.means) * 2 * np.pi * mix.bandwidth[0] * mix.bandwidth[1])
    grad = -c * (e[:, None] * d).sum(axis=0)
    hess = c * (np.einsum("k,ki,kj->ij", e, d, d) - np.diag(e.sum() / bw2))
    return grad, hess


def _refine(means, bw, x, steps):
    """Newton ascent with mean-shift fallback; never accepts a worse point."""
    mix = KdeMixture(means, bw, np.nan, x)
    best = float(_density(means, bw, x))
    for _ in range(steps):
        grad, hess = density_grad(mix, x)
        cand = None
        if np.all(np.linalg.eigvalsh(hess) < 0):
            cand = x - np.linalg.solve(hess, grad)
        if cand is None or _density(means, bw, cand) < best:
            w = np.exp(-0.5 * (((x[None, :] - means) / bw) ** 2).sum(axis=-1))
            if w.sum() <= 0:
                break
            cand = (w[:, None] * means).sum(axis=0) / w.sum()
        val = float(_density(means, bw, cand))
        if val < best:
            break
        x, best = cand, val
    return x, best


def kde_max(means, bw, grid_res=DEFAULT_GRID, steps=REFINE_STEPS):
    """(max density, argmax) from component means, a grid, then refinement."""
    if grid_res < 32:
        raise ValueError(f"grid_res must be >= 32, got {grid_res}")
    means = np.asarray(means, dtype=np.float64)
    g = np.linspace(0.0, 1.0, grid_res)
    # the kernel is separable: grid density = Gy @ Gx.T up to a constant
    gx = np.exp(-0.5 * ((g[:, None] - means[None, :, 0]) / bw[0]) ** 2)
    gy = np.exp(-0.5 * ((g[:, None] - means[None, :, 1]) / bw[1]) ** 2)
    norm = 1.0 / (len(means) * 2 * np.pi * bw[0] * bw[1])
    grid_vals = (gy @ gx.T) * norm  # [row = y, col = x]
    mean_vals = _density(means, bw, means)
    k = int(np.argmax(mean_vals))
    r, c = np.unravel_index(int(np.argmax(grid_vals)), grid_vals.shape)
    if grid_vals[r, c] > mean_vals[k]:
        start, start_val = np.array([g[c], g[r]]), float(grid_vals[r, c])
    else:
        start, start_val = means[k].copy(), float(mean_vals[k])
    x, best = _refine(means, bw, start, steps)
    if best < start_val:
        return start_val, start
    return best, x


def fit_kde(points, floor=DEFAULT_FLOOR, grid_res=DEFAULT_GRID, bandwidth=None):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise TooFewPoints(f"KDE needs at least 2 points, got {len(pts)}")
    bw = silverman(pts, floor) if bandwidth is None else np.asarray(bandwidth, dtype=np.float64)
    mx, arg = kde_max(pts, bw, grid_res)
    return KdeMixture(pts, bw, mx, arg)


def pds(mix, s):
    return np.minimum(density_at(mix, s) / mix.max_density, 1.0)


def trajectory_pds(mixes, traj):
    traj = np.asarray(traj, dtype=np.float64)
    if len(mixes) != len(traj):
        raise LengthMismatch(f"{len(mixes)} mixtures for a trajectory of length {len(traj)}")
    return float(np.mean([pds(m, s) for m, s in zip(mixes, traj)]))


def fit_scene(gaze, floor=DEFAULT_FLOOR, grid_res=DEFAULT_GRID):
    """One mixture per step from normalized gaze of shape (S, n, 2)."""
    gaze = np.asarray(gaze)
    return [fit_kde(gaze[:, i], floor, grid_res) for i in range(gaze.shape[1])]


# differentiable scoring -------------------------------------------------------

@dataclass(frozen=True)
class StackedMixtures:
    """Per-step mixtures laid out for vectorized tensor scoring."""

    mux: np.ndarray  # (n, K)
    muy: np.ndarray
    inv_bx: np.ndarray  # (n,)
    inv_by: np.ndarray
    coef: np.ndarray  # (n,) normalizer / max_density

    @classmethod
    def from_mixtures(cls, mixes):
        means = np.stack([m.means for m in mixes])
        bws = np.stack([m.bandwidth for m in mixes])
        K = means.shape[1]
        coef = np.array([1.0 / (K * 2 * np.pi * m.bandwidth[0] * m.bandwidth[1] * m.max_density)
                         for m in mixes])
        return cls(means[..., 0], means[..., 1], 1.0 / bws[:, 0], 1.0 / bws[:, 1], coef)

    def __len__(self):
        return len(self.coef)


def _stacked(mixes):
    return mixes if isinstance(mixes, StackedMixtures) else StackedMixtures.from_mixtures(mixes)


def pds_tensor(stacked, traj):
    """Per-point scores for a (R, 2) tensor whose rows cycle through the n steps
    (R = n or a multiple of n, e.g. subject-major teacher-forced batches)."""
    stacked = _stacked(stacked)
    n = len(stacked)
    R = traj.shape[0]
    if R % n:
        raise LengthMismatch(f"{R} points do not tile {n} steps")
    reps = R // n
    K = stacked.mux.shape[1]
    ones = Tensor(np.ones((1, K)))
    mux = Tensor(np.tile(stacked.mux, (reps, 1)))
    muy = Tensor(np.tile(stacked.muy, (reps, 1)))
    ibx = Tensor(np.tile(stacked.inv_bx, reps)[:, None] * np.ones((1, K)))
    iby = Tensor(np.tile(stacked.inv_by, reps)[:, None] * np.ones((1, K)))
    zx = (traj[:, 0:1] @ ones - mux) * ibx
    zy = (traj[:, 1:2] @ ones - muy) * iby
    e = dc.exp((dc.square(zx) + dc.square(zy)) * -0.5)
    dens = e.sum(axis=1) * Tensor(np.tile(stacked.coef, reps))
    return dc.minimum(dens, 1.0)


def pd_loss(stacked, traj):
    """Negative summed score over a trajectory. For R = reps * n rows the sum
    is divided by ``reps`` so it stays a per-trajectory quantity."""
    stacked = _stacked(stacked)
    reps = traj.shape[0] // len(stacked)
    return pds_tensor(stacked, traj).sum() * (-1.0 / reps)


def mse_loss(traj, gt):
    """Mean over steps of the squared Euclidean error."""
    traj = dc.as_tensor(traj)
    gt = np.asarray(gt, dtype=np.float64)
    if gt.size != traj.size:
        raise LengthMismatch(f"trajectory shape {traj.shape} vs ground truth {gt.shape}")
    gt = gt.reshape(traj.shape)
    if traj.shape[0] == 0:
        raise LengthMismatch("empty trajectory")
    diff = traj - Tensor(gt)
    return dc.square(diff).sum() * (1.0 / traj.shape[0])


def human_pds(gaze, floor=DEFAULT_FLOOR, grid_res=DEFAULT_GRID):
    """Leave-one-out trajectory score of each subject against the others."""
    gaze = np.asarray(gaze)
    S = gaze.shape[0]
    if S < 3:
        raise TooFewPoints("leave-one-out scoring needs at least 3 subjects")
    scores = []
    for j in range(S):
        rest = np.delete(gaze, j, axis=0)
        mixes = fit_scene(rest, floor, grid_res)
        scores.append(trajectory_pds(mixes, gaze[j]))
    return float(np.mean(scores))
