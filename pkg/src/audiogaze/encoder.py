"""Semantic attraction points: patch table, GRU transcript branch, attention.

Word embeddings go through a linear input projection and a GRU; the GRU
output for word i is the attention query. Keys are projected patch
embeddings (the N*N grid plus one special slot for the word's grounded
region) and values are the patches' normalized center coordinates, so the
attraction point is a convex combination of patch centers.
"""

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass(frozen=True)
class PatchTable:
    embeddings: np.ndarray  # (N*N + 1, d); last row is the special patch
    centers: np.ndarray  # (N*N + 1, 2), normalized


@dataclass(frozen=True)
class SceneArrays:
    """Model-side view of a bundle, all coordinates normalized."""

    scene_id: str
    grid_emb: np.ndarray  # (P, d)
    grid_centers: np.ndarray  # (P, 2)
    special_emb: np.ndarray  # (n, d), zero rows where ungrounded
    special_centers: np.ndarray  # (n, 2), (0, 0) where ungrounded
    word_emb: np.ndarray  # (n, d)
    dt: np.ndarray  # (n,)
    salient: np.ndarray  # (2,)
    gaze: np.ndarray  # (S, n, 2)

    @property
    def n(self):
        return self.word_emb.shape[0]


def prepare(scene):
    d = scene.embed_dim
    special_emb = np.zeros((scene.n_words, d))
    special_centers = np.zeros((scene.n_words, 2))
    for k, w in enumerate(scene.words):
        if w.grounded is not None:
            special_emb[k] = w.grounded.embedding
            special_centers[k] = scene.normalize(w.grounded.center)
    ends = scene.end_times()
    return SceneArrays(
        scene_id=scene.scene_id,
        grid_emb=np.array(scene.patch_embeddings),
        grid_centers=scene.normalize(scene.patch_centers),
        special_emb=special_emb,
        special_centers=special_centers,
        word_emb=scene.word_embeddings(),
        dt=np.diff(ends, prepend=0.0),
        salient=scene.normalize(scene.salient_point),
        gaze=scene.normalize(scene.gaze()),
    )


def build_patch_table(scene, word_index):
    """Patch table for the word with 1-based ``word_index``."""
    w = scene.words[word_index - 1]
    if w.grounded is None:
        sp_emb = np.zeros(scene.embed_dim)
        sp_center = np.zeros(2)
    else:
        sp_emb = np.asarray(w.grounded.embedding)
        sp_center = scene.normalize(w.grounded.center)
    return PatchTable(
        embeddings=np.vstack([scene.patch_embeddings, sp_emb]),
        centers=np.vstack([scene.normalize(scene.patch_centers), sp_center]),
    )


def project_words(word_emb, params):
    """Linear input projection ``W_in``: (n, d) -> (n, h)."""
    x = Tensor(word_emb)
    return x @ params["enc.W_in"] + dc.ones_rows(params["enc.b_in"], x.shape[0])


def gru_step(h_prev, x, params):
    """One GRU cell update on (1, h) rows; the output equals the new hidden state."""
    p = params
    z = dc.sigmoid(x @ p["gru.W_z"] + h_prev @ p["gru.U_z"] + p["gru.b_z"].reshape(1, -1))
    r = dc.sigmoid(x @ p["gru.W_r"] + h_prev @ p["gru.U_r"] + p["gru.b_r"].reshape(1, -1))
    cand = dc.tanh(x @ p["gru.W_n"] + (r * h_prev) @ p["gru.U_n"] + p["gru.b_n"].reshape(1, -1))
    h = (1.0 - z) * cand + z * h_prev
    return h, h


def encode_words(word_emb, params):
    """Per-word query embeddings, shape (n, h).

    With the GRU disabled the projected embeddings are used directly.
    """
    x = project_words(word_emb, params)
    if not params.config.use_gru:
        return x
    n = x.shape[0]
    # input-side gate products for all words at once
    xz = x @ params["gru.W_z"]
    xr = x @ params["gru.W_r"]
    xn = x @ params["gru.W_n"]
    bz = params["gru.b_z"].reshape(1, -1)
    br = params["gru.b_r"].reshape(1, -1)
    bn = params["gru.b_n"].reshape(1, -1)
    h = Tensor(np.zeros((1, params.config.hidden)))
    outs = []
    for i in range(n):
        z = dc.sigmoid(xz[i:i + 1] + h @ params["gru.U_z"] + bz)
        r = dc.sigmoid(xr[i:i + 1] + h @ params["gru.U_r"] + br)
        cand = dc.tanh(xn[i:i + 1] + (r * h) @ params["gru.U_n"] + bn)
        h = (1.0 - z) * cand + z * h
        outs.append(h)
    return dc.concat(outs, axis=0)


def _head(s, params):
    if params.config.attn_head != "residual_mlp":
        return s
    n = s.shape[0]
    hid = dc.tanh(s @ params["head.W1"] + dc.ones_rows(params["head.b1"], n))
    return s + hid @ params["head.W2"] + dc.ones_rows(params["head.b2"], n)


def semantic_attraction(e_w, table, params, return_weights=False):
    """Attraction point for one word from its query ``e_w`` (h,) and table."""
    k = params.config.key_dim
    q = dc.as_tensor(e_w).reshape(1, -1) @ params["attn.W_q"]  # (1, k)
    keys = Tensor(table.embeddings) @ params["attn.W_k"]  # (P+1, k)
    weights = dc.softmax((q @ keys.T) * (1.0 / np.sqrt(k)))  # (1, P+1)
    s = _head(weights @ Tensor(table.centers), params)
    s = s.reshape(2)
    return (s, weights.reshape(-1)) if return_weights else s


def semantic_points(arrays, params, queries=None, return_weights=False):
    """Attraction points for every word of a scene, shape (n, 2).

    Equivalent to calling :func:`semantic_attraction` per word but shares the
    grid keys across words.
    """
    if queries is None:
        queries = encode_words(arrays.word_emb, params)
    n = queries.shape[0]
    k = params.config.key_dim
    q = queries @ params["attn.W_q"]  # (n, k)
    grid_keys = Tensor(arrays.grid_emb) @ params["attn.W_k"]  # (P, k)
    sp_keys = Tensor(arrays.special_emb) @ params["attn.W_k"]  # (n, k)
    logits = dc.concat([q @ grid_keys.T, (q * sp_keys).sum(axis=-1).reshape(n, 1)], axis=1)
    weights = dc.softmax(logits * (1.0 / np.sqrt(k)))  # (n, P+1)
    P = arrays.grid_emb.shape[0]
    s = weights[:, :P] @ Tensor(arrays.grid_centers)
    sp_w = weights[:, P:P + 1] @ Tensor(np.ones((1, 2)))
    s = s + sp_w * Tensor(arrays.special_centers)
    s = _head(s, params)
    return (s, weights) if return_weights else s
