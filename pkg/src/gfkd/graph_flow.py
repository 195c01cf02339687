"""Salience graphs, variation graphs and the variation-graph loss.

All production functions work on batched (B, C, H, W) tensors; a 3-D
(C, H, W) input is treated as a batch of one. Mask placement is a constant
of the backward pass: gradients flow only through the surviving activations.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from gfkd import ops
from gfkd.tensor import Tensor, as_tensor

PatchSpec = Union[int, str]
PATCH_CHOICES = (1, 3, 5, 7, 9, "full")


def check_patch(patch: PatchSpec) -> PatchSpec:
    if patch == "full":
        return patch
    if isinstance(patch, bool) or not isinstance(patch, (int, np.integer)) or patch < 1 or patch % 2 == 0:
        raise ValueError(f"patch size must be a positive odd integer or 'full', got {patch!r}")
    return int(patch)


def _batched(f) -> Tensor:
    f = as_tensor(f)
    if f.ndim == 3:
        return ops.reshape(f, (1,) + f.shape)
    if f.ndim != 4:
        raise ValueError(f"expected (C, H, W) or (B, C, H, W) features, got {f.shape}")
    return f


def salience_mask(f, patch: PatchSpec) -> np.ndarray:
    """Binary mask keeping a p x p window around each channel's peak.

    The window is centred on the first maximal pixel in row-major order and
    clipped at the image border. Returns a float array shaped like ``f``.
    """
    patch = check_patch(patch)
    arr = f.data if isinstance(f, Tensor) else np.asarray(f, dtype=np.float64)
    if patch == "full":
        return np.ones_like(arr)
    *lead, h, w = arr.shape
    flat = arr.reshape(*lead, h * w).argmax(axis=-1)
    rows, cols = np.divmod(flat, w)
    r = patch // 2
    row_ok = np.abs(np.arange(h) - rows[..., None]) <= r
    col_ok = np.abs(np.arange(w) - cols[..., None]) <= r
    return (row_ok[..., :, None] & col_ok[..., None, :]).astype(np.float64)


@dataclass
class SalienceGraph:
    """Masked channel maps (vertices) and their pairwise distances (edges)."""

    gamma: Tensor  # (B, C, H, W)
    theta: Tensor  # (B, C, C)
    patch: PatchSpec

    @property
    def channels(self) -> int:
        return self.gamma.shape[1]


@dataclass
class VariationGraph:
    v: Tensor  # (B, C) squared change of each vertex
    e: Tensor  # (B, C, C) squared change of each edge

    @property
    def channels(self) -> int:
        return self.v.shape[1]


def salience_graph(f, patch: PatchSpec) -> SalienceGraph:
    f = _batched(f)
    mask = Tensor(salience_mask(f, patch))
    gamma = ops.mul(f, mask)
    b, c, h, w = gamma.shape
    theta = ops.pairwise_distance(ops.reshape(gamma, (b, c, h * w)))
    return SalienceGraph(gamma, theta, check_patch(patch))


def variation_graph(sg_i: SalienceGraph, sg_j: SalienceGraph) -> VariationGraph:
    """Vertex and edge changes between two same-shape layers."""
    if sg_i.gamma.shape != sg_j.gamma.shape:
        raise ValueError(f"salience graphs differ in shape: {sg_i.gamma.shape} vs {sg_j.gamma.shape}")
    if sg_i.patch != sg_j.patch:
        raise ValueError(f"salience graphs differ in patch size: {sg_i.patch} vs {sg_j.patch}")
    v = ops.sq_norm(ops.sub(sg_i.gamma, sg_j.gamma), axes=(2, 3))
    e = ops.square(ops.sub(sg_i.theta, sg_j.theta))
    return VariationGraph(v, e)


def variation_graph_of(f_i, f_j, patch: PatchSpec) -> VariationGraph:
    return variation_graph(salience_graph(f_i, patch), salience_graph(f_j, patch))


def vg_loss(vg_t: VariationGraph, vg_s: VariationGraph) -> Tuple[Tensor, Tensor]:
    """Unweighted (L_vertex, L_edge) for one tap pair, averaged over the batch.

    L_vertex = sum_c (V_t - V_s)^2 / (2C); L_edge = sum_{c,k} (E_t - E_s)^2 / (2C^2).
    """
    if vg_t.channels != vg_s.channels:
        raise ValueError(f"variation graphs differ in channels: {vg_t.channels} vs {vg_s.channels}")
    if vg_t.v.shape[0] != vg_s.v.shape[0]:
        raise ValueError(f"variation graphs differ in batch: {vg_t.v.shape[0]} vs {vg_s.v.shape[0]}")
    b, c = vg_t.v.shape
    n_pairs = 1
    l_vertex = ops.scale(ops.sq_norm(ops.sub(vg_t.v, vg_s.v)), 1.0 / (2 * n_pairs * c * b))
    l_edge = ops.scale(ops.sq_norm(ops.sub(vg_t.e, vg_s.e)), 1.0 / (2 * n_pairs * c * c * b))
    return l_vertex, l_edge


def reference_oracle(f_i: np.ndarray, f_j: np.ndarray, patch: PatchSpec) -> VariationGraph:
    """Naive loop implementation of the variation graph for one (C, H, W) pair.

    Shares no code with the vectorised path; meant for small test inputs.
    The result carries a batch axis of one.
    """
    f_i = np.asarray(f_i, dtype=np.float64)
    f_j = np.asarray(f_j, dtype=np.float64)
    C, H, W = f_i.shape

    def masked(f):
        out = [[[0.0] * W for _ in range(H)] for _ in range(C)]
        for c in range(C):
            best, br, bc = None, 0, 0
            for y in range(H):
                for x in range(W):
                    if best is None or f[c, y, x] > best:
                        best, br, bc = f[c, y, x], y, x
            for y in range(H):
                for x in range(W):
                    inside = patch == "full" or (abs(y - br) <= patch // 2 and abs(x - bc) <= patch // 2)
                    out[c][y][x] = float(f[c, y, x]) if inside else 0.0
        return out

    def distances(g):
        d = [[0.0] * C for _ in range(C)]
        for c in range(C):
            for k in range(C):
                acc = 0.0
                for y in range(H):
                    for x in range(W):
                        diff = g[c][y][x] - g[k][y][x]
                        acc += diff * diff
                d[c][k] = acc ** 0.5
        return d

    g_i, g_j = masked(f_i), masked(f_j)
    t_i, t_j = distances(g_i), distances(g_j)
    v = np.zeros(C)
    e = np.zeros((C, C))
    for c in range(C):
        acc = 0.0
        for y in range(H):
            for x in range(W):
                diff = g_i[c][y][x] - g_j[c][y][x]
                acc += diff * diff
        v[c] = acc
        for k in range(C):
            e[c, k] = (t_i[c][k] - t_j[c][k]) ** 2
    return VariationGraph(Tensor(v[None]), Tensor(e[None]))
