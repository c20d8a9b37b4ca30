"""Cross-modality deformable attention and its fusion MLP."""
from __future__ import annotations

import numpy as np

from .tensor import MLP, Linear, Module, Tensor, as_tensor, ops


class CMDA(Module):
    """Deformable attention of point/grid queries into one 2-D feature map.

    For each head ``m`` the query predicts ``K`` pixel offsets around its
    reference point and ``K`` softmax weights. The map is value-projected
    per head (``W'_m``), sampled bilinearly at ``ref + offset``, weighted,
    and the heads are combined by the output projection ``W_m``.

    Value and output projections carry no bias, so an all-zero map or a
    reference point far outside the map gives an all-zero result.
    """

    def __init__(self, c_query: int, c_map: int, rng, heads: int = 4, points: int = 4,
                 c_head: int | None = None, c_out: int | None = None):
        self.M, self.K = heads, points
        self.c_head = c_head or max(c_map // heads, 4)
        self.c_out = c_out or c_query
        self.value = Linear(c_map, self.M * self.c_head, rng, bias=False, gain=1.0)
        # zeroed offset head: training starts from pure reference-point sampling
        self.offsets = Linear(c_query, self.M * self.K * 2, rng, zero=True)
        self.attn = Linear(c_query, self.M * self.K, rng, gain=0.1)
        self.out = Linear(self.M * self.c_head, self.c_out, rng, bias=False, gain=1.0)

    def __call__(self, query: Tensor, ref, fmap: Tensor, valid=None) -> Tensor:
        """``query[Q, Cq]``, ``ref[Q, 2]`` in map node coordinates ``(col, row)``.

        Rows with ``valid == False`` return zero.
        """
        return self.forward(query, ref, fmap, valid)[0]

    def forward(self, query: Tensor, ref, fmap: Tensor, valid=None):
        Q = query.shape[0]
        M, K, ch = self.M, self.K, self.c_head
        ref = as_tensor(ref) if isinstance(ref, Tensor) else Tensor(np.asarray(ref, dtype=query.data.dtype))
        vmap = self.value(fmap)
        off = ops.reshape(self.offsets(query), (Q, M, K, 2))
        A = ops.softmax(ops.reshape(self.attn(query), (Q, M, K)), axis=-1)
        r = ops.reshape(ref, (Q, 1, 2))
        heads = []
        for m in range(M):
            coords = ops.add(ops.index(off, (slice(None), m)), r)  # [Q, K, 2]
            vm = ops.index(vmap, (slice(None), slice(None), slice(m * ch, (m + 1) * ch)))
            s = ops.bilinear_sample(vm, coords)  # [Q, K, ch]
            a = ops.reshape(ops.index(A, (slice(None), m)), (Q, K, 1))
            heads.append(ops.sum(ops.mul(s, a), axis=1))
        out = self.out(ops.concat(heads, axis=1))
        if valid is not None:
            mask = np.asarray(valid, dtype=out.data.dtype).reshape(Q, 1)
            out = ops.mul(out, mask)
        return out, A


class FuseMLP(Module):
    """Two-layer MLP over ``[f_p, f*]`` back to the query width."""

    def __init__(self, c_query: int, c_queried: int, rng, hidden: int | None = None):
        self.mlp = MLP(c_query + c_queried, hidden or c_query, c_query, rng)

    def __call__(self, f_p: Tensor, f_star: Tensor) -> Tensor:
        return self.mlp(ops.concat([f_p, f_star], axis=-1))


def fv_reference(uv_pixels: np.ndarray, stride: int) -> np.ndarray:
    """Image pixel coordinates to node coordinates of a stride-``stride`` feature map."""
    return np.asarray(uv_pixels, dtype=np.float64) / stride - 0.5
