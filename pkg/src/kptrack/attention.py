"""Positional encoding, linear attention layers and the attention aggregation stack."""

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import MLP, LayerNorm, Module, parameter, uniform_init
from .tensor import ShapeError, Tensor


class ContractError(RuntimeError):
    """A documented precondition on set structure was violated."""


@dataclass
class EncodedSet:
    features: Tensor  # (N, D) or (B, N, D)
    with_ocl: bool = False
    mask: Optional[np.ndarray] = None  # valid rows, same leading shape as features

    @property
    def count(self):
        return self.features.shape[-2]

    @property
    def dim(self):
        return self.features.shape[-1]


# ---------------------------------------------------------------------------
# positional encoding and the occlusion token
# ---------------------------------------------------------------------------


def encode_positions(feats, positions, mlp, image_size):
    """feats + MLP(positions / (W, H)).

    ``positions`` are pixel (x, y) with the same leading shape as ``feats``;
    ``image_size`` is (H, W).
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape[:-1] != feats.shape[:-1] or pos.shape[-1] != 2:
        raise ShapeError(f"encode_positions: {pos.shape[:-1]} positions for "
                         f"{feats.shape[:-1]} feature rows")
    h, w = image_size
    norm = Tensor(pos / np.array([w, h], dtype=np.float64))
    return T.add(feats, mlp(norm))


def append_ocl(s, ocl):
    """Concatenate the learnable OCL row to the end of a (batched) set."""
    if s.with_ocl:
        raise ContractError("set already carries an OCL token")
    if ocl.shape != (s.dim,):
        raise ShapeError(f"OCL token {ocl.shape} does not match feature dim {s.dim}")
    feats = s.features
    if feats.ndim == 2:
        row = T.reshape(ocl, (1, s.dim))
        out = T.concat_rows([feats, row])
        mask = None if s.mask is None else np.append(s.mask, True)
    else:
        bsz = feats.shape[0]
        rows = T.gather_rows(T.reshape(ocl, (1, s.dim)), np.zeros(bsz, dtype=np.int64))
        out = T.concat_rows([feats, T.reshape(rows, (bsz, 1, s.dim))])
        mask = None if s.mask is None else np.concatenate(
            [s.mask, np.ones((bsz, 1), dtype=bool)], axis=1)
    return EncodedSet(out, with_ocl=True, mask=mask)


# ---------------------------------------------------------------------------
# linear attention
# ---------------------------------------------------------------------------

# Shapes of every intermediate array built by the most recent call; the
# tests read this to confirm nothing of size Nq x Nk was allocated.
last_intermediate_shapes = []


def _phi(x):
    neg = x < 0
    out = np.where(neg, np.exp(np.minimum(x, 0)), x + 1).astype(x.dtype, copy=False)
    return out, np.where(neg, out, 1).astype(x.dtype, copy=False)


def linear_attention(q, k, v, key_mask=None):
    """Kernelized attention with phi = elu + 1.

    out_i = phi(q_i) (sum_j phi(k_j)^T v_j) / (phi(q_i) . sum_j phi(k_j)),
    evaluated right-to-left so memory stays O(N D + D^2). Rows of ``k``/``v``
    where ``key_mask`` is False do not contribute; with no valid key the
    output row is zero. Inputs are (N, D) or (B, N, D).
    """
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (T.reshape(t, (1,) + t.shape) for t in (q, k, v))
        if key_mask is not None:
            key_mask = np.asarray(key_mask)[None]
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError("linear_attention expects 2-D or 3-D inputs")
    if k.shape[:2] != v.shape[:2]:
        raise ShapeError(f"linear_attention: keys {k.shape} and values {v.shape} differ in length")
    if q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ShapeError(f"linear_attention: queries {q.shape} incompatible with keys {k.shape}")

    bsz, nq, d = q.shape
    nk, dv = v.shape[1], v.shape[2]
    qf, dqf = _phi(q.data)
    kf, dkf = _phi(k.data)
    if key_mask is not None:
        m = np.asarray(key_mask, dtype=kf.dtype)
        if m.shape != (bsz, nk):
            raise ShapeError(f"key_mask {m.shape} does not match keys {(bsz, nk)}")
        kf = kf * m[:, :, None]
        dkf = dkf * m[:, :, None]
    vd = v.data
    kv = np.swapaxes(kf, 1, 2) @ vd          # (B, D, Dv)
    ksum = kf.sum(axis=1)                     # (B, D)
    num = qf @ kv                             # (B, Nq, Dv)
    den = np.einsum("bnd,bd->bn", qf, ksum)   # (B, Nq)
    # phi > 0, so den == 0 only when every key is masked: those rows get a zero message
    den = np.where(den == 0, 1, den).astype(den.dtype, copy=False)
    out = num / den[:, :, None]

    inter = (qf, kf, kv, ksum, num, den, out)
    last_intermediate_shapes[:] = [a.shape for a in inter]
    bound = bsz * (max(nq, nk) * max(d, dv) + d * dv)
    assert max(a.size for a in inter) <= bound, "linear attention exceeded O(N D + D^2) memory"

    def bw(g):
        gnum = g / den[:, :, None]
        gden = -(g * out).sum(axis=2) / den
        gqf = gnum @ np.swapaxes(kv, 1, 2) + gden[:, :, None] * ksum[:, None, :]
        gkv = np.swapaxes(qf, 1, 2) @ gnum                     # (B, D, Dv)
        gksum = np.einsum("bnd,bn->bd", qf, gden)               # (B, D)
        gkf = vd @ np.swapaxes(gkv, 1, 2) + gksum[:, None, :]
        gv = kf @ gkv
        return gqf * dqf, gkf * dkf, gv

    res = T.make_op(out.astype(q.dtype, copy=False), (q, k, v), bw)
    if squeeze:
        res = T.reshape(res, (nq, dv))
    return res


def dense_attention_reference(q, k, v, key_mask=None):
    """Same formula with the explicit Nq x Nk weight matrix (test oracle)."""
    qf = np.where(q < 0, np.exp(np.minimum(q, 0)), q + 1)
    kf = np.where(k < 0, np.exp(np.minimum(k, 0)), k + 1)
    a = qf @ np.swapaxes(kf, -1, -2)
    if key_mask is not None:
        a = a * np.asarray(key_mask, dtype=a.dtype)[..., None, :]
    total = a.sum(axis=-1, keepdims=True)
    return (a @ v) / np.where(total == 0, 1, total)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class AttentionLayer(Module):
    """Single-head post-norm encoder layer.

    h = LN1(target + attn(target Wq, source Wk, source Wv))
    out = LN2(h + FFN(h))
    """

    def __init__(self, d, rng, ffn_mult=2):
        super().__init__()
        self.wq = parameter(uniform_init(rng, d, (d, d)))
        self.wk = parameter(uniform_init(rng, d, (d, d)))
        self.wv = parameter(uniform_init(rng, d, (d, d)))
        self.ffn = MLP((d, ffn_mult * d, d), rng)
        self.norm1 = LayerNorm(d)
        self.norm2 = LayerNorm(d)

    def __call__(self, target, source, source_mask=None):
        if target.shape[-1] != source.shape[-1]:
            raise ShapeError(f"attention layer: target dim {target.shape[-1]} "
                             f"vs source dim {source.shape[-1]}")
        msg = linear_attention(T.linear(target, self.wq), T.linear(source, self.wk),
                               T.linear(source, self.wv), source_mask)
        h = self.norm1(T.add(target, msg))
        return self.norm2(T.add(h, self.ffn(h)))


def attention_layer(target, source, layer):
    """Update ``target`` with information from ``source``; source is untouched."""
    if target.dim != source.dim:
        raise ShapeError(f"attention layer: dims {target.dim} and {source.dim} differ")
    out = layer(target.features, source.features, source.mask)
    return replace(target, features=out)


class AAMBlock(Module):
    def __init__(self, d, rng):
        super().__init__()
        self.self1 = AttentionLayer(d, rng)
        self.self2 = AttentionLayer(d, rng)
        self.cross1 = AttentionLayer(d, rng)  # F1 <- F2
        self.cross2 = AttentionLayer(d, rng)  # F2 <- F1


class AAM(Module):
    """``depth`` blocks of [self(F1), self(F2), cross(F1<-F2), cross(F2<-F1)].

    The two cross updates inside a block both read the post-self states.
    """

    def __init__(self, d, depth, rng, with_ocl=True):
        super().__init__()
        self.depth = depth
        self.dim = d
        for i in range(depth):
            setattr(self, f"layer{i}", AAMBlock(d, rng))
        if with_ocl:
            self.ocl = parameter(uniform_init(rng, d, (d,)))

    def blocks(self):
        return [getattr(self, f"layer{i}") for i in range(self.depth)]

    def __call__(self, f1, f2, require_ocl=True):
        return aam_forward(f1, f2, self, require_ocl)


def aam_forward(f1, f2, aam, require_ocl=True):
    if require_ocl and not f2.with_ocl:
        raise ContractError("the second set must carry the OCL token")
    if f1.dim != f2.dim:
        raise ShapeError(f"AAM: dims {f1.dim} and {f2.dim} differ")
    for blk in aam.blocks():
        f1 = attention_layer(f1, f1, blk.self1)
        f2 = attention_layer(f2, f2, blk.self2)
        f1, f2 = attention_layer(f1, f2, blk.cross1), attention_layer(f2, f1, blk.cross2)
    return f1, f2
