"""Parameter containers, small layers, optimizers and checkpoint I/O."""

import struct
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError

CHECKPOINT_MAGIC = b"TRKF"
CHECKPOINT_VERSION = 1


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name, dtype=T.default_dtype())


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class: attributes holding parameters or submodules are registered
    in assignment order, which fixes the checkpoint layout."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix=""):
        for k, p in self._params.items():
            yield prefix + k, p
        for k, child in self._children.items():
            yield from child.named_parameters(prefix + k + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())

    def load_state_dict(self, state, strict=True):
        own = OrderedDict(self.named_parameters())
        if strict:
            missing = [k for k in own if k not in state]
            extra = [k for k in state if k not in own and not k.startswith("meta.")]
            if missing or extra:
                raise KeyError(f"checkpoint mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k, p in own.items():
            if k not in state:
                continue
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeError(f"checkpoint tensor {k}: shape {arr.shape}, model expects {p.shape}")
            p.data[...] = arr

    def set_trainable(self, flag):
        for _, p in self.named_parameters():
            p.requires_grad = flag
            p.grad = None

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, m):
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, zero=False):
        super().__init__()
        w = np.zeros((d_in, d_out)) if zero else uniform_init(rng, d_in, (d_in, d_out))
        self.weight = parameter(w)
        if bias:
            b = np.zeros(d_out) if zero else uniform_init(rng, d_in, (d_out,))
            self.bias = parameter(b)
        else:
            self.bias = None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


def mlp_forward(x, layers):
    """Affine layers with ReLU in between and nothing after the last one.

    ``layers`` is a sequence of (weight, bias) pairs; weight is (d_in, d_out).
    """
    for i, (w, b) in enumerate(layers):
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"mlp layer {i}: input width {x.shape[-1]} but weight is {w.shape}")
        x = T.linear(x, w, b)
        if i < len(layers) - 1:
            x = T.relu(x)
    return x


class MLP(Module):
    def __init__(self, widths, rng, zero_last=False):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.widths = tuple(widths)
        n = len(widths) - 1
        self.layers = ModuleList(
            Linear(widths[i], widths[i + 1], rng, zero=zero_last and i == n - 1)
            for i in range(n)
        )

    def __call__(self, x):
        return mlp_forward(x, [(l.weight, l.bias) for l in self.layers])


class LayerNorm(Module):
    def __init__(self, d):
        super().__init__()
        self.scale = parameter(np.ones(d))
        self.offset = parameter(np.zeros(d))

    def __call__(self, x):
        return T.layer_norm(x, self.scale, self.offset)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class Optimizer:
    def __init__(self, named_params, lr):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = float(lr)
        self.params = OrderedDict(named_params)
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def _grads(self):
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient; run backward() first")
        return self.params.items()


class SGD(Optimizer):
    """Plain SGD, or heavy-ball momentum when ``momentum > 0``."""

    def __init__(self, named_params, lr=1e-2, momentum=0.0):
        super().__init__(named_params, lr)
        self.momentum = float(momentum)
        self.velocity = ({k: np.zeros_like(p.data) for k, p in self.params.items()}
                         if self.momentum > 0 else None)

    def step(self):
        items = list(self._grads())
        self.t += 1
        for name, p in items:
            g = p.grad
            if self.velocity is not None:
                v = self.velocity[name]
                v *= self.momentum
                v += g
                g = v
            p.data -= (self.lr * g).astype(p.dtype, copy=False)


class Adam(Optimizer):
    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(named_params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        items = list(self._grads())
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in items:
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= upd.astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# checkpoint file: "TRKF", version byte, then per tensor
#   u32 name length, utf-8 name, u32 rank, u32 dims[rank], f32 data
# all little-endian, read until EOF.
# ---------------------------------------------------------------------------


def save_checkpoint(path, tensors):
    """Write an ordered mapping name -> array."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(bytes([CHECKPOINT_VERSION]))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    if blob[4] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob[4]}")
    out = OrderedDict()
    pos = 5
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(blob):
                raise ValueError("truncated tensor data")
            out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos) \
                .reshape(dims).astype(np.float32)
            pos += 4 * count
    except struct.error as e:
        raise ValueError(f"{path}: truncated checkpoint") from e
    return out
