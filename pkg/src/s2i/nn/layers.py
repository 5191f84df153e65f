"""Differentiable layers with explicit forward/backward passes.

``forward(x, ctx)`` returns ``(output, cache)``; ``backward(dout, cache)``
returns ``(dinput, grads)`` where ``grads`` maps parameter names (relative to
the module) to arrays.  Tensors are NCHW.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .init import xavier_init
from .rng import RngState

ACTIVATIONS = ("relu", "leaky_relu", "elu", "tanh", "log_softmax")
LEAKY_SLOPE = 0.2
ELU_ALPHA = 1.0


@dataclass
class Context:
    """Per-call execution mode.

    Dropout is active when ``dropout`` is on and either the model is in train
    mode or the layer was built with ``at_eval=True``.  ``update_stats=False``
    keeps batch-norm running statistics untouched (frozen networks).
    """

    train: bool = False
    rng: RngState | None = None
    dropout: bool = True
    update_stats: bool = True

    def dropout_generator(self) -> np.random.Generator:
        if self.rng is None:
            raise ValueError("active dropout layer needs an RngState in the context")
        return self.rng.next("dropout")


EVAL = Context(train=False, dropout=False)


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


@dataclass
class Cache:
    owner: Any
    out_shape: tuple
    data: Any = None


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    args: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.args}


class Module:
    kind = "module"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def children(self) -> list[tuple[str, "Module"]]:
        return []

    def named_params(self, prefix: str = ""):
        for name, value in self.params.items():
            yield prefix + name, value
        for child_name, child in self.children():
            yield from child.named_params(f"{prefix}{child_name}.")

    def named_buffers(self, prefix: str = ""):
        for name, value in self.buffers.items():
            yield prefix + name, value
        for child_name, child in self.children():
            yield from child.named_buffers(f"{prefix}{child_name}.")

    def leaves(self, prefix: str = ""):
        kids = self.children()
        if not kids:
            yield prefix.rstrip("."), self
        for child_name, child in kids:
            yield from child.leaves(f"{prefix}{child_name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {**dict(self.named_params()), **dict(self.named_buffers())}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {**dict(self.named_params()), **dict(self.named_buffers())}
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing tensors {sorted(missing)[:5]}")
        for name, target in own.items():
            value = np.asarray(state[name])
            if value.shape != target.shape:
                raise ShapeError(f"{name}: expected {target.shape}, got {value.shape}")
            target[...] = value

    def num_params(self) -> int:
        return sum(p.size for _, p in self.named_params())

    def spec(self) -> LayerSpec:
        raise NotImplementedError

    def forward(self, x, ctx: Context):
        raise NotImplementedError

    def backward(self, dout, cache: Cache):
        raise NotImplementedError

    def __call__(self, x, ctx: Context = EVAL):
        return self.forward(x, ctx)[0]

    def _cache(self, out, data=None) -> Cache:
        return Cache(self, out.shape, data)

    def _check_cache(self, dout, cache: Cache) -> None:
        if not isinstance(cache, Cache) or cache.owner is not self:
            raise StaleCacheError(f"{type(self).__name__}: cache was produced by a different layer")
        if dout.shape != cache.out_shape:
            raise StaleCacheError(
                f"{type(self).__name__}: upstream gradient shape {dout.shape} "
                f"does not match forward output {cache.out_shape}"
            )


def _check_input(x, ndim: int, channels: int | None, who: str) -> None:
    if x.ndim != ndim or (channels is not None and x.shape[1] != channels):
        expected = f"{ndim}-D with {channels} channels" if channels is not None else f"{ndim}-D"
        raise ShapeError(f"{who}: expected {expected} input, got shape {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class Conv2d(Module):
    kind = "conv2d"

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None, rng=None, dtype=np.float32, bias=True):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        self.bias = bias
        self.padding = kernel // 2 if padding is None else padding
        fan_in, fan_out = in_ch * kernel * kernel, out_ch * kernel * kernel
        shape = (out_ch, in_ch, kernel, kernel)
        self.params["weight"] = (
            xavier_init(fan_in, fan_out, rng, shape, dtype) if rng is not None else np.zeros(shape, dtype)
        )
        if bias:
            self.params["bias"] = np.zeros(out_ch, dtype)

    @property
    def fans(self) -> tuple[int, int]:
        k2 = self.kernel * self.kernel
        return self.in_ch * k2, self.out_ch * k2

    def spec(self):
        return LayerSpec(self.kind, dict(in_ch=self.in_ch, out_ch=self.out_ch, kernel=self.kernel,
                                         stride=self.stride, padding=self.padding, bias=self.bias))

    def output_shape(self, h, w):
        return (conv_output_size(h, self.kernel, self.stride, self.padding),
                conv_output_size(w, self.kernel, self.stride, self.padding))

    def forward(self, x, ctx=EVAL):
        _check_input(x, 4, self.in_ch, "conv2d")
        k, s, p = self.kernel, self.stride, self.padding
        xh = x.transpose(0, 2, 3, 1)
        if p:
            xh = np.pad(xh, ((0, 0), (p, p), (p, p), (0, 0)))
        if xh.shape[1] < k or xh.shape[2] < k:
            raise ShapeError(f"conv2d: padded input {xh.shape[1:3]} smaller than kernel {k}")
        n = x.shape[0]
        ho, wo = (xh.shape[1] - k) // s + 1, (xh.shape[2] - k) // s + 1
        cols = _im2col(xh, k, s, ho, wo)
        out = cols @ self._wmat().T
        if self.bias:
            out += self.params["bias"]
        out = out.reshape(n, ho, wo, self.out_ch).transpose(0, 3, 1, 2)
        return out, self._cache(out, (cols, xh.shape, x.dtype))

    def _wmat(self):
        # (out, k*k*in), matching the channels-last column layout
        return self.params["weight"].transpose(0, 2, 3, 1).reshape(self.out_ch, -1)

    def backward(self, dout, cache):
        self._check_cache(dout, cache)
        cols, xh_shape, dtype = cache.data
        k, s, p = self.kernel, self.stride, self.padding
        n, _, ho, wo = dout.shape
        w = self.params["weight"]
        dh = dout.transpose(0, 2, 3, 1)
        d2 = dh.reshape(-1, self.out_ch)
        grads = {"weight": (d2.T @ cols).reshape(self.out_ch, k, k, self.in_ch).transpose(0, 3, 1, 2).copy()}
        if self.bias:
            grads["bias"] = d2.sum(axis=0)
        _, hp, wp, _ = xh_shape
        if s == 1 and self.out_ch < self.in_ch:
            # full correlation of dout with the flipped kernel
            dd = np.zeros((n, hp + k - 1, wp + k - 1, self.out_ch), dtype=dout.dtype)
            dd[:, k - 1:k - 1 + ho, k - 1:k - 1 + wo, :] = dh
            wf = w[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(self.in_ch, -1)
            dxh = (_im2col(dd, k, 1, hp, wp) @ wf.T).reshape(n, hp, wp, self.in_ch)
        else:
            dcols = (d2 @ self._wmat()).reshape(n, ho, wo, k, k, self.in_ch)
            dxh = np.zeros(xh_shape, dtype=dcols.dtype)
            for i in range(k):
                for j in range(k):
                    dxh[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[:, :, :, i, j, :]
        dx = dxh.transpose(0, 3, 1, 2)
        if p:
            dx = dx[:, :, p:-p, p:-p]
        return np.ascontiguousarray(dx, dtype=dtype), grads


def _im2col(xh, k, s, ho, wo):
    """Channels-last patches: (n*ho*wo, k*k*c)."""
    n, c = xh.shape[0], xh.shape[3]
    cols = np.empty((n, ho, wo, k, k, c), dtype=xh.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xh[:, i:i + s * ho:s, j:j + s * wo:s, :]
    return cols.reshape(n * ho * wo, k * k * c)


def upsample_nearest(x, scale: int, out_size=None):
    y = x.repeat(scale, axis=2).repeat(scale, axis=3)
    if out_size is not None:
        h, w = out_size
        if h > y.shape[2] or w > y.shape[3]:
            raise ShapeError(f"cannot crop upsampled {y.shape[2:]} to {out_size}")
        y = y[:, :, :h, :w]
    return y


def upsample_nearest_backward(dy, scale: int, in_shape):
    n, c, h, w = in_shape
    full = np.zeros((n, c, h * scale, w * scale), dtype=dy.dtype)
    full[:, :, :dy.shape[2], :dy.shape[3]] = dy
    return full.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5))


class Upsample(Module):
    """Nearest-neighbour upsampling by an integer factor, optionally cropped."""

    kind = "upsample"

    def __init__(self, scale=2, out_size=None):
        super().__init__()
        self.scale, self.out_size = scale, None if out_size is None else tuple(out_size)

    def spec(self):
        return LayerSpec(self.kind, dict(scale=self.scale, out_size=self.out_size))

    def forward(self, x, ctx=EVAL):
        _check_input(x, 4, None, "upsample")
        out = upsample_nearest(x, self.scale, self.out_size)
        return out, self._cache(out, x.shape)

    def backward(self, dout, cache):
        self._check_cache(dout, cache)
        return upsample_nearest_backward(dout, self.scale, cache.data), {}


class UpsampleConv2d(Module):
    """Nearest-neighbour 2x upsample (cropped to ``out_size``) then a stride-1 conv."""

    kind = "upsample_conv2d"

    def __init__(self, in_ch, out_ch, kernel=3, scale=2, out_size=None, rng=None, dtype=np.float32, bias=True):
        super().__init__()
        self.up = Upsample(scale, out_size)
        self.conv = Conv2d(in_ch, out_ch, kernel, 1, None, rng, dtype, bias)
        # share storage so params live on this leaf
        self.params = self.conv.params
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel

    @property
    def fans(self):
        return self.conv.fans

    def spec(self):
        return LayerSpec(self.kind, dict(in_ch=self.in_ch, out_ch=self.out_ch, kernel=self.kernel,
                                         scale=self.up.scale, out_size=self.up.out_size, bias=self.conv.bias))

    def forward(self, x, ctx=EVAL):
        _check_input(x, 4, self.in_ch, "upsample_conv2d")
        up, up_cache = self.up.forward(x, ctx)
        out, conv_cache = self.conv.forward(up, ctx)
        return out, self._cache(out, (up_cache, conv_cache))

    def backward(self, dout, cache):
        self._check_cache(dout, cache)
        up_cache, conv_cache = cache.data
        dup, grads = self.conv.backward(dout, conv_cache)
        dx, _ = self.up.backward(dup, up_cache)
        return dx, grads


class Linear(Module):
    kind = "fully_connected"

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        shape = (out_features, in_features)
        self.params["weight"] = (
            xavier_init(in_features, out_features, rng, shape, dtype) if rng is not None else np.zeros(shape, dtype)
        )
        self.params["bias"] = np.zeros(out_features, dtype)

    @property
    def fans(self):
        return self.in_features, self.out_features

    def spec(self):
        return LayerSpec(self.kind, dict(in_features=self.in_features, out_features=self.out_features))

    def forward(self, x, ctx=EVAL):
        _check_input(x, 2, self.in_features, "fully_connected")
        out = x @ self.params["weight"].T + self.params["bias"]
        return out, self._cache(out, x)

    def backward(self, dout, cache):
        self._check_cache(dout, cache)
        x = cache.data
        grads = {"weight": dout.T @ x, "bias": dout.sum(axis=0)}
        return dout @ self.params["weight"], grads


class BatchNorm(Module):
    """Per-channel batch normalization for (N, C) or (N, C, H, W) inputs.

    Running statistics follow ``running = momentum * running + (1 - momentum) * batch``.
    """

    kind = "batch_norm"

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["gamma"] = np.ones(channels, dtype)
        self.params["beta"] = np.zeros(channels, dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype)
        self.buffers["running_var"] = np.ones(channels, dtype)

    def spec(self):
        return LayerSpec(self.kind, dict(channels=self.channels, momentum=self.momentum, eps=self.eps))

    def _view(self, v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, x, ctx=EVAL):
        if x.ndim not in (2, 4) or x.shape[1] != self.channels:
            raise ShapeError(f"batch_norm: expected (N, {self.channels}[, H, W]), got {x.shape}")
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        gamma = self._view(self.params["gamma"], x.ndim)
        beta = self._view(self.params["beta"], x.ndim)
        if ctx.train:
            m = x.size // self.channels
            if m < 2:
                raise ShapeError("batch_norm: train mode needs more than one value per channel")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if ctx.update_stats:
                rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
                rm *= self.momentum
                rm += (1 - self.momentum) * mean
                rv *= self.momentum
                rv += (1 - self.momentum) * var * (m / (m - 1))
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._view(mean, x.ndim)) * self._view(inv_std, x.ndim)
        out = (gamma * xhat + beta).astype(x.dtype, copy=False)
        return out, self._cache(out, (xhat, inv_std, axes, ctx.train))

    def backward(self, dout, cache):
        self._check_cache(dout, cache)
        xhat, inv_std, axes, train = cache.data
        ndim = dout.ndim
        grads = {"gamma": (dout * xhat).sum(axis=axes), "beta": dout.sum(axis=axes)}
        dxhat = dout * self._view(self.params["gamma"], ndim)
        if not train:
            return dxhat * self._view(inv_std, ndim), grads
        m = dout.size // self.channels
        sum_d = self._view(dxhat.sum(axis=axes), ndim)
        sum_dx = self._view((dxhat * xhat).sum(axis=axes), ndim)
        dx = self._view(inv_std, ndim) / m * (m * dxhat - sum_d - xhat * sum_dx)
        return dx.astype(dout.dtype, copy=False), grads


class Activation(Module):
    kind = "activation"

    def __init__(self, fn="relu"):
        super().__init__()
        if fn not in ACTIVATIONS:
            raise ValueError(f"unknown activation {fn!r}; choose from {ACTIVATIONS}")
        self.fn = fn

    def spec(self):
        return LayerSpec(self.kind, dict(fn=self.fn))

    def forward(self, x, ctx=EVAL):
        fn = self.fn
        if fn == "relu":
            out = np.maximum(x, 0)
        elif fn == "leaky_relu":
            out = np.where(x > 0, x, LEAKY_SLOPE * x)
        elif fn == "elu":
            out = np.where(x > 0, x, ELU_ALPHA * np.expm1(np.minimum(x, 0)))
        elif fn == "tanh":
            out = np.tanh(x)
        else:
            shifted = x - x.max(axis=1, keepdims=True)
            out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        out = out.astype(x.dtype, copy=False)
        return out, self._cache(out, (x, out))

    def backward(self, dout, cache):
        self._check_cache(dout, cache)
        x, out = cache.data
        fn = self.fn
        if fn == "relu":
            dx = dout * (x > 0)
        elif fn == "leaky_relu":
            dx = np.where(x > 0, dout, LEAKY_SLOPE * dout)
        elif fn == "elu":
            dx = np.where(x > 0, dout, dout * (out + ELU_ALPHA))
        elif fn == "tanh":
            dx = dout * (1 - out * out)
        else:
            dx = dout - np.exp(out) * dout.sum(axis=1, keepdims=True)
        return dx.astype(dout.dtype, copy=False), {}


class Dropout(Module):
    """Inverted dropout; ``at_eval`` keeps it active outside train mode."""

    kind = "dropout"

    def __init__(self, p=0.5, at_eval=False):
        super().__init__()
        if not 0 <= p < 1:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p, self.at_eval = p, at_eval

    def spec(self):
        return LayerSpec(self.kind, dict(p=self.p, at_eval=self.at_eval))

    def active(self, ctx: Context) -> bool:
        return self.p > 0 and ctx.dropout and (ctx.train or self.at_eval)

    def forward(self, x, ctx=EVAL):
        if not self.active(ctx):
            return x, self._cache(x, None)
        keep = ctx.dropout_generator().random(x.shape) >= self.p
        mask = keep.astype(x.dtype) / x.dtype.type(1 - self.p)
        out = x * mask
        return out, self._cache(out, mask)

    def backward(self, dout, cache):
        self._check_cache(dout, cache)
        mask = cache.data
        return (dout if mask is None else dout * mask), {}


class Flatten(Module):
    kind = "flatten"

    def spec(self):
        return LayerSpec(self.kind)

    def forward(self, x, ctx=EVAL):
        out = x.reshape(x.shape[0], -1)
        return out, self._cache(out, x.shape)

    def backward(self, dout, cache):
        self._check_cache(dout, cache)
        return dout.reshape(cache.data), {}


class Tile(Module):
    """Broadcast an (N, C) vector over an H x W grid -> (N, C, H, W)."""

    kind = "tile"

    def __init__(self, size):
        super().__init__()
        self.size = tuple(size)

    def spec(self):
        return LayerSpec(self.kind, dict(size=self.size))

    def forward(self, x, ctx=EVAL):
        _check_input(x, 2, None, "tile")
        out = np.broadcast_to(x[:, :, None, None], x.shape + self.size).copy()
        return out, self._cache(out)

    def backward(self, dout, cache):
        self._check_cache(dout, cache)
        return dout.sum(axis=(2, 3)), {}


class ConcatSkip(Module):
    """Channel-wise concatenation of several inputs."""

    kind = "concat_skip"

    def spec(self):
        return LayerSpec(self.kind)

    def forward(self, xs, ctx=EVAL):
        xs = list(xs)
        if len({(x.shape[0],) + x.shape[2:] for x in xs}) != 1:
            raise ShapeError(f"concat_skip: incompatible shapes {[x.shape for x in xs]}")
        out = np.concatenate(xs, axis=1)
        return out, self._cache(out, [x.shape[1] for x in xs])

    def backward(self, dout, cache):
        self._check_cache(dout, cache)
        splits = np.cumsum(cache.data)[:-1]
        return np.split(dout, splits, axis=1), {}


class Sequential(Module):
    kind = "sequential"

    def __init__(self, layers):
        super().__init__()
        self.layers = [(str(name), layer) for name, layer in layers]

    def children(self):
        return self.layers

    def forward(self, x, ctx=EVAL):
        caches = []
        for _, layer in self.layers:
            x, cache = layer.forward(x, ctx)
            caches.append(cache)
        return x, self._cache(x, caches)

    def backward(self, dout, cache):
        self._check_cache(dout, cache)
        grads = {}
        for (name, layer), layer_cache in zip(reversed(self.layers), reversed(cache.data)):
            dout, layer_grads = layer.backward(dout, layer_cache)
            grads.update({f"{name}.{k}": v for k, v in layer_grads.items()})
        return dout, grads


class DenseBlock(Module):
    """Each conv layer sees the concatenation of the block input and all earlier outputs."""

    kind = "dense_block"

    def __init__(self, in_ch, n_layers, growth, activation="relu", kernel=3, rng=None, dtype=np.float32):
        super().__init__()
        self.in_ch, self.n_layers, self.growth = in_ch, n_layers, growth
        self.activation = activation
        self.layers = []
        for i in range(n_layers):
            ch = in_ch + i * growth
            self.layers.append((f"layer{i}", Sequential([
                ("conv", Conv2d(ch, growth, kernel, 1, None, rng, dtype, bias=False)),
                ("bn", BatchNorm(growth, dtype=dtype)),
                ("act", Activation(activation)),
            ])))
        self.concat = ConcatSkip()

    @property
    def out_ch(self):
        return self.in_ch + self.n_layers * self.growth

    def children(self):
        return self.layers

    def spec(self):
        return LayerSpec(self.kind, dict(in_ch=self.in_ch, n_layers=self.n_layers, growth=self.growth,
                                         activation=self.activation))

    def forward(self, x, ctx=EVAL):
        feats, caches = x, []
        for _, layer in self.layers:
            new, layer_cache = layer.forward(feats, ctx)
            feats, cat_cache = self.concat.forward([feats, new], ctx)
            caches.append((layer_cache, cat_cache))
        return feats, self._cache(feats, caches)

    def backward(self, dout, cache):
        self._check_cache(dout, cache)
        grads = {}
        dfeats = dout
        for (name, layer), (layer_cache, cat_cache) in zip(reversed(self.layers), reversed(cache.data)):
            dprev, dnew = self.concat.backward(dfeats, cat_cache)[0]
            dlayer_in, layer_grads = layer.backward(dnew, layer_cache)
            grads.update({f"{name}.{k}": v for k, v in layer_grads.items()})
            dfeats = dprev + dlayer_in
        return dfeats, grads


def build_layer(spec: LayerSpec, rng=None, dtype=np.float32) -> Module:
    """Instantiate a leaf layer from its declarative spec."""
    a = spec.args
    if spec.kind == "conv2d":
        return Conv2d(a["in_ch"], a["out_ch"], a.get("kernel", 3), a.get("stride", 1), a.get("padding"), rng, dtype,
                      a.get("bias", True))
    if spec.kind == "upsample_conv2d":
        return UpsampleConv2d(a["in_ch"], a["out_ch"], a.get("kernel", 3), a.get("scale", 2),
                              a.get("out_size"), rng, dtype, a.get("bias", True))
    if spec.kind == "fully_connected":
        return Linear(a["in_features"], a["out_features"], rng, dtype)
    if spec.kind == "batch_norm":
        return BatchNorm(a["channels"], a.get("momentum", 0.9), a.get("eps", 1e-5), dtype)
    if spec.kind == "activation":
        return Activation(a["fn"])
    if spec.kind == "dropout":
        return Dropout(a.get("p", 0.5), a.get("at_eval", False))
    if spec.kind == "upsample":
        return Upsample(a.get("scale", 2), a.get("out_size"))
    if spec.kind == "flatten":
        return Flatten()
    if spec.kind == "tile":
        return Tile(a["size"])
    if spec.kind == "concat_skip":
        return ConcatSkip()
    if spec.kind == "dense_block":
        return DenseBlock(a["in_ch"], a["n_layers"], a["growth"], a.get("activation", "relu"),
                          a.get("kernel", 3), rng, dtype)
    raise ValueError(f"unknown layer kind {spec.kind!r}")


def build_sequential(specs, rng=None, dtype=np.float32, names=None) -> Sequential:
    names = names or [f"{i}_{s.kind}" for i, s in enumerate(specs)]
    return Sequential([(n, build_layer(s, rng, dtype)) for n, s in zip(names, specs)])
