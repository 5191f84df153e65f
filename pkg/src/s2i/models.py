"""Audio autoencoder, dense generator, conditioned discriminator, informativity CNN.

All networks are assembled from declarative :class:`~s2i.nn.LayerSpec` lists
derived from a :class:`ModelSchema`.  Two profiles exist: ``reference``
(100x128 spectrograms, 3x96x96 images) and ``tiny`` (20x32 spectrograms,
3x24x24 images) for CI-scale runs; both keep the layer counts that matter
(13 + 13 autoencoder convs, dense-block generator, D mirroring A_E).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dsp import Spectrogram
from .nn import (
    EVAL,
    Activation,
    BatchNorm,
    ConcatSkip,
    Context,
    Conv2d,
    DenseBlock,
    Dropout,
    LayerSpec,
    Module,
    RngState,
    Sequential,
    ShapeError,
    Tile,
    Upsample,
    UpsampleConv2d,
    build_sequential,
    schema_hash,
)

REFERENCE_DIMS = (128, 256, 512, 1024, 2048)
TINY_DIMS = (8, 16, 32)
ENCODER_DEPTH = 13


@dataclass(frozen=True)
class ModelSchema:
    profile: str = "tiny"
    f: int = 16
    spec_shape: tuple[int, int] = (20, 32)
    image_size: int = 24
    channels: int = 3
    encoder_depth: int = ENCODER_DEPTH
    encoder_base: int = 8
    encoder_cap: int = 64
    generator_kind: str = "dense"
    generator_blocks: int = 4
    generator_layers: int = 2
    generator_growth: int = 8
    classifier_base: int = 8
    classifier_cap: int = 32
    classifier_hidden: int = 32
    activation: str = "relu"
    decoder_dropout: float = 0.5
    generator_dropout: float = 0.5
    discriminator_dropout: float = 0.5
    classifier_dropout: float = 0.5

    def __post_init__(self):
        if self.f < 1:
            raise ValueError("embedding dimension must be >= 1")
        if self.generator_kind not in ("dense", "sequential"):
            raise ValueError(f"unknown generator kind {self.generator_kind!r}")
        start = self.image_size / 2 ** (self.generator_blocks - 1)
        if self.generator_kind == "dense" and start != int(start):
            raise ValueError(
                f"image size {self.image_size} not divisible by 2^{self.generator_blocks - 1}"
            )
        for name in ("decoder_dropout", "generator_dropout", "discriminator_dropout", "classifier_dropout"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must be in [0, 1)")

    @classmethod
    def reference(cls, f: int = 512, **overrides) -> "ModelSchema":
        base = dict(profile="reference", f=f, spec_shape=(100, 128), image_size=96,
                    encoder_base=16, encoder_cap=512, generator_blocks=6, generator_layers=4,
                    generator_growth=16, classifier_base=16, classifier_cap=256, classifier_hidden=128)
        return cls(**{**base, **overrides})

    @classmethod
    def tiny(cls, f: int = 16, **overrides) -> "ModelSchema":
        return cls(**{**dict(profile="tiny", f=f), **overrides})

    @classmethod
    def for_profile(cls, profile: str, f: int, **overrides) -> "ModelSchema":
        if profile == "reference":
            return cls.reference(f, **overrides)
        if profile == "tiny":
            return cls.tiny(f, **overrides)
        raise ValueError(f"unknown profile {profile!r}")

    def with_f(self, f: int) -> "ModelSchema":
        return replace(self, f=f)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spec_shape"] = list(self.spec_shape)
        return d

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.channels, self.image_size, self.image_size


# -- layout planning ---------------------------------------------------------


@dataclass(frozen=True)
class ConvStep:
    stride: int
    in_ch: int
    out_ch: int
    in_size: tuple[int, int]
    out_size: tuple[int, int]


def strided_positions(n_down: int, depth: int) -> list[int]:
    """Indices of the stride-2 layers: first and last are strided, stride-1 fill spread between."""
    if n_down > depth:
        raise ValueError(f"need {n_down} downsampling convs but depth is only {depth}")
    if n_down == 1:
        return [depth - 1]
    fill = depth - n_down
    gaps = n_down - 1
    positions, idx = [], 0
    for g in range(n_down):
        positions.append(idx)
        idx += 1
        if g < gaps:
            idx += fill // gaps + (1 if g < fill % gaps else 0)
    return positions


def encoder_plan(in_ch: int, size: tuple[int, int], depth: int, base: int, cap: int, out_ch: int) -> list[ConvStep]:
    """3x3 conv stack reducing ``size`` to 1x1 with stride-2 convs, channels doubling."""
    n_down = max(math.ceil(math.log2(max(size))), 1)
    strided = set(strided_positions(n_down, depth))
    steps, ch, cur = [], in_ch, tuple(size)
    for i in range(depth):
        stride = 2 if i in strided else 1
        if i == depth - 1:
            nxt = out_ch
        elif i == 0:
            nxt = base
        elif stride == 2:
            nxt = min(2 * ch, cap)
        else:
            nxt = ch
        out_size = tuple((s - 1) // stride + 1 for s in cur)
        steps.append(ConvStep(stride, ch, nxt, cur, out_size))
        ch, cur = nxt, out_size
    if cur != (1, 1):
        raise ValueError(f"encoder plan ends at {cur}, expected 1x1")
    return steps


def mirror_plan(plan: list[ConvStep], out_ch: int) -> list[ConvStep]:
    steps = []
    for i, step in enumerate(reversed(plan)):
        last = i == len(plan) - 1
        steps.append(ConvStep(step.stride, step.out_ch, out_ch if last else step.in_ch, step.out_size, step.in_size))
    return steps


def _encoder_specs(plan, activation, dropout=0.0, final_bn=True, final_act="tanh", split_last=False):
    specs = []
    for i, st in enumerate(plan):
        last = i == len(plan) - 1
        specs.append(LayerSpec("conv2d", dict(in_ch=st.in_ch, out_ch=st.out_ch, kernel=3, stride=st.stride,
                                               padding=1, bias=last and not final_bn)))
        if not last:
            specs += [LayerSpec("batch_norm", dict(channels=st.out_ch)), LayerSpec("activation", dict(fn=activation))]
            if dropout:
                specs.append(LayerSpec("dropout", dict(p=dropout)))
        else:
            if final_bn:
                specs.append(LayerSpec("batch_norm", dict(channels=st.out_ch)))
            specs.append(LayerSpec("activation", dict(fn=final_act)))
    return specs


def _decoder_specs(plan, activation, dropout, at_eval=False):
    specs = []
    for i, st in enumerate(plan):
        last = i == len(plan) - 1
        if st.stride == 2:
            specs.append(LayerSpec("upsample_conv2d", dict(in_ch=st.in_ch, out_ch=st.out_ch, kernel=3, scale=2,
                                                            out_size=st.out_size, bias=last)))
        else:
            specs.append(LayerSpec("conv2d", dict(in_ch=st.in_ch, out_ch=st.out_ch, kernel=3, stride=1,
                                                   padding=1, bias=last)))
        if last:
            specs.append(LayerSpec("activation", dict(fn="tanh")))
        else:
            specs += [LayerSpec("batch_norm", dict(channels=st.out_ch)), LayerSpec("activation", dict(fn=activation))]
            if dropout:
                specs.append(LayerSpec("dropout", dict(p=dropout, at_eval=at_eval)))
    return specs


def _names(specs):
    counts, names = {}, []
    for s in specs:
        counts[s.kind] = counts.get(s.kind, 0) + 1
        names.append(f"{s.kind}{counts[s.kind] - 1}")
    return names


def _seq(specs, rng, dtype):
    return build_sequential(specs, rng, dtype, _names(specs))


def count_convs(module: Module) -> int:
    return sum(1 for _, leaf in module.leaves() if leaf.kind in ("conv2d", "upsample_conv2d"))


# -- networks ----------------------------------------------------------------


class Network(Module):
    """A named model with a layer table and schema hash."""

    name = "network"

    def __init__(self, schema: ModelSchema):
        super().__init__()
        self.schema = schema

    def layer_specs(self) -> list[dict]:
        return [{"name": name, **leaf.spec().to_dict()} for name, leaf in self.leaves()]

    def schema_digest(self) -> bytes:
        return schema_hash({"network": self.name, "schema": self.schema.to_dict(), "layers": self.layer_specs()})

    def describe(self) -> list[tuple[str, str, int]]:
        rows = []
        for name, leaf in self.leaves():
            rows.append((name, leaf.kind, sum(p.size for p in leaf.params.values())))
        return rows


class AudioEncoder(Network):
    """A_E: (N, h, w) spectrograms -> (N, f) TanH embeddings."""

    name = "encoder"

    def __init__(self, schema: ModelSchema, rng=None, dtype=np.float32):
        super().__init__(schema)
        self.plan = encoder_plan(1, schema.spec_shape, schema.encoder_depth, schema.encoder_base,
                                 schema.encoder_cap, schema.f)
        self.trunk = _seq(_encoder_specs(self.plan, "relu"), rng, dtype)

    def children(self):
        return [("trunk", self.trunk)]

    def forward(self, spec, ctx=EVAL):
        spec = np.asarray(spec)
        if spec.ndim != 3 or spec.shape[1:] != tuple(self.schema.spec_shape):
            raise ShapeError(f"encoder: expected (N, {self.schema.spec_shape[0]}, {self.schema.spec_shape[1]}), "
                             f"got {spec.shape}")
        out, cache = self.trunk.forward(spec[:, None], ctx)
        out = out.reshape(out.shape[0], -1)
        return out, self._cache(out, cache)

    def backward(self, dout, cache):
        self._check_cache(dout, cache)
        dx, grads = self.trunk.backward(dout[:, :, None, None], cache.data)
        return dx[:, 0], {f"trunk.{k}": v for k, v in grads.items()}


class AudioDecoder(Network):
    """A_D: (N, f) -> (N, h, w), dropout after every inner layer."""

    name = "decoder"

    def __init__(self, schema: ModelSchema, rng=None, dtype=np.float32):
        super().__init__(schema)
        enc = encoder_plan(1, schema.spec_shape, schema.encoder_depth, schema.encoder_base,
                           schema.encoder_cap, schema.f)
        self.plan = mirror_plan(enc, 1)
        self.trunk = _seq(_decoder_specs(self.plan, "relu", schema.decoder_dropout), rng, dtype)

    def children(self):
        return [("trunk", self.trunk)]

    def forward(self, x, ctx=EVAL):
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.schema.f:
            raise ShapeError(f"decoder: expected (N, {self.schema.f}), got {x.shape}")
        out, cache = self.trunk.forward(x[:, :, None, None], ctx)
        out = out[:, 0]
        return out, self._cache(out, cache)

    def backward(self, dout, cache):
        self._check_cache(dout, cache)
        dx, grads = self.trunk.backward(dout[:, None], cache.data)
        return dx[:, :, 0, 0], {f"trunk.{k}": v for k, v in grads.items()}


class Generator(Network):
    """G: (N, f) -> (N, c, H, W).

    The dense variant tiles the embedding over a small grid and runs dense
    blocks separated by dropout (kept active at eval time) and 2x nearest
    upsampling, followed by a 3x3 TanH head.
    """

    name = "generator"

    def __init__(self, schema: ModelSchema, rng=None, dtype=np.float32):
        super().__init__(schema)
        s = schema
        if s.generator_kind == "sequential":
            enc = encoder_plan(s.channels, (s.image_size, s.image_size), s.encoder_depth, s.encoder_base,
                               s.encoder_cap, s.f)
            self.body = _seq(_decoder_specs(mirror_plan(enc, s.channels), s.activation, s.generator_dropout,
                                            at_eval=True), rng, dtype)
            self.stem = None
            return
        start = s.image_size // 2 ** (s.generator_blocks - 1)
        self.stem = Tile((start, start))
        layers, ch = [], s.f
        for b in range(s.generator_blocks):
            block = DenseBlock(ch, s.generator_layers, s.generator_growth, s.activation, 3, rng, dtype)
            layers.append((f"block{b}", block))
            ch = block.out_ch
            if b < s.generator_blocks - 1:
                if s.generator_dropout:
                    layers.append((f"dropout{b}", Dropout(s.generator_dropout, at_eval=True)))
                layers.append((f"upsample{b}", Upsample(2)))
        layers.append(("head", Conv2d(ch, s.channels, 3, 1, 1, rng, dtype, bias=True)))
        layers.append(("head_act", Activation("tanh")))
        self.body = Sequential(layers)

    def children(self):
        return [("body", self.body)]

    def forward(self, x, ctx=EVAL):
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.schema.f:
            raise ShapeError(f"generator: expected (N, {self.schema.f}), got {x.shape}")
        if self.stem is not None:
            h, stem_cache = self.stem.forward(x, ctx)
        else:
            h, stem_cache = x[:, :, None, None], None
        out, cache = self.body.forward(h, ctx)
        return out, self._cache(out, (stem_cache, cache))

    def backward(self, dout, cache):
        self._check_cache(dout, cache)
        stem_cache, body_cache = cache.data
        dh, grads = self.body.backward(dout, body_cache)
        dx = self.stem.backward(dh, stem_cache)[0] if self.stem is not None else dh[:, :, 0, 0]
        return dx, {f"body.{k}": v for k, v in grads.items()}


class Discriminator(Network):
    """D: (image, embedding) -> RC-score in [-1, 1].

    Same conv trunk as the audio encoder on RGB input; the embedding is tiled
    over the penultimate feature map and concatenated channel-wise before the
    final conv, which outputs the scalar score.
    """

    name = "discriminator"

    def __init__(self, schema: ModelSchema, rng=None, dtype=np.float32):
        super().__init__(schema)
        s = schema
        plan = encoder_plan(s.channels, (s.image_size, s.image_size), s.encoder_depth, s.encoder_base,
                            s.encoder_cap, 1)
        self.plan = plan
        last = plan[-1]
        trunk_plan = plan[:-1]
        specs = []
        for st in trunk_plan:
            specs += [LayerSpec("conv2d", dict(in_ch=st.in_ch, out_ch=st.out_ch, kernel=3, stride=st.stride,
                                                padding=1, bias=False)),
                      LayerSpec("batch_norm", dict(channels=st.out_ch)),
                      LayerSpec("activation", dict(fn=s.activation))]
            if s.discriminator_dropout:
                specs.append(LayerSpec("dropout", dict(p=s.discriminator_dropout)))
        self.trunk = _seq(specs, rng, dtype)
        self.tile = Tile(last.in_size)
        self.concat = ConcatSkip()
        self.head = _seq([
            LayerSpec("conv2d", dict(in_ch=last.in_ch + s.f, out_ch=1, kernel=3, stride=last.stride, padding=1)),
            LayerSpec("activation", dict(fn="tanh")),
        ], rng, dtype)

    def children(self):
        return [("trunk", self.trunk), ("head", self.head)]

    def leaves(self, prefix=""):
        yield from self.trunk.leaves(prefix + "trunk.")
        yield prefix + "tile", self.tile
        yield prefix + "concat", self.concat
        yield from self.head.leaves(prefix + "head.")

    def forward(self, inputs, ctx=EVAL):
        img, x = inputs
        img, x = np.asarray(img), np.asarray(x)
        if img.ndim != 4 or img.shape[1:] != self.schema.image_shape:
            raise ShapeError(f"discriminator: expected image (N, {self.schema.image_shape}), got {img.shape}")
        if x.ndim != 2 or x.shape != (img.shape[0], self.schema.f):
            raise ShapeError(f"discriminator: expected embedding ({img.shape[0]}, {self.schema.f}), got {x.shape}")
        h, trunk_cache = self.trunk.forward(img, ctx)
        t, tile_cache = self.tile.forward(x.astype(h.dtype, copy=False), ctx)
        z, cat_cache = self.concat.forward([h, t], ctx)
        out, head_cache = self.head.forward(z, ctx)
        out = out.reshape(-1)
        return out, self._cache(out, (trunk_cache, tile_cache, cat_cache, head_cache))

    def backward(self, dout, cache):
        self._check_cache(dout, cache)
        trunk_cache, tile_cache, cat_cache, head_cache = cache.data
        dz, head_grads = self.head.backward(dout.reshape(-1, 1, 1, 1), head_cache)
        (dh, dt), _ = self.concat.backward(dz, cat_cache)
        dx, _ = self.tile.backward(dt, tile_cache)
        dimg, trunk_grads = self.trunk.backward(dh, trunk_cache)
        grads = {f"trunk.{k}": v for k, v in trunk_grads.items()}
        grads.update({f"head.{k}": v for k, v in head_grads.items()})
        return (dimg, dx), grads


class InformativityClassifier(Network):
    """Five stride-2 convs and two fully connected layers with a log-softmax head."""

    name = "classifier"

    def __init__(self, schema: ModelSchema, rng=None, dtype=np.float32, n_classes: int = 2):
        super().__init__(schema)
        s = schema
        specs, ch, size = [], s.channels, s.image_size
        for i in range(5):
            out = min(s.classifier_base * 2**i, s.classifier_cap)
            specs += [LayerSpec("conv2d", dict(in_ch=ch, out_ch=out, kernel=3, stride=2, padding=1, bias=False)),
                      LayerSpec("batch_norm", dict(channels=out)),
                      LayerSpec("activation", dict(fn="relu"))]
            if s.classifier_dropout:
                specs.append(LayerSpec("dropout", dict(p=s.classifier_dropout)))
            ch, size = out, (size - 1) // 2 + 1
        specs += [LayerSpec("flatten"),
                  LayerSpec("fully_connected", dict(in_features=ch * size * size, out_features=s.classifier_hidden)),
                  LayerSpec("batch_norm", dict(channels=s.classifier_hidden)),
                  LayerSpec("activation", dict(fn="relu"))]
        if s.classifier_dropout:
            specs.append(LayerSpec("dropout", dict(p=s.classifier_dropout)))
        specs += [LayerSpec("fully_connected", dict(in_features=s.classifier_hidden, out_features=n_classes)),
                  LayerSpec("activation", dict(fn="log_softmax"))]
        self.trunk = _seq(specs, rng, dtype)

    def children(self):
        return [("trunk", self.trunk)]

    def forward(self, img, ctx=EVAL):
        img = np.asarray(img)
        if img.ndim != 4 or img.shape[1:] != self.schema.image_shape:
            raise ShapeError(f"classifier: expected (N, {self.schema.image_shape}), got {img.shape}")
        out, cache = self.trunk.forward(img, ctx)
        return out, self._cache(out, cache)

    def backward(self, dout, cache):
        self._check_cache(dout, cache)
        dx, grads = self.trunk.backward(dout, cache.data)
        return dx, {f"trunk.{k}": v for k, v in grads.items()}


@dataclass
class Networks:
    schema: ModelSchema
    encoder: AudioEncoder
    decoder: AudioDecoder
    generator: Generator
    discriminator: Discriminator
    param_counts: dict[str, int] = field(default_factory=dict)

    def items(self):
        return [("encoder", self.encoder), ("decoder", self.decoder),
                ("generator", self.generator), ("discriminator", self.discriminator)]


def build_model(schema: ModelSchema, rng: RngState | int, dtype=np.float32) -> Networks:
    """Build and Xavier-initialize A_E, A_D, G and D (biases zero).

    Each network draws from its own position of the ``init`` stream, so the
    parameters are a pure function of the seed and schema.
    """
    if isinstance(rng, int):
        rng = RngState(rng)
    enc = AudioEncoder(schema, rng.next("init"), dtype)
    dec = AudioDecoder(schema, rng.next("init"), dtype)
    gen = Generator(schema, rng.next("init"), dtype)
    dis = Discriminator(schema, rng.next("init"), dtype)
    nets = Networks(schema, enc, dec, gen, dis)
    nets.param_counts = {name: net.num_params() for name, net in nets.items()}
    return nets


def build_classifier(schema: ModelSchema, rng: RngState | int, dtype=np.float32) -> InformativityClassifier:
    if isinstance(rng, int):
        rng = RngState(rng)
    return InformativityClassifier(schema, rng.next("init"), dtype)


def _as_batch(values, ndim):
    arr = values.values if isinstance(values, Spectrogram) else np.asarray(values)
    single = arr.ndim == ndim - 1
    return (arr[None] if single else arr), single


def _ctx(mode: str, rng: RngState | None, dropout: bool = True) -> Context:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return Context(train=mode == "train", rng=rng, dropout=dropout)


def encode_audio(encoder: AudioEncoder, spec) -> np.ndarray:
    """Embed one spectrogram ``(h, w)`` or a batch ``(N, h, w)``; always eval mode."""
    batch, single = _as_batch(spec, 3)
    out = encoder(batch.astype(np.float32, copy=False), EVAL)
    return out[0] if single else out


def decode_audio(decoder: AudioDecoder, x, mode: str = "eval", rng: RngState | None = None) -> np.ndarray:
    batch, single = _as_batch(x, 2)
    out = decoder(batch.astype(np.float32, copy=False), _ctx(mode, rng))
    return out[0] if single else out


def generate_image(generator: Generator, x, mode: str = "eval", rng: RngState | None = None,
                   dropout: bool = True) -> np.ndarray:
    """Translate embeddings to images.

    Between-block dropout stays active in eval mode unless ``dropout=False``.
    """
    batch, single = _as_batch(x, 2)
    out = generator(batch.astype(np.float32, copy=False), _ctx(mode, rng, dropout))
    return out[0] if single else out


def discriminate(discriminator: Discriminator, img, x, mode: str = "eval", rng: RngState | None = None) -> np.ndarray:
    imgs, single = _as_batch(img, 4)
    xs, _ = _as_batch(x, 2)
    out = discriminator((imgs.astype(np.float32, copy=False), xs.astype(np.float32, copy=False)), _ctx(mode, rng))
    return out[0] if single else out
