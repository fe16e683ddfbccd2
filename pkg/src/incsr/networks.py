"""Generator, discriminator and frozen identity embedder.

All models are plain named-parameter dicts plus architecture metadata.
Initialization is He-uniform on weights, zeros on biases.

Generator stage pipeline (between a head and a tail conv):

    residual block -> transpose conv (2x up) -> ReLU -> edge block

repeated three times, mapping 16x16 inputs to 128x128 outputs.  Each edge
block subtracts an average-pooled (low-pass) copy of the features from the
features themselves, reduces the difference to a single channel with a
pointwise conv, and concatenates that edge map back onto the features, so
stages after the first see one extra input channel.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    Tensor, avg_pool2d, concat, conv2d, dense, leaky_relu, relu, softmax,
    transpose_conv2d,
)
from .errors import ShapeError

# average-pool kernel per edge-block input size
EDGE_POOL_KERNELS = {32: 5, 64: 7, 128: 10}

DISC_CHANNELS = (128, 128, 256, 256, 256, 512, 512)
DISC_STRIDES = (1, 2, 1, 2, 1, 2, 2)
DISC_HIDDEN = 1024
LEAKY_SLOPE = 0.2

EMBEDDER_SEED = 2718  # pinned: the proxy embedder must be bit-identical everywhere
EMBEDDER_CLASSES = 512


def he_uniform(rng, shape, fan_in, dtype=np.float32):
    limit = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype),
                  requires_grad=True)


def zeros_param(shape, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def parameter_count(params):
    return sum(p.data.size for p in params.values())


def parameter_checksum(params):
    """SHA-256 over parameter bytes in sorted-name order."""
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(params[name].data).tobytes())
    return digest.hexdigest()


# ----------------------------------------------------------------------
# edge block


@dataclass
class EdgeBlockOutput:
    features_out: Tensor  # concat(features, edge_map): C+1 channels
    edge_map: Tensor      # [B, 1, H, W]


def edge_block(features, w, b):
    """High-frequency extraction: features minus their low-pass version.

    The pool kernel is keyed on spatial size (32->5, 64->7, 128->10); the
    raw multichannel edge response is reduced to one channel by the
    pointwise conv (w, b) and concatenated back onto the features.
    """
    _, _, h, wdim = features.shape
    if h != wdim or h not in EDGE_POOL_KERNELS:
        supported = sorted(EDGE_POOL_KERNELS)
        raise ShapeError(
            f"edge_block: unsupported spatial size {h}x{wdim}; "
            f"supported sizes are {supported}")
    blurred = avg_pool2d(features, EDGE_POOL_KERNELS[h])
    raw_edges = features - blurred
    edge_map = conv2d(raw_edges, w, b, stride=1, padding="same")
    return EdgeBlockOutput(concat([features, edge_map], axis=1), edge_map)


# ----------------------------------------------------------------------
# generator


@dataclass
class GeneratorOutput:
    sr: Tensor                 # [B, 3, 128, 128], unclamped
    edge_maps: list            # [B,1,32,32], [B,1,64,64], [B,1,128,128]
    bottleneck: Tensor         # output of the stage-3 residual block, [B,F,64,64]


@dataclass
class Generator:
    params: dict
    feature_width: int = 64
    extended_tail: bool = False

    N_EXTENDED = 6
    UP_KERNEL = 4

    @classmethod
    def init(cls, rng, feature_width=64, extended_tail=False, dtype=np.float32):
        F = feature_width
        p = {}

        def conv_param(name, in_c, out_c, k):
            p[f"{name}.w"] = he_uniform(rng, (out_c, in_c, k, k), in_c * k * k, dtype)
            p[f"{name}.b"] = zeros_param(out_c, dtype)

        conv_param("head", 3, F, 3)
        for s in range(1, 4):
            in_c = F if s == 1 else F + 1
            conv_param(f"stage{s}.res.conv1", in_c, F, 3)
            conv_param(f"stage{s}.res.conv2", F, F, 3)
            if in_c != F:
                conv_param(f"stage{s}.res.proj", in_c, F, 1)
            # transpose conv weight in conv2d layout [O, C, k, k]
            k = cls.UP_KERNEL
            p[f"stage{s}.up.w"] = he_uniform(rng, (F, F, k, k), F * k * k, dtype)
            p[f"stage{s}.up.b"] = zeros_param(F, dtype)
            conv_param(f"stage{s}.edge", F, 1, 1)
        conv_param("tail", F + 1, 3, 3)
        if extended_tail:
            for i in range(cls.N_EXTENDED):
                conv_param(f"ext{i}", 3, 3, 3)
        return cls(params=p, feature_width=F, extended_tail=extended_tail)

    def _residual(self, x, stage):
        p = self.params
        h = relu(conv2d(x, p[f"stage{stage}.res.conv1.w"], p[f"stage{stage}.res.conv1.b"]))
        h = relu(conv2d(h, p[f"stage{stage}.res.conv2.w"], p[f"stage{stage}.res.conv2.b"]))
        proj = f"stage{stage}.res.proj.w"
        skip = x if proj not in p else conv2d(x, p[proj], p[f"stage{stage}.res.proj.b"])
        return h + skip

    def forward(self, lr_batch, trace=None):
        """Map a [B,3,16,16] LR batch to SR output, edge maps and bottleneck.

        ``trace``, when given a list, collects (layer_name, output_shape)
        pairs for golden-shape tests.
        """
        if lr_batch.ndim != 4 or lr_batch.shape[1:] != (3, 16, 16):
            raise ShapeError(
                f"generator expects [B,3,16,16] input, got {lr_batch.shape}")

        def rec(name, t):
            if trace is not None:
                trace.append((name, t.shape))
            return t

        p = self.params
        x = rec("head", relu(conv2d(lr_batch, p["head.w"], p["head.b"])))
        edge_maps = []
        bottleneck = None
        for s in range(1, 4):
            x = rec(f"stage{s}.res", self._residual(x, s))
            if s == 3:
                bottleneck = x
            x = rec(f"stage{s}.up", relu(
                transpose_conv2d(x, p[f"stage{s}.up.w"], p[f"stage{s}.up.b"], stride=2)))
            out = edge_block(x, p[f"stage{s}.edge.w"], p[f"stage{s}.edge.b"])
            rec(f"stage{s}.edge_map", out.edge_map)
            x = rec(f"stage{s}.edge", out.features_out)
            edge_maps.append(out.edge_map)
        sr = rec("tail", conv2d(x, p["tail.w"], p["tail.b"]))
        if self.extended_tail:
            for i in range(self.N_EXTENDED):
                y = conv2d(sr, p[f"ext{i}.w"], p[f"ext{i}.b"])
                sr = rec(f"ext{i}", relu(y) if i < self.N_EXTENDED - 1 else y)
        return GeneratorOutput(sr=sr, edge_maps=edge_maps, bottleneck=bottleneck)


def init_student_from_teacher(teacher, rng=None, extended_tail=None):
    """Copy of the teacher generator to continue training from.

    Shared parameters are bit-identical copies; when the student adds the
    extended tail the new layers are randomly initialized.
    """
    if extended_tail is None:
        extended_tail = teacher.extended_tail
    if extended_tail and not teacher.extended_tail and rng is None:
        raise ValueError("rng required to initialize new extended-tail layers")
    student = Generator.init(
        rng if rng is not None else np.random.default_rng(0),
        feature_width=teacher.feature_width, extended_tail=extended_tail)
    for name, p in teacher.params.items():
        if name not in student.params:
            raise ShapeError(f"teacher parameter {name!r} has no student counterpart")
        if student.params[name].data.shape != p.data.shape:
            raise ShapeError(
                f"shape mismatch for {name!r}: teacher {p.data.shape} "
                f"vs student {student.params[name].data.shape}")
        student.params[name] = Tensor(p.data.copy(), requires_grad=True)
    return student


def freeze(model):
    """Mark all parameters as non-trainable (used for the teacher)."""
    for p in model.params.values():
        p.requires_grad = False
    return model


# ----------------------------------------------------------------------
# discriminator


@dataclass
class Discriminator:
    params: dict
    width_scale: float = 1.0
    channels: tuple = DISC_CHANNELS

    @classmethod
    def init(cls, rng, width_scale=1.0, dtype=np.float32):
        channels = tuple(max(1, int(round(c * width_scale))) for c in DISC_CHANNELS)
        p = {}
        in_c = 3
        for i, (out_c, _) in enumerate(zip(channels, DISC_STRIDES), start=1):
            p[f"conv{i}.w"] = he_uniform(rng, (out_c, in_c, 3, 3), in_c * 9, dtype)
            p[f"conv{i}.b"] = zeros_param(out_c, dtype)
            in_c = out_c
        flat = channels[-1] * 8 * 8  # strides [1,2,1,2,1,2,2]: 128 -> 8
        p["fc1.w"] = he_uniform(rng, (flat, DISC_HIDDEN), flat, dtype)
        p["fc1.b"] = zeros_param(DISC_HIDDEN, dtype)
        p["fc2.w"] = he_uniform(rng, (DISC_HIDDEN, 1), DISC_HIDDEN, dtype)
        p["fc2.b"] = zeros_param(1, dtype)
        return cls(params=p, width_scale=width_scale, channels=channels)

    def forward(self, images, trace=None):
        """[B,3,128,128] -> real/fake logits [B,1] (no sigmoid)."""
        if images.ndim != 4 or images.shape[1:] != (3, 128, 128):
            raise ShapeError(
                f"discriminator expects [B,3,128,128] input, got {images.shape}")
        p = self.params
        x = images
        for i, stride in enumerate(DISC_STRIDES, start=1):
            x = conv2d(x, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=stride)
            if i <= 6:
                x = leaky_relu(x, LEAKY_SLOPE)
            if trace is not None:
                trace.append((f"conv{i}", x.shape))
        b = x.shape[0]
        x = x.reshape(b, -1)
        x = leaky_relu(dense(x, p["fc1.w"], p["fc1.b"]), LEAKY_SLOPE)
        if trace is not None:
            trace.append(("fc1", x.shape))
        out = dense(x, p["fc2.w"], p["fc2.b"])
        if trace is not None:
            trace.append(("fc2", out.shape))
        return out


# ----------------------------------------------------------------------
# frozen identity embedder (proxy for a pretrained classifier)


@dataclass
class IdentityEmbedder:
    """Small fixed-seed conv stack whose parameters never train.

    Four stride-2 convs, global average pooling and a dense head producing
    512 class logits.  ``embed`` returns softmax probabilities; ``features``
    returns the pre-softmax logits used for the Frechet-distance metric.
    """

    params: dict = field(default_factory=dict)

    WIDTHS = (16, 32, 64, 128)

    def __post_init__(self):
        if self.params:
            return
        rng = np.random.default_rng(EMBEDDER_SEED)
        p = {}
        in_c = 3
        for i, out_c in enumerate(self.WIDTHS, start=1):
            p[f"conv{i}.w"] = he_uniform(rng, (out_c, in_c, 3, 3), in_c * 9)
            p[f"conv{i}.b"] = zeros_param(out_c)
            in_c = out_c
        p["fc.w"] = he_uniform(rng, (in_c, EMBEDDER_CLASSES), in_c)
        p["fc.b"] = zeros_param(EMBEDDER_CLASSES)
        for t in p.values():
            t.requires_grad = False
        self.params = p

    def features(self, images):
        """Pre-softmax 512-dim logits for a [B,3,128,128] batch."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(
                f"embedder expects [B,3,H,W] input, got {images.shape}")
        p = self.params
        x = images
        for i in range(1, len(self.WIDTHS) + 1):
            x = relu(conv2d(x, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=2))
        x = x.mean(axis=(2, 3))  # global average pool
        return dense(x, p["fc.w"], p["fc.b"])

    def embed(self, images):
        """Softmax-normalized class distributions, one row per image."""
        return softmax(self.features(images), axis=1)
