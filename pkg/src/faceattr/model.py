"""Residual convolutional networks with swappable classification heads.

A network is described by a plain-data spec (stem, stages of residual
blocks, head) that serializes to a JSON document, and realized as a
parameter dictionary plus batchnorm running statistics.  Presets cover
the 18/34/50-layer configurations; arbitrary small nets can be built
from the same spec type for fast experiments.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ContractError, ShapeError
from .tensor import Tensor

BLOCK_EXPANSION = {"basic": 1, "bottleneck": 4}

PRESET_LAYOUT = {
    18: ("basic", (2, 2, 2, 2)),
    34: ("basic", (3, 4, 6, 3)),
    50: ("bottleneck", (3, 4, 6, 3)),
}

STAGE_WIDTHS = (64, 128, 256, 512)


@dataclass(frozen=True)
class HeadSpec:
    """Output head: dense layer then softmax or sigmoid."""

    kind: str
    classes: int

    def __post_init__(self):
        if self.kind not in ("softmax", "sigmoid"):
            raise ContractError(f"head kind must be softmax or sigmoid, got {self.kind!r}")
        if self.kind == "softmax" and self.classes < 2:
            raise ContractError(f"softmax head needs at least 2 classes, got {self.classes}")
        if self.kind == "sigmoid" and self.classes < 1:
            raise ContractError(f"sigmoid head needs at least 1 unit, got {self.classes}")


@dataclass(frozen=True)
class StemSpec:
    """Entry convolution; optionally followed by batchnorm and a 3x3/2 maxpool."""

    out_channels: int = 64
    kernel: int = 7
    stride: int = 2
    pad: int = 3
    pool: bool = True
    norm: bool = True

    def __post_init__(self):
        if self.out_channels < 1 or self.kernel < 1 or self.stride < 1 or self.pad < 0:
            raise ContractError(f"invalid stem geometry {self}")


@dataclass(frozen=True)
class StageSpec:
    """A run of residual blocks at one width; stride applies to the first block."""

    blocks: int
    channels: int
    stride: int

    def __post_init__(self):
        if self.blocks < 1:
            raise ContractError(f"stage needs at least one block, got {self.blocks}")
        if self.channels < 1:
            raise ContractError(f"stage width must be positive, got {self.channels}")
        if self.stride not in (1, 2):
            raise ContractError(f"stage stride must be 1 or 2, got {self.stride}")


@dataclass(frozen=True)
class NetworkSpec:
    """Complete architecture description; serializes to a JSON document."""

    block: str
    stem: StemSpec
    stages: tuple
    head: HeadSpec
    in_channels: int = 3
    image_size: int = 224

    def __post_init__(self):
        if self.block not in BLOCK_EXPANSION:
            raise ContractError(f"block must be basic or bottleneck, got {self.block!r}")
        if self.in_channels < 1:
            raise ContractError(f"in_channels must be positive, got {self.in_channels}")
        object.__setattr__(self, "stages", tuple(self.stages))

    @property
    def expansion(self):
        return BLOCK_EXPANSION[self.block]

    @property
    def feature_channels(self):
        """Channels entering the head (after global average pooling)."""
        if self.stages:
            return self.stages[-1].channels * self.expansion
        return self.stem.out_channels

    def to_doc(self):
        return {
            "block": self.block,
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "stem": {
                "out_channels": self.stem.out_channels,
                "kernel": self.stem.kernel,
                "stride": self.stem.stride,
                "pad": self.stem.pad,
                "pool": self.stem.pool,
                "norm": self.stem.norm,
            },
            "stages": [
                {"blocks": s.blocks, "channels": s.channels, "stride": s.stride}
                for s in self.stages
            ],
            "head": {"kind": self.head.kind, "classes": self.head.classes},
        }

    @classmethod
    def from_doc(cls, doc):
        try:
            return cls(
                block=doc["block"],
                stem=StemSpec(**doc["stem"]),
                stages=tuple(StageSpec(**s) for s in doc["stages"]),
                head=HeadSpec(**doc["head"]),
                in_channels=doc["in_channels"],
                image_size=doc["image_size"],
            )
        except (KeyError, TypeError) as exc:
            raise ContractError(f"malformed architecture document: {exc}") from exc


def preset_spec(depth, head, in_channels=3, image_size=224):
    """Spec for one of the published depths (18, 34, 50)."""
    if depth not in PRESET_LAYOUT:
        raise ContractError(f"no preset for depth {depth}; choose from {sorted(PRESET_LAYOUT)}")
    block, counts = PRESET_LAYOUT[depth]
    stages = tuple(
        StageSpec(blocks=n, channels=w, stride=1 if i == 0 else 2)
        for i, (n, w) in enumerate(zip(counts, STAGE_WIDTHS))
    )
    return NetworkSpec(block=block, stem=StemSpec(), stages=stages, head=head,
                       in_channels=in_channels, image_size=image_size)


def small_spec(head, stem_channels=8, stage_blocks=(1, 1), stage_channels=(8, 16),
               block="basic", in_channels=3, image_size=32, stem_norm=True,
               stem_pool=False, stem_kernel=3, stem_stride=1):
    """Compact spec for experiments and fast functional runs."""
    if len(stage_blocks) != len(stage_channels):
        raise ContractError("stage_blocks and stage_channels must have equal length")
    pad = (stem_kernel - 1) // 2
    stages = tuple(
        StageSpec(blocks=n, channels=c, stride=1 if i == 0 else 2)
        for i, (n, c) in enumerate(zip(stage_blocks, stage_channels))
    )
    return NetworkSpec(
        block=block,
        stem=StemSpec(out_channels=stem_channels, kernel=stem_kernel,
                      stride=stem_stride, pad=pad, pool=stem_pool, norm=stem_norm),
        stages=stages, head=head, in_channels=in_channels, image_size=image_size)


def _he_conv(rng, out_ch, in_ch, k, dtype):
    fan_in = in_ch * k * k
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=(out_ch, in_ch, k, k)).astype(dtype),
                  requires_grad=True)


def _he_dense(rng, fan_in, fan_out, dtype):
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dtype),
                  requires_grad=True)


def _bn_params(channels, dtype):
    gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
    beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
    return gamma, beta


class Model:
    """A realized network: spec, parameters, and batchnorm running stats.

    Parameters live in an insertion-ordered dict keyed by dotted names
    (``stem.conv.w``, ``s0.b1.conv2.w``, ``head.dense.b``); batchnorm
    running statistics are keyed by the layer prefix (``stem.bn``).
    Convolutions carry no bias; the head dense layer does.
    """

    def __init__(self, spec, params, bn_states):
        self.spec = spec
        self.params = params
        self.bn_states = bn_states

    # -- construction -------------------------------------------------

    @classmethod
    def build(cls, spec, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        params = {}
        states = {}

        def add_bn(prefix, channels):
            gamma, beta = _bn_params(channels, dtype)
            params[prefix + ".gamma"] = gamma
            params[prefix + ".beta"] = beta
            states[prefix] = ops.BatchNormState(channels, dtype=dtype)

        params["stem.conv.w"] = _he_conv(rng, spec.stem.out_channels,
                                         spec.in_channels, spec.stem.kernel, dtype)
        if spec.stem.norm:
            add_bn("stem.bn", spec.stem.out_channels)

        in_ch = spec.stem.out_channels
        exp = spec.expansion
        for si, stage in enumerate(spec.stages):
            out_ch = stage.channels * exp
            for bi in range(stage.blocks):
                stride = stage.stride if bi == 0 else 1
                name = f"s{si}.b{bi}"
                if spec.block == "basic":
                    params[f"{name}.conv1.w"] = _he_conv(rng, stage.channels, in_ch, 3, dtype)
                    add_bn(f"{name}.bn1", stage.channels)
                    params[f"{name}.conv2.w"] = _he_conv(rng, stage.channels, stage.channels, 3, dtype)
                    add_bn(f"{name}.bn2", stage.channels)
                else:
                    mid = stage.channels
                    params[f"{name}.conv1.w"] = _he_conv(rng, mid, in_ch, 1, dtype)
                    add_bn(f"{name}.bn1", mid)
                    params[f"{name}.conv2.w"] = _he_conv(rng, mid, mid, 3, dtype)
                    add_bn(f"{name}.bn2", mid)
                    params[f"{name}.conv3.w"] = _he_conv(rng, out_ch, mid, 1, dtype)
                    add_bn(f"{name}.bn3", out_ch)
                if stride != 1 or in_ch != out_ch:
                    params[f"{name}.down.conv.w"] = _he_conv(rng, out_ch, in_ch, 1, dtype)
                    add_bn(f"{name}.down.bn", out_ch)
                in_ch = out_ch

        feat = spec.feature_channels
        params["head.dense.w"] = _he_dense(rng, feat, spec.head.classes, dtype)
        params["head.dense.b"] = Tensor(np.zeros(spec.head.classes, dtype=dtype),
                                        requires_grad=True)
        return cls(spec, params, states)

    # -- parameter utilities -------------------------------------------

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype):
        """Convert all parameters and running stats in place."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        for key in list(self.bn_states):
            self.bn_states[key] = self.bn_states[key].astype(dtype)
        return self

    def param_dtype(self):
        """The dtype the parameters are stored in."""
        return next(iter(self.params.values())).data.dtype

    def count_params(self):
        """Parameter count computed from the architecture alone, no arrays."""
        spec = self.spec
        k = spec.stem.kernel
        total = spec.stem.out_channels * spec.in_channels * k * k
        if spec.stem.norm:
            total += 2 * spec.stem.out_channels
        in_ch = spec.stem.out_channels
        exp = spec.expansion
        for stage in spec.stages:
            out_ch = stage.channels * exp
            for bi in range(stage.blocks):
                stride = stage.stride if bi == 0 else 1
                if spec.block == "basic":
                    total += stage.channels * in_ch * 9 + 2 * stage.channels
                    total += stage.channels * stage.channels * 9 + 2 * stage.channels
                else:
                    mid = stage.channels
                    total += mid * in_ch + 2 * mid
                    total += mid * mid * 9 + 2 * mid
                    total += out_ch * mid + 2 * out_ch
                if stride != 1 or in_ch != out_ch:
                    total += out_ch * in_ch + 2 * out_ch
                in_ch = out_ch
        total += spec.feature_channels * spec.head.classes + spec.head.classes
        return total

    def head_param_count(self):
        return self.spec.feature_channels * self.spec.head.classes + self.spec.head.classes

    def replace_head(self, head, seed=0):
        """New model sharing this backbone with a freshly initialized head.

        Backbone parameter tensors and running stats are shared, not
        copied, so further training updates both views.
        """
        rng = np.random.default_rng(seed)
        spec = NetworkSpec(block=self.spec.block, stem=self.spec.stem,
                           stages=self.spec.stages, head=head,
                           in_channels=self.spec.in_channels,
                           image_size=self.spec.image_size)
        params = {n: p for n, p in self.params.items() if not n.startswith("head.")}
        dtype = params["stem.conv.w"].dtype
        params["head.dense.w"] = _he_dense(rng, spec.feature_channels, head.classes, dtype)
        params["head.dense.b"] = Tensor(np.zeros(head.classes, dtype=dtype),
                                        requires_grad=True)
        return Model(spec, params, self.bn_states)

    # -- forward -------------------------------------------------------

    def _bn(self, x, prefix, mode):
        return ops.batchnorm2d(x, self.params[prefix + ".gamma"],
                               self.params[prefix + ".beta"],
                               self.bn_states[prefix], mode=mode)

    def _block(self, x, name, in_ch, out_ch, stride, mode):
        p = self.params
        if self.spec.block == "basic":
            h = ops.conv2d(x, p[f"{name}.conv1.w"], stride=stride, pad=1)
            h = ops.relu(self._bn(h, f"{name}.bn1", mode))
            h = ops.conv2d(h, p[f"{name}.conv2.w"], stride=1, pad=1)
            h = self._bn(h, f"{name}.bn2", mode)
        else:
            h = ops.conv2d(x, p[f"{name}.conv1.w"], stride=stride, pad=0)
            h = ops.relu(self._bn(h, f"{name}.bn1", mode))
            h = ops.conv2d(h, p[f"{name}.conv2.w"], stride=1, pad=1)
            h = ops.relu(self._bn(h, f"{name}.bn2", mode))
            h = ops.conv2d(h, p[f"{name}.conv3.w"], stride=1, pad=0)
            h = self._bn(h, f"{name}.bn3", mode)
        if f"{name}.down.conv.w" in p:
            sc = ops.conv2d(x, p[f"{name}.down.conv.w"], stride=stride, pad=0)
            sc = self._bn(sc, f"{name}.down.bn", mode)
        else:
            sc = x
        return ops.relu(ops.add(h, sc))

    def forward_logits(self, x, mode="train"):
        """Raw head outputs [N, classes], before softmax/sigmoid."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.data.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"expected input [N, {self.spec.in_channels}, H, W], got {x.shape}")
        spec = self.spec
        h = ops.conv2d(x, self.params["stem.conv.w"],
                       stride=spec.stem.stride, pad=spec.stem.pad)
        if spec.stem.norm:
            h = self._bn(h, "stem.bn", mode)
        h = ops.relu(h)
        if spec.stem.pool:
            h = ops.maxpool2d(h, kernel=3, stride=2, pad=1)
        in_ch = spec.stem.out_channels
        exp = spec.expansion
        for si, stage in enumerate(spec.stages):
            out_ch = stage.channels * exp
            for bi in range(stage.blocks):
                stride = stage.stride if bi == 0 else 1
                h = self._block(h, f"s{si}.b{bi}", in_ch, out_ch, stride, mode)
                in_ch = out_ch
        h = ops.global_avgpool(h)
        h = ops.flatten(h)
        h = ops.matmul(h, self.params["head.dense.w"])
        return ops.add(h, self.params["head.dense.b"])

    def forward(self, x, mode="eval"):
        """Class probabilities: softmax rows or elementwise sigmoid."""
        logits = self.forward_logits(x, mode=mode)
        if self.spec.head.kind == "softmax":
            return ops.softmax_rows(logits)
        return ops.sigmoid(logits)
