"""Joint building segmentation / damage classification network.

Layout (strides relative to the input):

    stem      3x3 conv, stride 2                       1/2
    stage1    residual blocks, first block stride 2    1/4   (low-level features)
    stage2    residual blocks, first block stride 2    1/8
    stage3    residual blocks, dilation 2              1/8
    stage4    residual blocks, dilation 4              1/8
    aspp      3x3 dilated branches + image pooling, 1x1 projection
    seg       shared head applied to pre and post features: 1 building logit
              + damage logits
    change    3 conv layers on (post - pre) ASPP features -> damage logits

Parameters live in a flat ordered mapping keyed by dotted path; the forward
pass is a set of functions over that mapping.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .layers import BatchNormLayer, Conv2dLayer, bilinear_upsample, global_avg_pool
from .tensor import Tensor

SEG_HEADS = ("simple", "encoder_decoder")
LOSS_MODES = ("ce", "locaware", "locaware_dice")
FUSIONS = ("mean_logprob", "seg_only", "change_only")

OUTPUT_STRIDE = 8


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 8
    blocks_per_stage: tuple[int, ...] = (1, 1, 1, 1)
    aspp_dilations: tuple[int, ...] = (12, 24, 36)
    aspp_divisor: int = 4
    aspp_channels: int = 16
    seg_head: str = "encoder_decoder"
    change_head_enabled: bool = True
    num_damage_classes: int = 4
    loss_mode: str = "locaware_dice"
    input_size: int = 64
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "blocks_per_stage", tuple(self.blocks_per_stage))
        object.__setattr__(self, "aspp_dilations", tuple(self.aspp_dilations))

    @property
    def effective_dilations(self) -> tuple[int, ...]:
        return tuple(max(1, d // self.aspp_divisor) for d in self.aspp_dilations)

    @property
    def stage_channels(self) -> tuple[int, ...]:
        b = self.base_channels
        return (b, 2 * b, 4 * b, 4 * b)

    def validate(self) -> None:
        if self.seg_head not in SEG_HEADS:
            raise ConfigError(f"seg_head must be one of {SEG_HEADS}, got {self.seg_head!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if len(self.blocks_per_stage) != 4 or min(self.blocks_per_stage) < 1:
            raise ConfigError("blocks_per_stage needs four positive entries")
        if self.base_channels < 1 or self.aspp_channels < 1 or self.num_damage_classes < 2:
            raise ConfigError("channel counts must be positive and num_damage_classes >= 2")
        if self.input_size % OUTPUT_STRIDE or self.input_size <= 0:
            raise ConfigError(f"input_size must be a positive multiple of 8, got {self.input_size}")
        dil = self.effective_dilations
        if not dil or any(b <= a for a, b in zip(dil, dil[1:])):
            raise ConfigError(f"ASPP dilations must be non-empty and strictly increasing, got {dil}")
        feat = self.input_size // OUTPUT_STRIDE
        for d in dil:
            if d >= 2 * feat:
                raise ConfigError(
                    f"ASPP dilation {d} too large for a {feat}x{feat} feature map "
                    f"(must be < {2 * feat})"
                )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks_per_stage"] = list(self.blocks_per_stage)
        d["aspp_dilations"] = list(self.aspp_dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class ModelParams:
    """Ordered parameter and running-statistic tensors keyed by dotted path."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, path: str) -> Tensor:
        return self.tensors[path]

    def __contains__(self, path: str) -> bool:
        return path in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    @staticmethod
    def is_buffer(path: str) -> bool:
        return path.endswith(".running_mean") or path.endswith(".running_var")

    def trainable(self) -> list[str]:
        return [p for p in self.tensors if not self.is_buffer(p)]

    def count(self, trainable_only: bool = True) -> int:
        paths = self.trainable() if trainable_only else list(self.tensors)
        return sum(self.tensors[p].size for p in paths)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({
            p: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, dtype=dtype)
            for p, t in self.tensors.items()
        })

    def copy(self) -> "ModelParams":
        return ModelParams({
            p: Tensor(t.data.copy(), requires_grad=t.requires_grad, dtype=t.dtype)
            for p, t in self.tensors.items()
        })

    def equal(self, other: "ModelParams") -> bool:
        if list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.data.dtype == b.data.dtype and a.data.tobytes() == b.data.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None


# -- architecture table ----------------------------------------------------

def architecture(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every parameter path with its shape, in initialization order."""
    config.validate()
    table: list[tuple[str, tuple[int, ...]]] = []

    def conv(path, cin, cout, k, bias=False):
        table.append((f"{path}.weight", (cout, cin, k, k)))
        if bias:
            table.append((f"{path}.bias", (cout,)))

    def bn(path, ch):
        table.extend([
            (f"{path}.gamma", (ch,)),
            (f"{path}.beta", (ch,)),
            (f"{path}.running_mean", (ch,)),
            (f"{path}.running_var", (ch,)),
        ])

    b = config.base_channels
    conv("backbone.stem.conv", config.in_channels, b, 3)
    bn("backbone.stem.bn", b)
    cin = b
    for s, (cout, nblocks) in enumerate(zip(config.stage_channels, config.blocks_per_stage), start=1):
        stride = _STAGE_STRIDES[s - 1]
        for k in range(nblocks):
            pre = f"backbone.stage{s}.block{k}"
            conv(f"{pre}.conv1", cin, cout, 3)
            bn(f"{pre}.bn1", cout)
            conv(f"{pre}.conv2", cout, cout, 3)
            bn(f"{pre}.bn2", cout)
            if k == 0 and (cin != cout or stride != 1):
                conv(f"{pre}.shortcut.conv", cin, cout, 1)
                bn(f"{pre}.shortcut.bn", cout)
            cin = cout

    a = config.aspp_channels
    for i, _ in enumerate(config.effective_dilations):
        conv(f"aspp.branch{i}.conv", cin, a, 3)
        bn(f"aspp.branch{i}.bn", a)
    conv("aspp.pool.conv", cin, a, 1, bias=True)
    nbranch = len(config.effective_dilations) + 1
    conv("aspp.project.conv", nbranch * a, a, 1)
    bn("aspp.project.bn", a)

    nout = 1 + config.num_damage_classes
    if config.seg_head == "simple":
        conv("seg.conv", a, a, 3)
        bn("seg.bn", a)
    else:
        low = config.stage_channels[0]
        conv("seg.low.conv", low, low, 1)
        bn("seg.low.bn", low)
        conv("seg.conv", a + low, a, 3)
        bn("seg.bn", a)
    conv("seg.out", a, nout, 1, bias=True)

    if config.change_head_enabled:
        conv("change.conv1", a, a, 3)
        bn("change.bn1", a)
        conv("change.conv2", a, a, 1)
        bn("change.bn2", a)
        conv("change.out", a, config.num_damage_classes, 1, bias=True)
    return table


_STAGE_STRIDES = (2, 2, 1, 1)
_STAGE_DILATIONS = (1, 1, 2, 4)


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """He-normal conv weights (fan-in), zero biases, gamma=1, beta=0."""
    rng = np.random.Generator(np.random.PCG64(seed))
    tensors: dict[str, Tensor] = {}
    for path, shape in architecture(config):
        leaf = path.rsplit(".", 1)[1]
        if leaf == "weight":
            fan_in = shape[1] * shape[2] * shape[3]
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif leaf in ("gamma", "running_var"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        trainable = not ModelParams.is_buffer(path)
        tensors[path] = Tensor(arr.astype(dtype), requires_grad=trainable, dtype=dtype)
    return ModelParams(tensors)


# -- forward ---------------------------------------------------------------

@dataclass
class ForwardOutputs:
    loc_logits_pre: Tensor
    loc_logits_post: Tensor
    damage_logits_seg: Tensor
    damage_logits_change: Tensor | None
    damage_logits_seg_pre: Tensor | None = None
    change_input: Tensor | None = None
    backbone_pre: Tensor | None = None
    backbone_post: Tensor | None = None


def _conv(params: ModelParams, path: str, x: Tensor, stride=1, dilation=1, padding=0) -> Tensor:
    bias = params.tensors.get(f"{path}.bias")
    return Conv2dLayer(params[f"{path}.weight"], bias, stride, dilation, padding)(x)


def _bn(params: ModelParams, path: str, x: Tensor, mode: str) -> Tensor:
    layer = BatchNormLayer(
        params[f"{path}.gamma"], params[f"{path}.beta"],
        params[f"{path}.running_mean"].data, params[f"{path}.running_var"].data,
    )
    return layer(x, mode)


def _residual_block(params, pre, x, stride, dilation, mode):
    out = _conv(params, f"{pre}.conv1", x, stride, dilation, dilation)
    out = T.relu(_bn(params, f"{pre}.bn1", out, mode))
    out = _conv(params, f"{pre}.conv2", out, 1, dilation, dilation)
    out = _bn(params, f"{pre}.bn2", out, mode)
    if f"{pre}.shortcut.conv.weight" in params:
        skip = _bn(params, f"{pre}.shortcut.bn", _conv(params, f"{pre}.shortcut.conv", x, stride), mode)
    else:
        skip = x
    return T.relu(T.add(out, skip))


def backbone_forward(params: ModelParams, config: ModelConfig, x: Tensor, mode: str) -> tuple[Tensor, Tensor]:
    """Return (stride-8 features, stride-4 stage1 features)."""
    out = _conv(params, "backbone.stem.conv", x, 2, 1, 1)
    out = T.relu(_bn(params, "backbone.stem.bn", out, mode))
    low = out
    for s, nblocks in enumerate(config.blocks_per_stage, start=1):
        for k in range(nblocks):
            stride = _STAGE_STRIDES[s - 1] if k == 0 else 1
            out = _residual_block(params, f"backbone.stage{s}.block{k}", out, stride, _STAGE_DILATIONS[s - 1], mode)
        if s == 1:
            low = out
    return out, low


def aspp_forward(params: ModelParams, config: ModelConfig, feats: Tensor, mode: str) -> Tensor:
    n, _, h, w = feats.shape
    branches = []
    for i, d in enumerate(config.effective_dilations):
        y = _conv(params, f"aspp.branch{i}.conv", feats, 1, d, d)
        branches.append(T.relu(_bn(params, f"aspp.branch{i}.bn", y, mode)))
    pooled = T.relu(_conv(params, "aspp.pool.conv", global_avg_pool(feats)))
    spread = T.zeros((n, pooled.shape[1], h, w), dtype=feats.dtype)
    branches.append(T.add(pooled, spread))
    out = _conv(params, "aspp.project.conv", T.concat(branches, axis=1))
    return T.relu(_bn(params, "aspp.project.bn", out, mode))


def seg_head_forward(
    params: ModelParams, config: ModelConfig, aspp_out: Tensor, low_level: Tensor | None, mode: str
) -> tuple[Tensor, Tensor]:
    """Return (building logits N×1×H×W, damage logits N×C×H×W) at input resolution."""
    if config.seg_head == "simple":
        y = T.relu(_bn(params, "seg.bn", _conv(params, "seg.conv", aspp_out, 1, 1, 1), mode))
        y = bilinear_upsample(_conv(params, "seg.out", y), OUTPUT_STRIDE)
    else:
        up = bilinear_upsample(aspp_out, 2)
        skip = T.relu(_bn(params, "seg.low.bn", _conv(params, "seg.low.conv", low_level), mode))
        y = T.concat([up, skip], axis=1)
        y = T.relu(_bn(params, "seg.bn", _conv(params, "seg.conv", y, 1, 1, 1), mode))
        y = bilinear_upsample(_conv(params, "seg.out", y), 4)
    return y[:, 0:1], y[:, 1:]


def change_head_forward(params: ModelParams, config: ModelConfig, diff: Tensor, mode: str) -> Tensor:
    y = T.relu(_bn(params, "change.bn1", _conv(params, "change.conv1", diff, 1, 1, 1), mode))
    y = T.relu(_bn(params, "change.bn2", _conv(params, "change.conv2", y), mode))
    return bilinear_upsample(_conv(params, "change.out", y), OUTPUT_STRIDE)


def check_inputs(config: ModelConfig, pre: Tensor, post: Tensor) -> None:
    if pre.shape != post.shape:
        raise T.ShapeError(f"pre/post shape mismatch: {pre.shape} vs {post.shape}")
    if pre.ndim != 4 or pre.shape[1] != config.in_channels:
        raise T.ShapeError(f"expected N×{config.in_channels}×H×W images, got {pre.shape}")
    h, w = pre.shape[2:]
    if h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
        raise T.ShapeError(f"image size {h}x{w} is not a multiple of {OUTPUT_STRIDE}")


def forward_pair(
    params: ModelParams, config: ModelConfig, pre_img: Tensor, post_img: Tensor, mode: str = "eval"
) -> ForwardOutputs:
    """Run both images through the shared backbone, ASPP and segmentation head.

    Damage logits from the segmentation head come from the post image only;
    the change head sees the difference of post and pre ASPP features.
    """
    check_inputs(config, pre_img, post_img)
    feat_pre, low_pre = backbone_forward(params, config, pre_img, mode)
    feat_post, low_post = backbone_forward(params, config, post_img, mode)
    aspp_pre = aspp_forward(params, config, feat_pre, mode)
    aspp_post = aspp_forward(params, config, feat_post, mode)
    loc_pre, dmg_pre = seg_head_forward(params, config, aspp_pre, low_pre, mode)
    loc_post, dmg_post = seg_head_forward(params, config, aspp_post, low_post, mode)
    change_logits = None
    diff = None
    if config.change_head_enabled:
        diff = T.sub(aspp_post, aspp_pre)
        change_logits = change_head_forward(params, config, diff, mode)
    return ForwardOutputs(
        loc_logits_pre=loc_pre,
        loc_logits_post=loc_post,
        damage_logits_seg=dmg_post,
        damage_logits_change=change_logits,
        damage_logits_seg_pre=dmg_pre,
        change_input=diff,
        backbone_pre=feat_pre,
        backbone_post=feat_post,
    )


def predict_masks(outputs: ForwardOutputs, fusion: str = "mean_logprob") -> np.ndarray:
    """Combine head outputs into N×H×W class maps with values in {0..4}.

    Footprints come from the pre-image building logits; each footprint pixel
    gets 1 + argmax of the fused damage log-probabilities.
    """
    if fusion not in FUSIONS:
        raise ConfigError(f"fusion must be one of {FUSIONS}, got {fusion!r}")
    seg = outputs.damage_logits_seg
    change = outputs.damage_logits_change
    if fusion == "change_only" and change is None:
        raise ConfigError("fusion 'change_only' needs the change head, which is disabled")
    if fusion == "seg_only" or change is None:
        scores = T.log_softmax(seg, axis=1).data
    elif fusion == "change_only":
        scores = T.log_softmax(change, axis=1).data
    else:
        scores = 0.5 * (T.log_softmax(seg, axis=1).data + T.log_softmax(change, axis=1).data)
    footprint = T.sigmoid(outputs.loc_logits_pre).data[:, 0] >= 0.5
    damage = scores.argmax(axis=1).astype(np.uint8) + 1
    return np.where(footprint, damage, 0).astype(np.uint8)
