"""Segmentation network with a residual depth-auxiliary branch.

A small strided conv backbone produces features F. A depth branch encodes
F through kernel-size 1/3/1 convolutions, each quartering the channel
count, down to B/64 channels; a 1-channel projection plus 3x3 average
pooling (and a softplus to keep values nonnegative) yields the inverse
depth prediction, while a 1x1 decode back to B channels is fused with F by
element-wise product before the dilated classifier head. Soft
segmentation and depth maps are bilinearly upsampled to input resolution.

Zeroing the decode weights with bias one makes the fusion a no-op, so the
depth branch is a strict extension of the depth-free backbone.
"""

import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_MAGIC = b"DADA"
CHECKPOINT_VERSION = 1

# bias making softplus output 0.5, the mid-range inverse depth
DEPTH_BIAS_INIT = math.log(math.exp(0.5) - 1.0)


@dataclass(frozen=True)
class ModelConfig:
    backbone_channels: tuple = (16, 32, 64, 64)
    backbone_depth: int = 4
    classifier_dilation: int = 2
    num_classes: int = 7
    input_size: tuple = (64, 64)

    def __post_init__(self):
        if self.backbone_depth != len(self.backbone_channels):
            raise ValueError("backbone_depth must equal len(backbone_channels)")
        if self.backbone_channels[-1] % 64 != 0:
            raise ValueError("final backbone channel count must be divisible by 64 "
                             "(the depth encoder quarters it three times)")
        if self.classifier_dilation < 1:
            raise ValueError("classifier_dilation must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


@dataclass
class ForwardOutputs:
    """seg/depth at input resolution plus feature tensors for diagnostics."""

    seg: torch.Tensor  # (N, C, H, W), channels sum to 1 per pixel
    depth: Optional[torch.Tensor]  # (N, H, W) nonnegative, None in bypass mode
    backbone_features: torch.Tensor
    fused_features: torch.Tensor


def _init_conv(conv: nn.Conv2d, gen: torch.Generator, gain: float = math.sqrt(2.0),
               bias: float = 0.0) -> None:
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    std = gain / math.sqrt(fan_in)
    with torch.no_grad():
        conv.weight.normal_(0.0, std, generator=gen)
        if conv.bias is not None:
            conv.bias.fill_(bias)


class DadaNet(nn.Module):
    """Backbone + depth branch + fused classifier."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.config = config
        b = config.backbone_channels[-1]

        stages = []
        in_c = 3
        for i, c in enumerate(config.backbone_channels):
            stride = 2 if i < min(3, config.backbone_depth) else 1
            stages.append(nn.Conv2d(in_c, c, 3, stride=stride, padding=1))
            in_c = c
        self.backbone = nn.ModuleList(stages)

        # encoder: kernel sizes 1, 3, 1; each layer quarters the channels
        self.depth_enc1 = nn.Conv2d(b, b // 4, 1)
        self.depth_enc2 = nn.Conv2d(b // 4, b // 16, 3, padding=1)
        self.depth_enc3 = nn.Conv2d(b // 16, b // 64, 1)
        self.depth_head = nn.Conv2d(b // 64, 1, 1)
        self.depth_decode = nn.Conv2d(b // 64, b, 1)

        self.classifier = nn.Conv2d(b, config.num_classes, 3,
                                    padding=config.classifier_dilation,
                                    dilation=config.classifier_dilation)
        self._reset_parameters(seed)
        self.to(dtype)

    def _reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        for conv in self.backbone:
            _init_conv(conv, gen)
        _init_conv(self.depth_enc1, gen)
        _init_conv(self.depth_enc2, gen)
        _init_conv(self.depth_enc3, gen)
        # small head weights plus a bias putting the initial prediction near 0.5
        _init_conv(self.depth_head, gen, gain=0.1, bias=DEPTH_BIAS_INIT)
        _init_conv(self.depth_decode, gen)
        _init_conv(self.classifier, gen, gain=1.0)

    def parameter_groups(self) -> dict:
        """Named parameter groups for gradient-flow accounting."""
        return {
            "backbone": list(self.backbone.parameters()),
            "depth_encoder": list(self.depth_enc1.parameters())
            + list(self.depth_enc2.parameters()) + list(self.depth_enc3.parameters()),
            "depth_head": list(self.depth_head.parameters()),
            "depth_decoder": list(self.depth_decode.parameters()),
            "classifier": list(self.classifier.parameters()),
        }

    def forward(self, images: torch.Tensor, depth_mode: str = "full") -> ForwardOutputs:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
        h, w = self.config.input_size
        if images.shape[2] != h or images.shape[3] != w:
            raise ValueError(f"input size mismatch: expected {h}x{w}, "
                             f"got {images.shape[2]}x{images.shape[3]}")
        if depth_mode not in ("full", "bypass"):
            raise ValueError(f"unknown depth_mode {depth_mode!r}")

        feats = images
        for conv in self.backbone:
            feats = F.relu(conv(feats))

        if depth_mode == "bypass":
            fused = feats
            depth_up = None
        else:
            e = F.relu(self.depth_enc1(feats))
            e = F.relu(self.depth_enc2(e))
            e = self.depth_enc3(e)
            z = F.softplus(F.avg_pool2d(self.depth_head(e), 3, stride=1, padding=1))
            depth_up = F.interpolate(z, size=(h, w), mode="bilinear",
                                     align_corners=False)[:, 0]
            fused = feats * self.depth_decode(e)

        logits = self.classifier(fused)
        probs = torch.softmax(logits, dim=1)
        seg = F.interpolate(probs, size=(h, w), mode="bilinear", align_corners=False)
        return ForwardOutputs(seg=seg, depth=depth_up,
                              backbone_features=feats, fused_features=fused)


class DomainDiscriminator(nn.Module):
    """Domain classifier: three stride-2 conv layers (64/128/256 wide) with
    leaky-ReLU 0.2, then a stride-2 1x1 head to one raw score channel."""

    def __init__(self, in_channels: int, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.in_channels = in_channels
        self.conv1 = nn.Conv2d(in_channels, 64, 4, stride=2, padding=1)
        self.conv2 = nn.Conv2d(64, 128, 4, stride=2, padding=1)
        self.conv3 = nn.Conv2d(128, 256, 4, stride=2, padding=1)
        self.head = nn.Conv2d(256, 1, 1, stride=2)
        gen = torch.Generator().manual_seed(int(seed))
        leaky_gain = math.sqrt(2.0 / (1.0 + 0.2 ** 2))
        for conv in (self.conv1, self.conv2, self.conv3):
            _init_conv(conv, gen, gain=leaky_gain)
        _init_conv(self.head, gen, gain=1.0)

    def forward(self, maps: torch.Tensor) -> torch.Tensor:
        if maps.dim() != 4 or maps.shape[1] != self.in_channels:
            raise ValueError(f"expected (N, {self.in_channels}, H, W), "
                             f"got {tuple(maps.shape)}")
        a = F.leaky_relu(self.conv1(maps), 0.2)
        a = F.leaky_relu(self.conv2(a), 0.2)
        a = F.leaky_relu(self.conv3(a), 0.2)
        return self.head(a)


def init_model(config: ModelConfig, seed: int, dtype=torch.float32) -> DadaNet:
    """Fresh network with fan-in-scaled weights, deterministic per seed."""
    return DadaNet(config, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# checkpoint container: JSON manifest + raw little-endian blobs
# ---------------------------------------------------------------------------

_DTYPE_CODES = {torch.float32: "<f4", torch.float64: "<f8"}
_CODE_DTYPES = {"<f4": torch.float32, "<f8": torch.float64}


def save_checkpoint(path, net: DadaNet) -> None:
    tensors = []
    blobs = []
    offset = 0
    dtype_code = _DTYPE_CODES[next(net.parameters()).dtype]
    for name, tensor in net.state_dict().items():
        blob = np.ascontiguousarray(tensor.detach().cpu().numpy().astype(dtype_code)).tobytes()
        tensors.append({"name": name, "shape": list(tensor.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(net.config) | {
            "backbone_channels": list(net.config.backbone_channels),
            "input_size": list(net.config.input_size),
        },
        "dtype": dtype_code,
        "tensors": tensors,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQ", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(mbytes)))
        fh.write(mbytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> DadaNet:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ValueError(f"truncated checkpoint: {path}")
    magic, version, mlen = struct.unpack("<4sIQ", raw[:16])
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic: {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    manifest = json.loads(raw[16:16 + mlen].decode())
    cfg_d = manifest["config"]
    config = ModelConfig(
        backbone_channels=tuple(cfg_d["backbone_channels"]),
        backbone_depth=cfg_d["backbone_depth"],
        classifier_dilation=cfg_d["classifier_dilation"],
        num_classes=cfg_d["num_classes"],
        input_size=tuple(cfg_d["input_size"]),
    )
    dtype = _CODE_DTYPES[manifest["dtype"]]
    net = DadaNet(config, seed=0, dtype=dtype)
    base = 16 + mlen
    state = {}
    expected = net.state_dict()
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in expected:
            raise ValueError(f"unexpected tensor {name!r} in checkpoint")
        if tuple(expected[name].shape) != shape:
            raise ValueError(f"shape mismatch for {name!r}: checkpoint {shape}, "
                             f"model {tuple(expected[name].shape)}")
        start = base + entry["offset"]
        buf = raw[start:start + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype=manifest["dtype"]).reshape(shape).copy()
        state[name] = torch.from_numpy(arr).to(dtype)
    missing = set(expected) - set(state)
    if missing:
        raise ValueError(f"checkpoint missing tensors: {sorted(missing)}")
    net.load_state_dict(state)
    return net
