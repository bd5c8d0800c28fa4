"""Convolutional feature extractors.

Each factory returns a module mapping an NCHW batch to a spatial feature map
whose channel count is the backbone's ``feature_dim``. DenseNet121 and
EfficientNetB0 come from torchvision. MobileNet (v1, width 1.0) and
NASNet-A Mobile are not shipped there, so they are built here following the
Keras application layouts, which gives the same trainable-parameter counts.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import WeightsUnavailable

_BN_EPS = 1e-3


def _bn(channels: int) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(channels, eps=_BN_EPS, momentum=0.01)


# --------------------------------------------------------------------------
# toy CNN


def toy_cnn(feature_dim: int = 8) -> nn.Sequential:
    """Three 3x3 conv blocks (8, 16, feature_dim channels), each ReLU + 2x2 average pooling."""
    layers: list[nn.Module] = []
    widths = (3, 8, 16, feature_dim)
    for c_in, c_out in zip(widths[:-1], widths[1:]):
        layers += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU(), nn.AvgPool2d(2)]
    return nn.Sequential(*layers)


# --------------------------------------------------------------------------
# MobileNet v1


class _DepthwiseBlock(nn.Sequential):
    def __init__(self, c_in: int, c_out: int, stride: int):
        pad = nn.ZeroPad2d((0, 1, 0, 1)) if stride == 2 else nn.Identity()
        super().__init__(
            pad,
            nn.Conv2d(c_in, c_in, 3, stride=stride, padding=0 if stride == 2 else 1, groups=c_in, bias=False),
            _bn(c_in), nn.ReLU6(),
            nn.Conv2d(c_in, c_out, 1, bias=False),
            _bn(c_out), nn.ReLU6(),
        )


def mobilenet_v1() -> nn.Sequential:
    plan = [(64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
            (512, 1), (512, 1), (512, 1), (512, 1), (512, 1), (1024, 2), (1024, 1)]
    layers: list[nn.Module] = [nn.ZeroPad2d((0, 1, 0, 1)), nn.Conv2d(3, 32, 3, stride=2, bias=False),
                               _bn(32), nn.ReLU6()]
    c_in = 32
    for c_out, stride in plan:
        layers.append(_DepthwiseBlock(c_in, c_out, stride))
        c_in = c_out
    return nn.Sequential(*layers)


# --------------------------------------------------------------------------
# NASNet-A Mobile (penultimate 1056 filters, 4 cells per stack)


def _correct_pad(x: torch.Tensor, kernel: int) -> tuple[int, int, int, int]:
    """Asymmetric zero padding used ahead of stride-2 'valid' ops; F.pad order (l, r, t, b)."""
    h, w = x.shape[-2:]
    k = kernel // 2
    return (k - (1 - w % 2), k, k - (1 - h % 2), k)


class _SeparableConv(nn.Sequential):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1):
        super().__init__(
            nn.Conv2d(c_in, c_in, kernel, stride=stride, padding=0 if stride == 2 else kernel // 2,
                      groups=c_in, bias=False),
            nn.Conv2d(c_in, c_out, 1, bias=False),
        )


class _SepBlock(nn.Module):
    def __init__(self, c_in: int, filters: int, kernel: int, stride: int = 1):
        super().__init__()
        self.kernel, self.stride = kernel, stride
        self.conv1 = _SeparableConv(c_in, filters, kernel, stride)
        self.bn1 = _bn(filters)
        self.conv2 = _SeparableConv(filters, filters, kernel)
        self.bn2 = _bn(filters)

    def forward(self, x):
        x = F.relu(x)
        if self.stride == 2:
            x = F.pad(x, _correct_pad(x, self.kernel))
        x = F.relu(self.bn1(self.conv1(x)))
        return self.bn2(self.conv2(x))


class _Adjust(nn.Module):
    """Bring the previous-previous state ``p`` to the current cell's shape."""

    def __init__(self, c_in: int, filters: int, mode: str):
        super().__init__()
        self.mode = mode
        if mode == "reduce":
            self.conv_a = nn.Conv2d(c_in, filters // 2, 1, bias=False)
            self.conv_b = nn.Conv2d(c_in, filters // 2, 1, bias=False)
            self.bn = _bn(filters // 2 * 2)
        elif mode == "project":
            self.conv = nn.Conv2d(c_in, filters, 1, bias=False)
            self.bn = _bn(filters)

    def forward(self, p):
        if self.mode == "identity":
            return p
        p = F.relu(p)
        if self.mode == "project":
            return self.bn(self.conv(p))
        a = self.conv_a(p[:, :, ::2, ::2])
        shifted = F.pad(p, (0, 1, 0, 1))[:, :, 1:, 1:]
        b = self.conv_b(shifted[:, :, ::2, ::2])
        return self.bn(torch.cat([a, b], dim=1))


def _adjust_mode(p_shape: tuple[int, int] | None, ip_res: int, filters: int) -> str:
    if p_shape is None:
        return "identity"
    p_ch, p_res = p_shape
    if p_res != ip_res:
        return "reduce"
    return "project" if p_ch != filters else "identity"


def _avg3(x):
    return F.avg_pool2d(x, 3, stride=1, padding=1, count_include_pad=False)


class _NormalCell(nn.Module):
    def __init__(self, ip_ch: int, p_shape: tuple[int, int] | None, ip_res: int, filters: int):
        super().__init__()
        mode = _adjust_mode(p_shape, ip_res, filters)
        p_ch = ip_ch if p_shape is None else p_shape[0]
        self.adjust = _Adjust(p_ch, filters, mode)
        pc = p_ch if mode == "identity" else filters
        self.project = nn.Sequential(nn.ReLU(), nn.Conv2d(ip_ch, filters, 1, bias=False), _bn(filters))
        self.left1 = _SepBlock(filters, filters, 5)
        self.right1 = _SepBlock(pc, filters, 3)
        self.left2 = _SepBlock(pc, filters, 5)
        self.right2 = _SepBlock(pc, filters, 3)
        self.left5 = _SepBlock(filters, filters, 3)
        self.out_channels = pc + 5 * filters

    def forward(self, ip, p):
        p = self.adjust(p if p is not None else ip)
        h = self.project(ip)
        x1 = self.left1(h) + self.right1(p)
        x2 = self.left2(p) + self.right2(p)
        x3 = _avg3(h) + p
        x4 = _avg3(p) + _avg3(p)
        x5 = self.left5(h) + h
        return torch.cat([p, x1, x2, x3, x4, x5], dim=1)


class _ReductionCell(nn.Module):
    def __init__(self, ip_ch: int, p_shape: tuple[int, int] | None, ip_res: int, filters: int):
        super().__init__()
        mode = _adjust_mode(p_shape, ip_res, filters)
        p_ch = ip_ch if p_shape is None else p_shape[0]
        self.adjust = _Adjust(p_ch, filters, mode)
        pc = p_ch if mode == "identity" else filters
        self.project = nn.Sequential(nn.ReLU(), nn.Conv2d(ip_ch, filters, 1, bias=False), _bn(filters))
        self.left1 = _SepBlock(filters, filters, 5, stride=2)
        self.right1 = _SepBlock(pc, filters, 7, stride=2)
        self.right2 = _SepBlock(pc, filters, 7, stride=2)
        self.right3 = _SepBlock(pc, filters, 5, stride=2)
        self.left5 = _SepBlock(filters, filters, 3)
        self.out_channels = 4 * filters

    def forward(self, ip, p):
        p = self.adjust(p if p is not None else ip)
        h = self.project(ip)
        h3 = F.pad(h, _correct_pad(h, 3))
        x1 = self.left1(h) + self.right1(p)
        x2 = F.max_pool2d(h3, 3, stride=2) + self.right2(p)
        x3 = F.avg_pool2d(h3, 3, stride=2) + self.right3(p)
        x4 = _avg3(x1) + x2
        x5 = self.left5(x1) + F.max_pool2d(h3, 3, stride=2)
        return torch.cat([x2, x3, x4, x5], dim=1)


class NASNetMobile(nn.Module):
    def __init__(self, penultimate_filters: int = 1056, num_blocks: int = 4,
                 stem_filters: int = 32, multiplier: int = 2):
        super().__init__()
        filters = penultimate_filters // 24
        self.stem = nn.Sequential(nn.Conv2d(3, stem_filters, 3, stride=2, bias=False), _bn(stem_filters))
        cells: list[nn.Module] = []
        # (channels, resolution level) of the two most recent states
        prev, cur = None, (stem_filters, 0)

        def add(cell_cls, width):
            nonlocal prev, cur
            cell = cell_cls(cur[0], prev, cur[1], width)
            cells.append(cell)
            level = cur[1] + (1 if cell_cls is _ReductionCell else 0)
            prev, cur = cur, (cell.out_channels, level)

        add(_ReductionCell, filters // multiplier ** 2)
        add(_ReductionCell, filters // multiplier)
        for stack in range(3):
            if stack:
                add(_ReductionCell, filters * multiplier ** stack)
            for _ in range(num_blocks):
                add(_NormalCell, filters * multiplier ** stack)
        self.cells = nn.ModuleList(cells)
        self.out_channels = cur[0]

    def forward(self, x):
        x = self.stem(x)
        p = None
        for cell in self.cells:
            x, p = cell(x, p), x
        return F.relu(x)


# --------------------------------------------------------------------------
# torchvision backbones


def _torchvision_features(name: str, pretrained: bool) -> nn.Module:
    from torchvision import models

    builders = {
        "efficientnet_b0": (models.efficientnet_b0, models.EfficientNet_B0_Weights),
        "densenet121": (models.densenet121, models.DenseNet121_Weights),
    }
    builder, weights_enum = builders[name]
    try:
        net = builder(weights=weights_enum.DEFAULT if pretrained else None)
    except Exception as exc:  # download / cache failures surface from several layers
        raise WeightsUnavailable(f"could not obtain ImageNet weights for {name}: {exc}") from exc
    if name == "densenet121":
        # torchvision applies the final ReLU in DenseNet.forward, outside .features
        return nn.Sequential(net.features, nn.ReLU())
    return net.features


def build_backbone(name: str, feature_dim: int, pretrained: bool = False,
                   weights_path: str | None = None) -> nn.Module:
    """Instantiate backbone ``name``; optionally load a converted state dict from ``weights_path``."""
    if name == "toy_cnn":
        module = toy_cnn(feature_dim)
    elif name == "mobilenet":
        module = mobilenet_v1()
    elif name == "nasnet_mobile":
        module = NASNetMobile()
    elif name in ("efficientnet_b0", "densenet121"):
        module = _torchvision_features(name, pretrained and weights_path is None)
    else:
        raise ValueError(f"unknown backbone {name!r}")

    if weights_path is not None:
        try:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            module.load_state_dict(state)
        except (OSError, RuntimeError) as exc:
            raise WeightsUnavailable(f"cannot load backbone weights from {weights_path}: {exc}") from exc
    elif pretrained and name in ("toy_cnn", "mobilenet", "nasnet_mobile"):
        raise WeightsUnavailable(
            f"no bundled ImageNet weights for {name}; pass a converted state dict via weights_path"
        )
    return module
