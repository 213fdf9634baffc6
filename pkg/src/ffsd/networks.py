"""Student backbone, feature-fusion module, channel aligner and self-distillation module."""
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import derive_seed
from .exceptions import ConfigError, InvalidInputError


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = conv3x3(cin, cout, stride)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = conv3x3(cout, cout)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetBackbone(nn.Module):
    """CIFAR-style residual network with one tap point at the end of every stage.

    The first stage keeps the input resolution and each later stage halves it.
    With ``widths=(16, 32, 64)`` and ``depth=3`` this is the ResNet-20 layout.
    """

    def __init__(self, num_classes, widths=(16, 32, 64), depth=3, in_channels=3, image_size=32):
        super().__init__()
        self.num_classes = num_classes
        self.widths = tuple(widths)
        self.depth = depth
        self.in_channels = in_channels
        self.image_size = image_size
        self.stem = nn.Sequential(conv3x3(in_channels, widths[0]), nn.BatchNorm2d(widths[0]), nn.ReLU(inplace=True))
        stages = []
        cin = widths[0]
        for s, w in enumerate(widths):
            stride = 1 if s == 0 else 2
            blocks = [BasicBlock(cin, w, stride)] + [BasicBlock(w, w) for _ in range(depth - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.fc = nn.Linear(widths[-1], num_classes)

    @property
    def num_taps(self):
        return len(self.stages)

    def tap_shapes(self):
        """``(C, H, W)`` of every tap for this backbone's input size."""
        shapes = []
        h = self.image_size
        for s, w in enumerate(self.widths):
            if s > 0:
                h = math.ceil(h / 2)
            shapes.append((w, h, h))
        return shapes

    def head(self, feat):
        return self.fc(F.adaptive_avg_pool2d(feat, 1).flatten(1))

    def forward_with_taps(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels or tuple(x.shape[2:]) != (self.image_size,) * 2:
            raise InvalidInputError(
                f"expected input (B, {self.in_channels}, {self.image_size}, {self.image_size}), got {tuple(x.shape)}")
        taps = []
        out = self.stem(x)
        for stage in self.stages:
            out = stage(out)
            taps.append(out)
        return self.head(out), taps

    def forward(self, x):
        return self.forward_with_taps(x)[0]


class FusionModule(nn.Module):
    """Encodes the channel concatenation of ``n`` students' last feature maps.

    encoder: 1x1 conv ``n*C -> C`` then 3x3 conv ``C -> C``, each with BN and
    ReLU; classifier: global average pooling and a linear layer.
    """

    def __init__(self, n, channels, num_classes):
        super().__init__()
        self.n = n
        self.channels = channels
        self.encoder = nn.Sequential(
            nn.Conv2d(n * channels, channels, 1, bias=False), nn.BatchNorm2d(channels), nn.ReLU(inplace=True),
            conv3x3(channels, channels), nn.BatchNorm2d(channels), nn.ReLU(inplace=True),
        )
        self.fc = nn.Linear(channels, num_classes)

    def classify(self, Ff):
        return self.fc(F.adaptive_avg_pool2d(Ff, 1).flatten(1))

    def fuse(self, features):
        """Returns ``(F_f, z_f, F_e)`` for a list of per-student ``(B, C, H, W)`` maps."""
        if len(features) != self.n:
            raise InvalidInputError(f"fusion expects {self.n} feature maps, got {len(features)}")
        shapes = {tuple(f.shape) for f in features}
        if len(shapes) != 1:
            raise InvalidInputError(f"fusion inputs have mismatched shapes {sorted(shapes)}")
        if features[0].shape[1] != self.channels:
            raise InvalidInputError(f"fusion expects {self.channels} channels, got {features[0].shape[1]}")
        Fe = torch.cat(list(features), dim=1)
        Ff = self.encoder(Fe)
        return Ff, self.classify(Ff), Fe

    def forward(self, features):
        return self.fuse(features)


class ChannelAligner(nn.Module):
    """Learned 1x1 expansion ``C -> n*C`` so the leader's map can be compared to the concatenation."""

    def __init__(self, channels, n):
        super().__init__()
        self.channels = channels
        self.n = n
        self.proj = nn.Sequential(nn.Conv2d(channels, n * channels, 1, bias=False), nn.BatchNorm2d(n * channels),
                                  nn.ReLU(inplace=True))

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise InvalidInputError(f"aligner expects (B, {self.channels}, H, W), got {tuple(x.shape)}")
        return self.proj(x)


def _upsample_block(cin, cout, hin, hout):
    if hout == hin:
        conv = nn.ConvTranspose2d(cin, cout, 3, stride=1, padding=1, bias=False)
    elif hout == 2 * hin:
        conv = nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1, bias=False)
    elif hout == 2 * hin - 1:
        conv = nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, bias=False)
    else:
        raise ConfigError(f"cannot build an upsampling block from {hin} to {hout}")
    return nn.Sequential(conv, nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class SelfDistillModule(nn.Module):
    """Top-down stack of transpose-convolution blocks mapping the deepest tap to shallower taps.

    ``blocks[m]`` maps the level-``m+1`` shape to the level-``m`` shape
    (0-based). :meth:`forward` applies them from the top and returns the
    outputs indexed like the taps, i.e. ``out[m]`` has the shape of tap ``m``.
    """

    def __init__(self, tap_shapes):
        super().__init__()
        self.tap_shapes = [tuple(s) for s in tap_shapes]
        blocks = []
        for m in range(len(tap_shapes) - 1):
            cout, hout, _ = tap_shapes[m]
            cin, hin, _ = tap_shapes[m + 1]
            blocks.append(_upsample_block(cin, cout, hin, hout))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, top):
        if tuple(top.shape[1:]) != self.tap_shapes[-1]:
            raise InvalidInputError(f"self-distillation input must be (B, {self.tap_shapes[-1]}), got {tuple(top.shape)}")
        outs = []
        x = top
        for block in reversed(self.blocks):
            x = block(x)
            outs.append(x)
        return outs[::-1]


def sd_forward(sd, top):
    return sd(top)


class StudentGroup(nn.Module):
    """Leader, common students, fusion module, aligner and one SD module per student.

    ``sd[0]`` belongs to the leader and ``sd[i]`` to common student ``i``
    (``students[i - 1]``).
    """

    def __init__(self, leader, students, fusion, aligner, sd):
        super().__init__()
        self.leader = leader
        self.students = nn.ModuleList(students)
        self.fusion = fusion
        self.aligner = aligner
        self.sd = nn.ModuleList(sd)

    @property
    def n(self):
        return len(self.students)

    @property
    def tap_shapes(self):
        return self.leader.tap_shapes()

    def components(self):
        out = {"leader": self.leader}
        for i, s in enumerate(self.students, 1):
            out[f"student_{i}"] = s
        out["fusion"] = self.fusion
        out["aligner"] = self.aligner
        for i, m in enumerate(self.sd):
            out[f"sd_{i}"] = m
        return out

    def parameter_counts(self):
        return {name: sum(p.numel() for p in m.parameters()) for name, m in self.components().items()}


def _seeded(seed, factory):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def build_group(config):
    """Build a :class:`StudentGroup` with deterministic, per-component initializations."""
    n = config.distill.n
    if n < 1:
        raise ConfigError(f"need at least one common student, got n={n}")
    K = config.data.num_classes
    widths = config.model.widths
    seed = config.train.seed

    def backbone():
        return ResNetBackbone(K, widths, config.model.depth, 3, config.data.image_size)

    leader = _seeded(derive_seed(seed, "init", "student", 0), backbone)
    students = [_seeded(derive_seed(seed, "init", "student", i), backbone) for i in range(1, n + 1)]
    shapes = leader.tap_shapes()
    C = shapes[-1][0]
    fusion = _seeded(derive_seed(seed, "init", "fusion"), lambda: FusionModule(n, C, K))
    aligner = _seeded(derive_seed(seed, "init", "aligner"), lambda: ChannelAligner(C, n))
    sd = [_seeded(derive_seed(seed, "init", "sd", i), lambda: SelfDistillModule(shapes)) for i in range(n + 1)]
    return StudentGroup(leader, students, fusion, aligner, sd)
