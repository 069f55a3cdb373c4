"""Desk-scale encoder architectures.

``small-resnet`` stands in for ResNet18 and ``small-vgg`` for VGG-11-bn in the
architecture-mismatch arm. Both map a batch of NCHW images in [0, 1] to a
batch of ``dim``-dimensional feature vectors.
"""
import torch.nn as nn
import torch.nn.functional as F


class SplitBatchNorm(nn.BatchNorm2d):
    """BatchNorm that normalizes ``num_splits`` interleaved sub-batches separately.

    On a single device this stops the query/key encoders from sharing batch
    statistics, which would otherwise let MoCo cheat on the pretext task.
    """

    def __init__(self, num_features, num_splits=1):
        super().__init__(num_features)
        self.num_splits = num_splits

    def forward(self, x):
        n, c, h, w = x.shape
        s = self.num_splits
        if not self.training or s <= 1 or n % s != 0:
            return super().forward(x)
        mean = self.running_mean.repeat(s)
        var = self.running_var.repeat(s)
        out = F.batch_norm(
            x.reshape(n // s, c * s, h, w), mean, var,
            self.weight.repeat(s), self.bias.repeat(s),
            True, self.momentum, self.eps,
        ).reshape(n, c, h, w)
        self.running_mean.copy_(mean.view(s, c).mean(dim=0))
        self.running_var.copy_(var.view(s, c).mean(dim=0))
        return out


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride, bn_splits):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = SplitBatchNorm(cout, bn_splits)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = SplitBatchNorm(cout, bn_splits)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False),
                SplitBatchNorm(cout, bn_splits),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class SmallResNet(nn.Module):
    """Stem conv, three residual blocks, linear head (8 weight layers)."""

    def __init__(self, dim=128, width=32, bn_splits=1):
        super().__init__()
        self.dim = dim
        self.stem = nn.Sequential(
            nn.Conv2d(3, width, 3, 1, 1, bias=False),
            SplitBatchNorm(width, bn_splits),
            nn.ReLU(inplace=True),
        )
        self.layers = nn.Sequential(
            BasicBlock(width, width, 1, bn_splits),
            BasicBlock(width, 2 * width, 2, bn_splits),
            BasicBlock(2 * width, 4 * width, 2, bn_splits),
        )
        self.fc = nn.Linear(4 * width, dim)

    def forward(self, x):
        x = self.layers(self.stem(x))
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(x)


class SmallVGG(nn.Module):
    """Five conv-bn-relu layers with max pooling and a linear head."""

    def __init__(self, dim=128, width=32, bn_splits=1):
        super().__init__()
        self.dim = dim
        cfg = [width, "M", 2 * width, 2 * width, "M", 4 * width, 4 * width, "M"]
        layers = []
        cin = 3
        for v in cfg:
            if v == "M":
                layers.append(nn.MaxPool2d(2))
            else:
                layers += [
                    nn.Conv2d(cin, v, 3, 1, 1, bias=False),
                    SplitBatchNorm(v, bn_splits),
                    nn.ReLU(inplace=True),
                ]
                cin = v
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, dim)

    def forward(self, x):
        x = self.features(x)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(x)


ARCHITECTURES = {
    "small-resnet": SmallResNet,
    "small-vgg": SmallVGG,
}


class UnknownArchitectureError(ValueError):
    pass


def build_encoder(arch, dim=128, width=32, bn_splits=1):
    try:
        cls = ARCHITECTURES[arch]
    except KeyError:
        raise UnknownArchitectureError(
            f"unknown architecture {arch!r}; expected one of {sorted(ARCHITECTURES)}"
        ) from None
    return cls(dim=dim, width=width, bn_splits=bn_splits)


class ProjectionHead(nn.Module):
    """Two-layer MLP used only inside the SimCLR loss."""

    def __init__(self, dim=128, hidden=128, out_dim=64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, out_dim)
        )

    def forward(self, x):
        return self.net(x)
