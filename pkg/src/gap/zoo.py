"""Builders for the evaluated architectures and the desk-scale toy networks.

All builders return a validated coarse graph plus He-initialized weights
(BN: gamma=1, beta=0, mean=0, var=1).  DenseNet layers normalize each reused
feature map with its own BN layer before concatenation; this is the same
computation as one BN over the concatenated input, but makes every reuse a
separate BN vertex.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ir import Graph, GraphBuilder, WeightStore


@dataclass
class ArchSpec:
    family: str  # toy | multipath | resnet | densenet | resnext
    depth: int = 0
    growth_rate: int = 12
    cardinality: int = 8
    width: int = 64
    bottleneck: bool = False
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    paths_form: bool = False
    extra: dict = field(default_factory=dict)


PRESETS: dict[str, ArchSpec] = {
    "toy": ArchSpec("toy", num_classes=8, input_shape=(3, 16, 16)),
    "multipath": ArchSpec("multipath", cardinality=4, num_classes=8, input_shape=(3, 16, 16)),
    "resnet164": ArchSpec("resnet", depth=164, bottleneck=True),
    "densenet40": ArchSpec("densenet", depth=40, growth_rate=12),
    "resnext29-8x64d": ArchSpec("resnext", depth=29, cardinality=8, width=64, bottleneck=True),
    "resnext50-32x4d": ArchSpec(
        "resnext", depth=50, cardinality=32, width=4, bottleneck=True, num_classes=1000, input_shape=(3, 224, 224)
    ),
    "densenet-bc-121": ArchSpec(
        "densenet", depth=121, growth_rate=32, bottleneck=True, num_classes=1000, input_shape=(3, 224, 224)
    ),
}


class UnsupportedSpec(ValueError):
    pass


class _Net:
    """Thin layer helpers over ``GraphBuilder`` with seeded initialization."""

    def __init__(self, input_shape, seed: int):
        self.b = GraphBuilder(tuple(input_shape))
        self.rng = np.random.default_rng(seed)

    def conv(self, x, cin, cout, k=3, stride=1, padding=None, groups=1, pool=None):
        padding = k // 2 if padding is None else padding
        std = np.sqrt(2.0 / (k * k * cin // groups))
        kernel = self.rng.standard_normal((cout, cin // groups, k, k)) * std
        attrs = dict(
            in_channels=cin, out_channels=cout, kernel=[k, k], stride=stride, padding=padding, groups=groups, bias=False
        )
        if pool:
            attrs["pool"] = pool
        return self.b.add("ConvLayer", [x], {"kernel": kernel}, **attrs)

    def bn(self, x, c, relu=True, pool=None):
        w = {"gamma": np.ones(c), "beta": np.zeros(c), "mean": np.zeros(c), "var": np.ones(c)}
        attrs = dict(channels=c, relu=relu, eps=1e-5)
        if pool:
            attrs["pool"] = pool
        return self.b.add("BNLayer", [x], w, **attrs)

    def add(self, xs, c, relu=False):
        return self.b.add("AddLayer", list(xs), channels=c, relu=relu)

    def concat(self, xs):
        return xs[0] if len(xs) == 1 else self.b.add("Concat", list(xs))

    def head(self, x, c, classes):
        gp = self.b.add("GlobalPool", [x])
        bound = 1.0 / np.sqrt(c)
        fc = self.b.add(
            "FC",
            [gp],
            {
                "weight": self.rng.uniform(-bound, bound, (classes, c)),
                "bias": self.rng.uniform(-bound, bound, classes),
            },
            in_features=c,
            out_features=classes,
        )
        self.b.add("Output", [fc])

    def build(self, **meta) -> tuple[Graph, WeightStore]:
        return self.b.build({k: str(v) for k, v in meta.items()})


def build_toy_cnn(seed: int = 0, num_classes: int = 8, input_shape=(3, 16, 16), widths=(16, 40, 40)):
    """Two residual blocks with projection shortcuts, then a two-path concat block."""
    c1, c2, c3 = widths
    n = _Net(input_shape, seed)
    x = n.bn(n.conv(n.b.input, input_shape[0], c1), c1)
    for cin, cout, stride in ((c1, c1, 1), (c1, c2, 2)):
        h = n.bn(n.conv(x, cin, cout, 3, stride), cout)
        h = n.bn(n.conv(h, cout, cout), cout, relu=False)
        sc = n.bn(n.conv(x, cin, cout, 1, stride), cout, relu=False)
        x = n.add([h, sc], cout, relu=True)
    p1 = n.bn(n.conv(x, c2, c3, 3), c3)
    p2 = n.bn(n.conv(x, c2, c3, 1), c3)
    x = n.concat([p1, p2])
    n.head(x, 2 * c3, num_classes)
    return n.build(arch="toy")


def build_toy_multipath(paths: int = 4, seed: int = 0, num_classes: int = 8, input_shape=(3, 16, 16), stages: int = 2,
                        path_width: int = 8, stem: int = 16, fuse: int = 32):
    """Stages of ``paths`` parallel conv paths joined by Concat (equivalent form of a group conv)."""
    if paths < 2:
        raise UnsupportedSpec("multipath network needs at least 2 paths")
    n = _Net(input_shape, seed)
    x = n.bn(n.conv(n.b.input, input_shape[0], stem), stem)
    cin = stem
    for s in range(stages):
        stride = 1 if s == 0 else 2
        outs = []
        for _ in range(paths):
            h = n.bn(n.conv(x, cin, path_width, 1), path_width)
            h = n.bn(n.conv(h, path_width, path_width, 3, stride), path_width)
            outs.append(h)
        x = n.concat(outs)
        x = n.bn(n.conv(x, paths * path_width, fuse, 1), fuse)
        cin = fuse
    n.head(x, cin, num_classes)
    return n.build(arch="multipath", paths=paths)


def build_resnet_cifar(depth: int = 164, seed: int = 0, num_classes: int = 10, input_shape=(3, 32, 32)):
    """Pre-activation bottleneck ResNet for CIFAR (depth = 9n + 2)."""
    if (depth - 2) % 9:
        raise UnsupportedSpec("pre-activation bottleneck ResNet depth must be 9n+2")
    blocks = (depth - 2) // 9
    n = _Net(input_shape, seed)
    x = n.conv(n.b.input, input_shape[0], 16)
    inplanes = 16
    for stage, planes in enumerate((16, 32, 64)):
        for i in range(blocks):
            stride = 2 if stage > 0 and i == 0 else 1
            pre = n.bn(x, inplanes)
            h = n.conv(pre, inplanes, planes, 1)
            h = n.conv(n.bn(h, planes), planes, planes, 3, stride)
            h = n.conv(n.bn(h, planes), planes, 4 * planes, 1)
            sc = n.conv(pre, inplanes, 4 * planes, 1, stride) if i == 0 else x
            x = n.add([h, sc], 4 * planes)
            inplanes = 4 * planes
    x = n.bn(x, inplanes)
    n.head(x, inplanes, num_classes)
    return n.build(arch=f"resnet{depth}")


def build_resnext(depth: int, cardinality: int, width: int, seed: int = 0, num_classes: int = 10,
                  input_shape=(3, 32, 32), paths_form: bool = False):
    """ResNeXt; CIFAR variant for 32×32 inputs (3 stages), ImageNet variant otherwise.

    ``paths_form`` builds each grouped 3×3 convolution as ``cardinality``
    explicit paths joined by Concat, which edge-level pruning operates on.
    """
    n = _Net(input_shape, seed)
    imagenet = input_shape[1] > 64
    if imagenet:
        counts = {50: (3, 4, 6, 3), 101: (3, 4, 23, 3)}.get(depth)
        if counts is None:
            raise UnsupportedSpec(f"ImageNet ResNeXt depth {depth} not supported")
        x = n.bn(n.conv(n.b.input, input_shape[0], 64, 7, 2, 3), 64, pool={"mode": "max", "kernel": 3, "stride": 2, "padding": 1})
        inplanes, base_out = 64, 256
    else:
        if (depth - 2) % 9:
            raise UnsupportedSpec("CIFAR ResNeXt depth must be 9n+2")
        counts = ((depth - 2) // 9,) * 3
        x = n.bn(n.conv(n.b.input, input_shape[0], 64), 64)
        inplanes, base_out = 64, 256
    for stage, nblocks in enumerate(counts):
        w = cardinality * width * 2**stage
        out = base_out * 2**stage
        for i in range(nblocks):
            stride = 2 if stage > 0 and i == 0 else 1
            if paths_form:
                d = w // cardinality
                outs = []
                for _ in range(cardinality):
                    h = n.bn(n.conv(x, inplanes, d, 1), d)
                    outs.append(n.bn(n.conv(h, d, d, 3, stride), d))
                h = n.concat(outs)
            else:
                h = n.bn(n.conv(x, inplanes, w, 1), w)
                h = n.bn(n.conv(h, w, w, 3, stride, groups=cardinality), w)
            h = n.bn(n.conv(h, w, out, 1), out, relu=False)
            if inplanes != out or stride != 1:
                sc = n.bn(n.conv(x, inplanes, out, 1, stride), out, relu=False)
            else:
                sc = x
            x = n.add([h, sc], out, relu=True)
            inplanes = out
    n.head(x, inplanes, num_classes)
    return n.build(arch=f"resnext{depth}-{cardinality}x{width}d")


def build_densenet(depth: int = 40, growth_rate: int = 12, bottleneck: bool = False, seed: int = 0,
                   num_classes: int = 10, input_shape=(3, 32, 32), compression: float | None = None):
    """DenseNet (CIFAR for 32×32 inputs, ImageNet DenseNet-BC-121 otherwise)."""
    k = growth_rate
    n = _Net(input_shape, seed)
    imagenet = input_shape[1] > 64
    if imagenet:
        counts = {121: (6, 12, 24, 16), 169: (6, 12, 32, 32)}.get(depth)
        if counts is None:
            raise UnsupportedSpec(f"ImageNet DenseNet depth {depth} not supported")
        stem = 2 * k
        x = n.bn(n.conv(n.b.input, input_shape[0], stem, 7, 2, 3), stem, pool={"mode": "max", "kernel": 3, "stride": 2, "padding": 1})
    else:
        per_layer = 2 if bottleneck else 1
        if (depth - 4) % (3 * per_layer):
            raise UnsupportedSpec("CIFAR DenseNet depth must be 3·L·(1 or 2)+4")
        counts = ((depth - 4) // (3 * per_layer),) * 3
        stem = 2 * k if bottleneck else 16
        x = n.conv(n.b.input, input_shape[0], stem)
    if compression is None:
        compression = 0.5 if bottleneck else 1.0
    sources = [(x, stem)]

    def normalized(srcs):
        return n.concat([n.bn(s, c) for s, c in srcs]), sum(c for _, c in srcs)

    for bi, layers in enumerate(counts):
        for _ in range(layers):
            cat, cin = normalized(sources)
            if bottleneck:
                h = n.bn(n.conv(cat, cin, 4 * k, 1), 4 * k)
                h = n.conv(h, 4 * k, k, 3)
            else:
                h = n.conv(cat, cin, k, 3)
            sources.append((h, k))
        if bi < len(counts) - 1:
            cat, cin = normalized(sources)
            cout = int(cin * compression)
            t = n.conv(cat, cin, cout, 1, pool={"mode": "avg", "kernel": 2, "stride": 2, "padding": 0})
            sources = [(t, cout)]
    cat, cin = normalized(sources)
    n.head(cat, cin, num_classes)
    return n.build(arch=f"densenet{depth}")


def build(spec: ArchSpec | str, seed: int = 0) -> tuple[Graph, WeightStore]:
    if isinstance(spec, str):
        if spec not in PRESETS:
            raise UnsupportedSpec(f"unknown architecture {spec!r}; choose from {sorted(PRESETS)}")
        spec = PRESETS[spec]
    f = spec.family
    if f == "toy":
        return build_toy_cnn(seed, spec.num_classes, spec.input_shape, **spec.extra)
    if f == "multipath":
        return build_toy_multipath(spec.cardinality, seed, spec.num_classes, spec.input_shape, **spec.extra)
    if f == "resnet":
        if not spec.bottleneck:
            raise UnsupportedSpec("only the pre-activation bottleneck ResNet is provided")
        return build_resnet_cifar(spec.depth, seed, spec.num_classes, spec.input_shape)
    if f == "resnext":
        return build_resnext(spec.depth, spec.cardinality, spec.width, seed, spec.num_classes, spec.input_shape,
                             spec.paths_form)
    if f == "densenet":
        return build_densenet(spec.depth, spec.growth_rate, spec.bottleneck, seed, spec.num_classes, spec.input_shape)
    raise UnsupportedSpec(f"unknown family {f!r}")
