"""Desk-scale datasets and the small models that go with them.

Everything here is generated, seeded, and sized to run in seconds: these are
the fixtures the pipelines, tests, and demos operate on. All values pass
through float32 so that saving a model or dataset to the float32 container
and loading it back reproduces the arrays bit for bit.
"""

import numpy as np

from .graph import Graph


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def two_moons(n: int = 400, noise: float = 0.12, seed: int = 0):
    """Two interleaved half-circles in 2-d; binary labels."""
    rng = np.random.default_rng(seed)
    half = n // 2
    t1 = rng.uniform(0.0, np.pi, half)
    t2 = rng.uniform(0.0, np.pi, n - half)
    x1 = np.stack([np.cos(t1), np.sin(t1)], axis=1)
    x2 = np.stack([1.0 - np.cos(t2), 0.5 - np.sin(t2)], axis=1)
    x = np.concatenate([x1, x2]) + rng.normal(0.0, noise, (n, 2))
    y = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(n - half, dtype=np.int64)])
    order = rng.permutation(n)
    return _f32(x[order]), y[order]


def gaussian_blobs(n: int = 600, classes: int = 4, dim: int = 2, spread: float = 0.35, seed: int = 0):
    """Well-separated class clusters on a circle (or random centers for dim > 2)."""
    rng = np.random.default_rng(seed)
    if dim == 2:
        angles = 2.0 * np.pi * np.arange(classes) / classes
        centers = np.stack([np.cos(angles), np.sin(angles)], axis=1) * 2.0
    else:
        centers = rng.normal(0.0, 2.0, (classes, dim))
    y = rng.integers(0, classes, n)
    x = centers[y] + rng.normal(0.0, spread, (n, dim))
    return _f32(x), y.astype(np.int64)


_GLYPHS = [
    "00111100 01000010 01000110 01001010 01010010 01100010 01000010 00111100",  # 0
    "00011000 00111000 00011000 00011000 00011000 00011000 00011000 00111100",  # 1
    "00111100 01000010 00000010 00000100 00011000 00100000 01000000 01111110",  # 2
    "00111100 01000010 00000010 00011100 00000010 00000010 01000010 00111100",  # 3
    "00000100 00001100 00010100 00100100 01000100 01111110 00000100 00000100",  # 4
    "01111110 01000000 01000000 01111100 00000010 00000010 01000010 00111100",  # 5
    "00111100 01000000 01000000 01111100 01000010 01000010 01000010 00111100",  # 6
    "01111110 00000010 00000100 00001000 00010000 00100000 00100000 00100000",  # 7
    "00111100 01000010 01000010 00111100 01000010 01000010 01000010 00111100",  # 8
    "00111100 01000010 01000010 00111110 00000010 00000010 00000010 00111100",  # 9
]


def _glyph_templates() -> np.ndarray:
    out = np.zeros((10, 8, 8))
    for k, rows in enumerate(_GLYPHS):
        for i, row in enumerate(rows.split()):
            out[k, i] = [float(ch) for ch in row]
    return out


def digit_glyphs(n: int = 500, classes: int = 10, noise: float = 0.15, seed: int = 0):
    """Synthetic 8x8 digit images: jittered, noisy renderings of fixed glyphs.

    Returns (n, 1, 8, 8) images and integer labels.
    """
    rng = np.random.default_rng(seed)
    templates = _glyph_templates()[:classes]
    y = rng.integers(0, classes, n)
    x = np.zeros((n, 1, 8, 8))
    for i in range(n):
        img = templates[y[i]] * rng.uniform(0.7, 1.3)
        dx, dy = rng.integers(-1, 2, 2)
        img = np.roll(np.roll(img, dx, axis=0), dy, axis=1)
        x[i, 0] = img + rng.normal(0.0, noise, (8, 8))
    return _f32(x), y.astype(np.int64)


def split(x: np.ndarray, y: np.ndarray, holdout: float = 0.25, seed: int = 0):
    """Deterministic train/holdout split; returns (x_tr, y_tr, x_ho, y_ho)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(x.shape[0])
    cut = int(round(x.shape[0] * (1.0 - holdout)))
    tr, ho = order[:cut], order[cut:]
    return x[tr], y[tr], x[ho], y[ho]


# ---------------------------------------------------------------------------
# model builders
# ---------------------------------------------------------------------------


def _he(rng, shape, fan_in):
    return _f32(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape))


def build_mlp(sizes, seed: int = 0, activation: str = "relu") -> Graph:
    """Fully connected net: linear/activation pairs, linear head."""
    rng = np.random.default_rng(seed)
    g = Graph(input_shape=(sizes[0],))
    for i in range(len(sizes) - 1):
        name = "fc%d" % (i + 1)
        g.add_linear(name, _he(rng, (sizes[i + 1], sizes[i]), sizes[i]), np.zeros(sizes[i + 1]))
        if i < len(sizes) - 2:
            if activation == "relu6":
                g.add_relu6("act%d" % (i + 1))
            else:
                g.add_relu("act%d" % (i + 1))
    return g


def build_convnet(
    in_shape=(1, 8, 8),
    channels=(8, 16),
    classes: int = 10,
    seed: int = 0,
    batchnorm: bool = False,
    pool: str = "max",
) -> Graph:
    """Conv stack for 8x8 images: two conv/relu/pool stages and a linear head."""
    rng = np.random.default_rng(seed)
    g = Graph(input_shape=in_shape)
    c_in, side = in_shape[0], in_shape[1]
    for i, c_out in enumerate(channels):
        name = "conv%d" % (i + 1)
        g.add_conv2d(name, _he(rng, (c_out, c_in, 3, 3), c_in * 9), np.zeros(c_out), stride=1, padding=1)
        if batchnorm:
            g.add_batchnorm(
                "bn%d" % (i + 1),
                _f32(rng.uniform(0.5, 1.5, c_out)),
                _f32(rng.normal(0.0, 0.3, c_out)),
                np.zeros(c_out),
                np.ones(c_out),
            )
        g.add_relu("act%d" % (i + 1))
        if pool == "avg":
            g.add_avgpool2d("pool%d" % (i + 1), 2)
        else:
            g.add_maxpool2d("pool%d" % (i + 1), 2)
        c_in, side = c_out, side // 2
    g.add_flatten("flat")
    g.add_linear("head", _he(rng, (classes, c_in * side * side), c_in * side * side), np.zeros(classes))
    return g


def build_separable_net(in_shape=(1, 8, 8), width: int = 12, classes: int = 10, seed: int = 0) -> Graph:
    """Depthwise-separable stack: conv, depthwise, pointwise, linear head.

    The conv -> depthwise -> pointwise chain (ReLU between) is the shape
    that benefits from cross-layer equalization, since depthwise layers
    cannot hide per-channel imbalance inside a following dense weight.
    """
    rng = np.random.default_rng(seed)
    g = Graph(input_shape=in_shape)
    c_in = in_shape[0]
    g.add_conv2d("conv1", _he(rng, (width, c_in, 3, 3), c_in * 9), np.zeros(width), padding=1)
    g.add_relu("act1")
    g.add_depthwise_conv2d("dw", _he(rng, (width, 1, 3, 3), 9), np.zeros(width), padding=1)
    g.add_relu("act2")
    g.add_conv2d("pw", _he(rng, (width, width, 1, 1), width), np.zeros(width))
    g.add_relu("act3")
    g.add_maxpool2d("pool", 2)
    g.add_flatten("flat")
    side = in_shape[1] // 2
    g.add_linear("head", _he(rng, (classes, width * side * side), width * side * side), np.zeros(classes))
    return g


def build_branchy_net(in_shape=(2, 8, 8), width: int = 6, classes: int = 4, seed: int = 0, tied_add: bool = False) -> Graph:
    """Covers the structural corners: add, concat, both pools, flatten."""
    rng = np.random.default_rng(seed)
    g = Graph(input_shape=in_shape)
    c_in = in_shape[0]
    g.add_conv2d("stem", _he(rng, (width, c_in, 3, 3), c_in * 9), np.zeros(width), padding=1)
    g.add_relu("stem_act")
    stem = g.output
    g.add_conv2d("left", _he(rng, (width, width, 3, 3), width * 9), np.zeros(width), padding=1, src=stem)
    g.add_relu("left_act")
    left = g.output
    g.add_conv2d("right", _he(rng, (width, width, 1, 1), width), np.zeros(width), src=stem)
    g.add_relu("right_act")
    right = g.output
    g.add_add("join", left, right, tied=tied_add)
    g.add_concat("mix", [g.output, stem], axis=1)
    g.add_avgpool2d("apool", 2)
    g.add_maxpool2d("mpool", 2)
    g.add_flatten("flat")
    side = in_shape[1] // 4
    g.add_linear("head", _he(rng, (classes, 2 * width * side * side), 2 * width * side * side), np.zeros(classes))
    return g
