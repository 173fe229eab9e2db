"""PGM image I/O and seeded synthetic test images."""

from __future__ import annotations

import numpy as np


def write_pgm(path, image):
    """Write an image as plain-text PGM (P2), values clipped to [0, 255]."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("a two-dimensional image is required")
    img = np.clip(np.rint(img), 0, 255).astype(int)
    h, w = img.shape
    lines = [f"P2", f"{w} {h}", "255"]
    for row in img:
        lines.append(" ".join(str(v) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_pgm(path):
    """Read a P2 or P5 PGM image into a float array in [0, 255]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] not in (b"P2", b"P5"):
        raise IOError(f"{path}: not a PGM (P2/P5) file")
    binary = data[:2] == b"P5"

    # strip comments, then tokenize the header
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    w, h, maxval = (int(t) for t in tokens)
    pos += 1
    if binary:
        raw = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
        img = raw.reshape(h, w).astype(float)
    else:
        vals = np.array(data[pos:].split(), dtype=float)
        if vals.size < w * h:
            raise IOError(f"{path}: truncated PGM payload")
        img = vals[: w * h].reshape(h, w)
    return img * (255.0 / maxval)


def synth_phantom(side, seed=0):
    """Piecewise-constant phantom: overlapping ellipses on a dark ground.

    One central ellipse is always present so the image has at least two
    gray levels; further ellipses, axes and intensities are seeded draws.
    """
    rng = np.random.default_rng(seed)
    img = np.zeros((side, side))
    yy, xx = np.mgrid[0:side, 0:side]
    yy = (yy - (side - 1) / 2.0) / side
    xx = (xx - (side - 1) / 2.0) / side

    def ellipse(cx, cy, ax, ay, angle, level):
        ca, sa = np.cos(angle), np.sin(angle)
        u = (xx - cx) * ca + (yy - cy) * sa
        v = -(xx - cx) * sa + (yy - cy) * ca
        img[(u / ax) ** 2 + (v / ay) ** 2 <= 1.0] = level

    ellipse(0.0, 0.0, 0.38, 0.30, 0.0, 190)
    for _ in range(rng.integers(3, 6)):
        ellipse(
            rng.uniform(-0.25, 0.25),
            rng.uniform(-0.25, 0.25),
            rng.uniform(0.05, 0.2),
            rng.uniform(0.05, 0.2),
            rng.uniform(0, np.pi),
            int(rng.integers(40, 256)),
        )
    return img


def synth_smooth_edges(side, seed=0):
    """Random smooth field with a few sharp ridges added on top.

    The step edges give the finite-difference histogram its heavy tail,
    the low-frequency field keeps the image otherwise smooth.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side] / side
    img = np.zeros((side, side))
    for _ in range(4):
        fx, fy = rng.uniform(-1.5, 1.5, size=2)
        img += rng.uniform(0.3, 1.0) * np.cos(
            2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi)
        )
    for _ in range(3):
        nx, ny = rng.standard_normal(2)
        nn = np.hypot(nx, ny)
        ridge = ((xx - rng.uniform(0.2, 0.8)) * nx + (yy - rng.uniform(0.2, 0.8)) * ny) / nn
        img += rng.uniform(0.5, 1.2) * (ridge > 0)
    img -= img.min()
    img *= 255.0 / max(img.max(), 1e-12)
    return img
