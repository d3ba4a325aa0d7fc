from math import gcd

import numpy as np


def cross(o, a, b) -> int:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> list[tuple[int, int]]:
    """Monotone-chain hull, counter-clockwise, collinear points dropped."""
    pts = sorted(set((int(x), int(y)) for x, y in points))
    if len(pts) <= 2:
        return pts
    lower: list[tuple[int, int]] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple[int, int]] = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def shoelace_area(polygon) -> float:
    n = len(polygon)
    twice = 0
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        twice += x1 * y2 - x2 * y1
    return abs(twice) / 2.0


def hull_lattice_count(hull) -> float:
    """Pixel centres covered by a lattice polygon (Pick: A + B/2 + 1)."""
    n = len(hull)
    boundary = 0
    for i in range(n):
        x1, y1 = hull[i]
        x2, y2 = hull[(i + 1) % n]
        boundary += gcd(abs(x2 - x1), abs(y2 - y1))
    return shoelace_area(hull) + boundary / 2.0 + 1.0


def row_extremes(pixels: np.ndarray) -> np.ndarray:
    # Hull vertices are always the leftmost or rightmost pixel of some row
    xs, ys = pixels[:, 0], pixels[:, 1]
    order = np.lexsort((xs, ys))
    xs, ys = xs[order], ys[order]
    change = ys[1:] != ys[:-1]
    first = np.r_[True, change]
    last = np.r_[change, True]
    return np.concatenate(
        [np.stack([xs[first], ys[first]], axis=1), np.stack([xs[last], ys[last]], axis=1)]
    )


def convexity_of_pixels(pixels: np.ndarray) -> float:
    pixels = np.asarray(pixels)
    if len(pixels) < 3:
        return 1.0
    hull = convex_hull(row_extremes(pixels))
    if len(hull) < 3:
        # collinear pixel set
        return 1.0
    return min(1.0, len(pixels) / hull_lattice_count(hull))
