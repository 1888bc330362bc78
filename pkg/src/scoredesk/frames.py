"""Minimal SVG snapshots: density contours plus the particle cloud.

Contours come from a marching-squares pass over the mixture log-density
on a regular grid. Segment endpoints interpolate linearly along cell
edges, which is plenty for monitoring figures and keeps the output free
of plotting dependencies.
"""

import numpy as np

# For each of the 16 corner sign patterns, the pairs of cell edges a
# contour segment crosses. Edges: 0 bottom, 1 right, 2 top, 3 left.
# Corners are numbered 0 bottom-left, 1 bottom-right, 2 top-right,
# 3 top-left; bit k of the case index is set when corner k >= level.
_SEGMENTS = {
    0: [], 15: [],
    1: [(3, 0)], 14: [(3, 0)],
    2: [(0, 1)], 13: [(0, 1)],
    3: [(3, 1)], 12: [(3, 1)],
    4: [(1, 2)], 11: [(1, 2)],
    6: [(0, 2)], 9: [(0, 2)],
    7: [(3, 2)], 8: [(3, 2)],
    5: [(3, 0), (1, 2)],
    10: [(0, 1), (3, 2)],
}


def _edge_point(edge, x0, y0, dx, dy, c):
    """Linear interpolation of the level crossing on one cell edge."""
    f = lambda a, b: a / (a - b) if a != b else 0.5
    if edge == 0:
        return x0 + dx * f(c[0], c[1]), y0
    if edge == 1:
        return x0 + dx, y0 + dy * f(c[1], c[2])
    if edge == 2:
        return x0 + dx * f(c[3], c[2]), y0 + dy
    return x0, y0 + dy * f(c[0], c[3])


def contour_segments(xs, ys, z, level):
    """Marching squares: line segments of {z == level} on the grid."""
    segs = []
    nz = z - level
    for i in range(len(xs) - 1):
        for j in range(len(ys) - 1):
            c = (nz[j, i], nz[j, i + 1], nz[j + 1, i + 1], nz[j + 1, i])
            case = sum(1 << k for k in range(4) if c[k] >= 0.0)
            for e0, e1 in _SEGMENTS[case]:
                p0 = _edge_point(e0, xs[i], ys[j], xs[i + 1] - xs[i],
                                 ys[j + 1] - ys[j], c)
                p1 = _edge_point(e1, xs[i], ys[j], xs[i + 1] - xs[i],
                                 ys[j + 1] - ys[j], c)
                segs.append((p0, p1))
    return segs


def render_frame(points, mix, path, size=480, grid=72, n_levels=6):
    """Write an SVG with mixture density contours and particle dots."""
    points = np.asarray(points, dtype=float)
    mu = mix.means
    lo = np.minimum(mu.min(axis=0) - 3.0, points.min(axis=0) - 0.5)
    hi = np.maximum(mu.max(axis=0) + 3.0, points.max(axis=0) + 0.5)
    span = float(np.max(hi - lo))
    center = 0.5 * (lo + hi)
    lo = center - 0.55 * span
    hi = center + 0.55 * span

    xs = np.linspace(lo[0], hi[0], grid)
    ys = np.linspace(lo[1], hi[1], grid)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    z = mix.log_density(pts).reshape(gy.shape)
    zmax = float(z.max())
    levels = [zmax - 0.7 * (k + 1) for k in range(n_levels)]

    def to_px(p):
        u = (p[0] - lo[0]) / (hi[0] - lo[0]) * size
        v = size - (p[1] - lo[1]) / (hi[1] - lo[1]) * size
        return u, v

    parts = ['<svg xmlns="http://www.w3.org/2000/svg" '
             f'width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for lev in levels:
        d = []
        for p0, p1 in contour_segments(xs, ys, z, lev):
            a, b = to_px(p0), to_px(p1)
            d.append(f"M{a[0]:.1f} {a[1]:.1f}L{b[0]:.1f} {b[1]:.1f}")
        if d:
            parts.append('<path d="%s" stroke="#bbbbbb" fill="none" '
                         'stroke-width="1"/>' % "".join(d))
    for p in points:
        u, v = to_px(p)
        parts.append(f'<circle cx="{u:.1f}" cy="{v:.1f}" r="2.5" '
                     'fill="#1f5fbf" fill-opacity="0.75"/>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
