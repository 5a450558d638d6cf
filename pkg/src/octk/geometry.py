"""Edge and orientation rasters for occlusion boundaries.

An edge map marks pixels lying on a depth discontinuity; the paired
orientation map stores, at each edge pixel, the boundary's tangent angle in
(-pi, pi]. The traversal direction of a boundary is chosen so that the
occluding (foreground) region lies on the LEFT of the tangent arrow, which
encodes which side is in front.

Coordinate conventions used throughout the package:

* polyline points are ``(x, y)`` with ``x`` = column and ``y`` = row
  (row 0 at the top of the image);
* angles follow the y-up convention: angle 0 points east (+x), pi/2 points
  up the screen (decreasing row). The tangent of a segment from p0 to p1 is
  ``atan2(y0 - y1, x1 - x0)``.

Orientation values at non-edge pixels are stored as 0.0 and carry no
meaning; :func:`validate_pair` ignores them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EdgeMap",
    "OrientationMap",
    "OcclusionBoundary",
    "ValidationReport",
    "wrap_angle",
    "rasterize_boundary",
    "validate_pair",
]

TWO_PI = 2.0 * np.pi


def wrap_angle(theta):
    """Wrap angle(s) into the half-open interval (-pi, pi].

    The boundary maps to +pi, never -pi. Idempotent and 2*pi-periodic.
    Accepts scalars or arrays; returns the same kind.
    """
    theta = np.asarray(theta, dtype=np.float64)
    out = theta - TWO_PI * np.ceil((theta - np.pi) / TWO_PI)
    # Guard the half-open interval against rounding on the subtraction.
    out = np.where(out > np.pi, out - TWO_PI, out)
    out = np.where(out <= -np.pi, out + TWO_PI, out)
    return float(out) if out.ndim == 0 else out


class EdgeMap:
    """Binary per-pixel raster: 1 on an occlusion edge, 0 elsewhere."""

    def __init__(self, values):
        arr = np.asarray(values)
        if arr.ndim != 2:
            raise ValueError(f"edge map must be 2-D, got shape {arr.shape}")
        self.values = arr.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        return isinstance(other, EdgeMap) and np.array_equal(self.values, other.values)

    def __repr__(self):
        return f"EdgeMap({self.height}x{self.width}, {int(self.values.sum())} edge px)"


class OrientationMap:
    """Per-pixel tangent angles; meaningful only where the paired edge map is 1."""

    def __init__(self, values):
        arr = np.asarray(values, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"orientation map must be 2-D, got shape {arr.shape}")
        self.values = arr

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __repr__(self):
        return f"OrientationMap({self.height}x{self.width})"


@dataclass
class OcclusionBoundary:
    """An open or closed polyline with a declared foreground side.

    ``points`` is an (N, 2) float array of (x, y) positions, N >= 2, with
    consecutive points distinct. ``foreground_side`` says which side of the
    traversal direction the occluding region is on.
    """

    points: np.ndarray
    foreground_side: str = "left"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValueError(f"boundary needs an (N>=2, 2) point array, got {pts.shape}")
        if self.foreground_side not in ("left", "right"):
            raise ValueError(f"foreground_side must be 'left' or 'right', got {self.foreground_side!r}")
        self.points = pts


@dataclass
class ValidationReport:
    extent_mismatch: bool = False
    bad_binary_values: int = 0
    out_of_range_angles: int = 0
    messages: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.extent_mismatch and self.bad_binary_values == 0 and self.out_of_range_angles == 0


def _segment_pixels(x0, y0, x1, y1):
    """8-connected Bresenham line between rounded endpoints, inclusive."""
    x0, y0, x1, y1 = int(round(x0)), int(round(y0)), int(round(x1)), int(round(y1))
    dx = abs(x1 - x0)
    dy = abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx - dy
    pixels = []
    x, y = x0, y0
    while True:
        pixels.append((x, y))
        if x == x1 and y == y1:
            break
        e2 = 2 * err
        if e2 > -dy:
            err -= dy
            x += sx
        if e2 < dx:
            err += dx
            y += sy
    return pixels


def rasterize_boundary(boundary: OcclusionBoundary, width: int, height: int):
    """Draw a boundary as a 1-pixel 8-connected stroke with tangent angles.

    Each edge pixel stores the wrapped tangent of the segment that drew it;
    a pixel at a vertex takes the outgoing segment's direction. When the
    declared foreground side is 'right' the tangents are flipped by pi so
    that, as stored, the foreground is always on the left.

    Returns ``(EdgeMap, OrientationMap)``. Zero-length segments are skipped;
    a boundary whose every segment degenerates is rejected.
    """
    pts = boundary.points
    if np.any(pts[:, 0] < -0.5) or np.any(pts[:, 0] > width - 0.5) or \
       np.any(pts[:, 1] < -0.5) or np.any(pts[:, 1] > height - 0.5):
        raise ValueError("boundary polyline leaves the image bounds")

    edges = np.zeros((height, width), dtype=np.uint8)
    angles = np.zeros((height, width), dtype=np.float32)
    flip = np.pi if boundary.foreground_side == "right" else 0.0

    drew_any = False
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        if x0 == x1 and y0 == y1:
            continue
        theta = wrap_angle(np.arctan2(y0 - y1, x1 - x0) + flip)
        for x, y in _segment_pixels(x0, y0, x1, y1):
            if 0 <= x < width and 0 <= y < height:
                edges[y, x] = 1
                angles[y, x] = theta
                drew_any = True
    if not drew_any:
        raise ValueError("boundary rasterized to no pixels (all segments degenerate)")
    return EdgeMap(edges), OrientationMap(angles)


def validate_pair(edge: EdgeMap, orient: OrientationMap) -> ValidationReport:
    """Check an edge/orientation pair; report-only, never raises.

    Flags extent mismatches, non-binary edge values, and angles outside
    (-pi, pi] at edge pixels. Angles at non-edge pixels are not checked.
    """
    report = ValidationReport()
    if (edge.height, edge.width) != (orient.height, orient.width):
        report.extent_mismatch = True
        report.messages.append(
            f"extent mismatch: edges {edge.height}x{edge.width} vs "
            f"orientations {orient.height}x{orient.width}")
        return report
    bad_bin = ~np.isin(edge.values, (0, 1))
    report.bad_binary_values = int(bad_bin.sum())
    if report.bad_binary_values:
        report.messages.append(f"{report.bad_binary_values} edge values outside {{0,1}}")
    on_edge = edge.values == 1
    a = orient.values[on_edge]
    # Compare in the map's own dtype: float32(pi) sits one ulp above the
    # float64 value and is the legal +pi boundary for float32 storage.
    pi_b = a.dtype.type(np.pi)
    bad_angle = (a <= -pi_b) | (a > pi_b) | ~np.isfinite(a)
    report.out_of_range_angles = int(bad_angle.sum())
    if report.out_of_range_angles:
        report.messages.append(
            f"{report.out_of_range_angles} edge-pixel angles outside (-pi, pi]")
    return report
