"""Point clouds: analytic ellipse/torus generators, file loading, subsampling."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels


class PointCloudError(ValueError):
    """Raised for invalid point-cloud inputs or malformed point files."""


@dataclass(frozen=True)
class Chart:
    """Analytic chart of a synthetic manifold.

    ``kind`` is one of ``"ellipse"``, ``"torus"`` or ``"external"``; ``a`` is
    the ellipse semi-major length (unused otherwise).
    """

    kind: str
    a: float | None = None

    def metric(self, params):
        """Metric tensor at each parameter row, shape ``(N, m, m)``."""
        params = np.atleast_2d(np.asarray(params, dtype=float))
        if self.kind == "ellipse":
            w = params[:, 0]
            g11 = np.sin(w) ** 2 + self.a**2 * np.cos(w) ** 2
            return g11[:, None, None]
        if self.kind == "torus":
            w1 = params[:, 0]
            g = np.zeros((len(w1), 2, 2))
            g[:, 0, 0] = 1.0
            g[:, 1, 1] = (2.0 + np.cos(w1)) ** 2
            return g
        raise PointCloudError("external clouds have no analytic metric")

    def volume_density(self, params):
        """sqrt(det g) at each parameter row."""
        g = self.metric(params)
        return np.sqrt(np.linalg.det(g))

    def embed(self, params):
        params = np.atleast_2d(np.asarray(params, dtype=float))
        if self.kind == "ellipse":
            w = params[:, 0]
            return np.column_stack([np.cos(w), self.a * np.sin(w)])
        if self.kind == "torus":
            w1, w2 = params[:, 0], params[:, 1]
            r = 2.0 + np.cos(w1)
            return np.column_stack([r * np.cos(w2), r * np.sin(w2), np.sin(w1)])
        raise PointCloudError("external clouds have no analytic embedding")

    def embedding_residual(self, points):
        """Row-wise residual of the implicit equation of the manifold."""
        points = np.asarray(points, dtype=float)
        if self.kind == "ellipse":
            return np.abs(points[:, 0] ** 2 + (points[:, 1] / self.a) ** 2 - 1.0)
        if self.kind == "torus":
            rho = np.hypot(points[:, 0], points[:, 1])
            return np.abs((rho - 2.0) ** 2 + points[:, 2] ** 2 - 1.0)
        raise PointCloudError("external clouds have no implicit equation")


EXTERNAL = Chart("external")


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    m: int
    chart: Chart = field(default=EXTERNAL)
    params: np.ndarray | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=float)
        if pts.ndim != 2:
            raise PointCloudError(f"points must be a 2-d array, got shape {pts.shape}")
        n, d = pts.shape
        if n < 2:
            raise PointCloudError(f"need at least 2 points, got {n}")
        if not 1 <= self.m <= d:
            raise PointCloudError(f"intrinsic dimension m={self.m} must satisfy 1 <= m <= d={d}")
        bad = ~np.isfinite(pts).all(axis=1)
        if bad.any():
            raise PointCloudError(f"non-finite coordinates in row {int(np.argmax(bad))}")
        object.__setattr__(self, "points", pts)
        if self.params is not None:
            par = np.ascontiguousarray(self.params, dtype=float).reshape(n, -1)
            if par.shape[1] != self.m:
                raise PointCloudError("chart parameters must have m columns")
            object.__setattr__(self, "params", par)

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]

    def bounding_box(self):
        return self.points.min(axis=0), self.points.max(axis=0)

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        params = None if self.params is None else self.params[idx]
        return PointCloud(self.points[idx], self.m, self.chart, params)


def _periodic_grid(n):
    return 2.0 * np.pi * np.arange(n) / n


def generate_ellipse(n, a):
    """Ellipse (cos w, a sin w) sampled on a uniform half-open grid in w."""
    if n < 2:
        raise PointCloudError(f"ellipse needs n >= 2, got {n}")
    if not a > 0:
        raise PointCloudError(f"semi-major length must be positive, got {a}")
    chart = Chart("ellipse", float(a))
    params = _periodic_grid(n)[:, None]
    return PointCloud(chart.embed(params), 1, chart, params)


def generate_torus(n1, n2):
    """Torus of radii (2, 1) in R^3 on an ``n1 x n2`` half-open tensor grid.

    Points are ordered with w2 varying fastest.
    """
    if n1 < 2 or n2 < 2:
        raise PointCloudError(f"torus grid needs n1, n2 >= 2, got ({n1}, {n2})")
    chart = Chart("torus")
    w1, w2 = np.meshgrid(_periodic_grid(n1), _periodic_grid(n2), indexing="ij")
    params = np.column_stack([w1.ravel(), w2.ravel()])
    return PointCloud(chart.embed(params), 2, chart, params)


_SPLIT = re.compile(r"[,\s]+")


def _parse_rows(lines, d, path):
    rows = []
    header_allowed = True
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [t for t in _SPLIT.split(line) if t]
        try:
            vals = [float(t) for t in fields]
        except ValueError:
            if header_allowed:
                header_allowed = False
                continue
            raise PointCloudError(f"{path}: row {len(rows)} (line {lineno}): cannot parse {line!r}")
        header_allowed = False
        if len(vals) != d:
            raise PointCloudError(
                f"{path}: row {len(rows)} (line {lineno}): expected {d} fields, got {len(vals)}"
            )
        if not all(np.isfinite(vals)):
            raise PointCloudError(f"{path}: row {len(rows)} (line {lineno}): non-finite value")
        rows.append(vals)
    return rows


def load_pointcloud(path, d=3, m=2):
    """Read a point cloud from a delimited text file.

    Comma- or whitespace-separated, one point per line, ``#`` comments and a
    single leading header line are skipped. Wavefront ``.obj`` files are also
    accepted, in which case only the ``v`` vertex records are read.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise PointCloudError(f"cannot read point cloud {path}: {exc}") from exc
    lines = text.splitlines()
    if path.suffix.lower() == ".obj":
        lines = [ln[2:] for ln in lines if ln.startswith("v ")]
    rows = _parse_rows(lines, d, path)
    if len(rows) < 2:
        raise PointCloudError(f"{path}: need at least 2 points, found {len(rows)}")
    return PointCloud(np.array(rows), m)


def save_pointcloud(pc, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(pc.d)])
        for row in pc.points:
            writer.writerow([repr(float(v)) for v in row])


def subsample(pc, m_out, seed):
    """Uniform selection without replacement; returns (cloud, sorted indices)."""
    if not 2 <= m_out <= pc.n:
        raise PointCloudError(f"subsample size must be in [2, {pc.n}], got {m_out}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(pc.n, size=m_out, replace=False))
    return pc.take(idx), idx


def pairwise_sq_dists(pc):
    X = pc.points if isinstance(pc, PointCloud) else np.ascontiguousarray(pc, dtype=float)
    return _kernels.sq_dists(X)
