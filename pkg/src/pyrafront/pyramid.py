"""Pyramid geometry: facets, sectors, distances to the edge set."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class PyramidSpec:
    """h(x, y) = max_j (a_j x + b_j y) with every normal on the circle |(a, b)| = m*.

    ``normals`` has shape (N, 2) and is ordered counter-clockwise.
    """

    c: float
    k: float
    normals: np.ndarray

    def __post_init__(self):
        if not (self.k > 0 and self.c > self.k):
            raise ValueError("need c > k > 0")
        nrm = np.array(self.normals, dtype=float, copy=True)
        if nrm.ndim != 2 or nrm.shape[1] != 2 or nrm.shape[0] < 3:
            raise ValueError("normals must have shape (N, 2) with N >= 3")
        nrm.setflags(write=False)
        object.__setattr__(self, "normals", nrm)
        m = self.m_star
        if np.max(np.abs(np.hypot(nrm[:, 0], nrm[:, 1]) - m)) > 1e-10 * max(m, 1.0):
            raise ValueError("all normals must have length m* = sqrt(c^2 - k^2) / k")
        nxt = np.roll(nrm, -1, axis=0)
        det = nrm[:, 0] * nxt[:, 1] - nrm[:, 1] * nxt[:, 0]
        if np.any(det <= 0):
            raise ValueError("normals must turn counter-clockwise by less than pi")
        turn = np.arctan2(det, np.sum(nrm * nxt, axis=1)).sum()
        if abs(turn - 2 * np.pi) > 1e-9:
            raise ValueError("normals must wind exactly once around the origin")

    @property
    def m_star(self) -> float:
        return float(np.sqrt(self.c**2 - self.k**2) / self.k)

    @property
    def N(self) -> int:
        return self.normals.shape[0]

    @property
    def edge_directions(self) -> np.ndarray:
        """Unit directions of the rays of E; row j separates sector j from sector j+1."""
        e = self.normals + np.roll(self.normals, -1, axis=0)
        return e / np.linalg.norm(e, axis=1)[:, None]

    @property
    def lifted_edges(self) -> np.ndarray:
        """Unit directions of the rays of the lifted edge set in R^3."""
        e = self.edge_directions
        z = np.sum(self.normals * e, axis=1)
        g = np.column_stack([e, z])
        return g / np.linalg.norm(g, axis=1)[:, None]


def make_regular_pyramid(N: int, c: float, k: float) -> PyramidSpec:
    """Regular N-gon pyramid with edges along the angles 2 pi j / N.

    Normals sit at the angles (2j + 1) pi / N, so N = 4 gives
    h = (m* / sqrt 2)(|x| + |y|) with edges on the coordinate axes.
    """
    if N < 3:
        raise ValueError("N must be at least 3")
    if not (k > 0 and c > k):
        raise ValueError("need c > k > 0")
    m = np.sqrt(c * c - k * k) / k
    th = (2 * np.arange(N) + 1) * np.pi / N
    return PyramidSpec(c, k, m * np.column_stack([np.cos(th), np.sin(th)]))


def facets(spec: PyramidSpec, x, y) -> np.ndarray:
    """h_j(x, y) stacked on a trailing axis of length N."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    return x[..., None] * spec.normals[:, 0] + y[..., None] * spec.normals[:, 1]


def height(spec: PyramidSpec, x, y):
    return np.max(facets(spec, x, y), axis=-1)


def region_index(spec: PyramidSpec, x, y):
    """Index of the maximizing facet; ties go to the lowest index."""
    return np.argmax(facets(spec, x, y), axis=-1)


def height_gradient(spec: PyramidSpec, x, y) -> np.ndarray:
    return spec.normals[region_index(spec, x, y)]


def lambda_pm(spec: PyramidSpec, j: int, x, y):
    """(lambda_j^+, lambda_j^-): distances to the lines h_j = h_{j+1} and h_j = h_{j-1}.

    For (x, y) in the closed sector j these are the distances to the
    neighbouring sectors whenever the sector angle is at most pi / 2; their
    minimum is the distance to E in every case.
    """
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    n = spec.normals
    out = []
    for i in ((j + 1) % spec.N, (j - 1) % spec.N):
        d = n[j] - n[i]
        out.append((d[0] * x + d[1] * y) / np.hypot(d[0], d[1]))
    return tuple(out)


def edge_distance(spec: PyramidSpec, x, y):
    """lambda(x, y) = dist((x, y), E) = min(lambda_j^+, lambda_j^-) on sector j."""
    x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    n = spec.normals
    j = region_index(spec, x, y)[..., None]
    out = np.inf
    for d in (n - np.roll(n, -1, axis=0), n - np.roll(n, 1, axis=0)):
        lam = (x[..., None] * d[:, 0] + y[..., None] * d[:, 1]) / np.hypot(d[:, 0], d[:, 1])
        out = np.minimum(out, np.take_along_axis(lam, j, axis=-1)[..., 0])
    out = np.maximum(out, 0.0)
    return out if out.ndim else float(out)


def ray_distance(points, directions):
    """Distances from points (..., d) to rays t * u, t >= 0, for unit u (M, d); shape (..., M)."""
    p = np.asarray(points, dtype=float)
    t = np.maximum(p @ np.asarray(directions).T, 0.0)
    diff = p[..., None, :] - t[..., None] * directions
    return np.linalg.norm(diff, axis=-1)


def planar_edge_distance(spec: PyramidSpec, x, y):
    """dist((x, y), E) by direct point-to-ray distance."""
    p = np.stack(np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float)), axis=-1)
    return np.min(ray_distance(p, spec.edge_directions), axis=-1)


def lifted_edge_distance(spec: PyramidSpec, points):
    """3D distance from points (..., 3) to the lifted edge set."""
    return np.min(ray_distance(points, spec.lifted_edges), axis=-1)


def gamma_R_mask(spec: PyramidSpec, points, R: float):
    """True where the 3D distance to the lifted edges exceeds R."""
    if R < 0:
        raise ValueError("R must be non-negative")
    return lifted_edge_distance(spec, points) > R


def save_pyramid(spec: PyramidSpec, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# c={float(spec.c)!r},k={float(spec.k)!r}\n")
        for a, b in spec.normals:
            fh.write(f"{float(a)!r},{float(b)!r}\n")


def load_pyramid(path) -> PyramidSpec:
    with open(path) as fh:
        head = fh.readline()
        if not head.startswith("# "):
            raise ValueError("missing '# c=,k=' header")
        vals = dict(item.split("=") for item in head[2:].strip().split(","))
        rows = np.loadtxt(fh, delimiter=",", ndmin=2)
    return PyramidSpec(float(vals["c"]), float(vals["k"]), rows)
