"""Plot-ready exports: spin-texture slices, preimage loops and linking numbers.

Preimage loops are extracted from an analytic fine grid as the set of
momenta whose ground-state Bloch vector lies within ``eps`` of a target
orientation. The point cloud (a thin tube around the true loop) is thinned
to tube centres, ordered into polylines, and either lifted to the universal
cover of the Brillouin torus or sent to R^3 through the map T^3 -> S^3 -> R^3.
Linking numbers use the exact solid-angle form of the Gauss integral for
polygons, so closed disjoint polylines give integers up to rounding error.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import CurvesIntersect, EmptySet, FragmentedCurve, PoleSingularity
from .hopf import BlochField, ground_bloch, hamiltonian_coefficients

TWO_PI = 2.0 * np.pi
POLE_TOL = 1e-9
MIN_CURVE_SEPARATION = 1e-6
DEFAULT_RESOLUTION = 60
MESH_SHIFT = np.array([0.1234, 0.2718, 0.3141])


@dataclass(frozen=True)
class TextureSlice:
    kz: float
    rows: np.ndarray  # (n*n, 5): kx, ky, sx, sy, sz; kx outer, ky inner

    @property
    def s(self) -> np.ndarray:
        return self.rows[:, 2:]


@dataclass
class PreimageCurve:
    points: np.ndarray
    closed: bool
    target: np.ndarray | None = None
    eps: float | None = None
    threshold: float | None = None
    winding: tuple[int, int, int] = (0, 0, 0)

    def __len__(self):
        return len(self.points)

    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        p = self.points
        q = np.roll(p, -1, axis=0) if self.closed else p[1:]
        return (p if self.closed else p[:-1]), q

    def reversed(self) -> "PreimageCurve":
        return PreimageCurve(self.points[::-1].copy(), self.closed, self.target, self.eps, self.threshold,
                             tuple(-w for w in self.winding))


def texture_slices(field: BlochField) -> list[TextureSlice]:
    """One slice per kz grid value with rows ordered by (kx, ky)."""
    n = field.n
    ax = field.grid.axis
    kx, ky = np.meshgrid(ax, ax, indexing="ij")
    out = []
    for iz in range(n):
        s = field.data[:, :, iz, :].reshape(-1, 3)
        rows = np.column_stack([kx.ravel(), ky.ravel(), s])
        out.append(TextureSlice(float(ax[iz]), rows))
    return out


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def fine_grid(resolution: int) -> np.ndarray:
    ax = TWO_PI * np.arange(resolution) / resolution
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)


def preimage_points(h: float, resolution: int = DEFAULT_RESOLUTION, target=(0.0, 0.0, 1.0), eps: float = 0.2) -> np.ndarray:
    """Momenta of the ``resolution^3`` grid whose ground-state Bloch vector lies within ``eps`` of ``target``."""
    if resolution < 10:
        raise ValueError("resolution must be at least 10")
    if not 0.0 < eps <= 2.0:
        raise ValueError("eps must lie in (0, 2]")
    k = fine_grid(resolution)
    s = ground_bloch(hamiltonian_coefficients(k, h))
    sel = np.linalg.norm(s - _unit(target), axis=-1) <= eps
    if not sel.any():
        raise EmptySet(f"no grid point within {eps} of {tuple(np.round(_unit(target), 6))} at resolution {resolution}")
    return k[sel]


def sphere_point(k, h: float) -> np.ndarray:
    """``(Re eta_up, Im eta_up, Re eta_down, Im eta_down)`` normalized to the unit 3-sphere."""
    k = np.asarray(k, dtype=np.float64)
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    c = np.cos(kx) + np.cos(ky) + np.cos(kz) + h
    eta = np.stack([np.sin(kx), -np.sin(ky), np.sin(kz), -c], axis=-1)
    return eta / np.linalg.norm(eta, axis=-1, keepdims=True)


def stereographic_map(k, h: float) -> np.ndarray:
    """Map momenta to R^3 via the unit 3-sphere: ``(eta1, eta2, eta3) / (1 + eta4)``."""
    eta = sphere_point(k, h)
    den = 1.0 + eta[..., 3]
    if np.any(np.abs(den) < POLE_TOL):
        raise PoleSingularity("momentum maps to the projection pole eta4 = -1")
    return eta[..., :3] / den[..., None]


# ---------------------------------------------------------------- chaining


def _mod(p: np.ndarray, period: float | None) -> np.ndarray:
    """Reduce into ``[0, period)``; ``np.mod`` alone can return ``period`` for tiny negatives."""
    if period is None:
        return p
    p = np.mod(p, period)
    return np.where(p >= period, 0.0, p)


def _wrap(d: np.ndarray, period: float | None) -> np.ndarray:
    if period is None:
        return d
    return d - period * np.round(d / period)


def components(points, threshold: float, period: float | None = None) -> list[np.ndarray]:
    """Split a point cloud into clusters connected by hops shorter than ``threshold``."""
    pts = np.asarray(points, dtype=np.float64)
    pts = _mod(pts, period)
    tree = cKDTree(pts, boxsize=period)
    graph = tree.sparse_distance_matrix(tree, threshold)
    n, lab = connected_components(graph, directed=False)
    return [pts[lab == c] for c in range(n)]


def _median_spacing(pts: np.ndarray, period: float | None) -> float:
    tree = cKDTree(pts, boxsize=period)
    d, _ = tree.query(pts, k=2)
    return float(np.median(d[:, 1]))


def _chain_one(pts: np.ndarray, threshold: float, period: float | None) -> tuple[np.ndarray, bool, tuple]:
    # extremal start: the point with the smallest first coordinate (ties by the next ones)
    start = int(np.lexsort(pts.T[::-1])[0])
    order = [start]
    left = np.ones(len(pts), dtype=bool)
    left[start] = False
    cur = start
    while left.any():
        idx = np.flatnonzero(left)
        d = np.linalg.norm(_wrap(pts[idx] - pts[cur], period), axis=1)
        j = int(np.argmin(d))
        cur = int(idx[j])
        order.append(cur)
        left[cur] = False
    path = pts[order]
    steps = _wrap(np.diff(path, axis=0), period)
    lifted = np.vstack([path[:1], path[0] + np.cumsum(steps, axis=0)])
    gap = lifted[0] - lifted[-1]
    closing = _wrap(gap, period)
    closed = bool(np.linalg.norm(closing) <= threshold)
    winding = (0, 0, 0)
    if period is not None and closed:
        winding = tuple(int(v) for v in np.rint((gap - closing) / period))
    return lifted, closed, winding


def chain_curve(points, threshold: float | None = None, period: float | None = None,
                target=None, eps=None) -> PreimageCurve:
    """Order a point cloud into a polyline by greedy nearest-neighbour chaining.

    ``threshold`` defaults to three times the median nearest-neighbour
    spacing. With ``period`` set, distances are measured on the torus and the
    returned points are a continuous lift to R^3. Raises FragmentedCurve
    (carrying one curve per component) when the cloud is disconnected at
    the threshold.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 4:
        raise ValueError("chain_curve needs at least 4 points in 3D")
    pts = _mod(pts, period)
    if threshold is None:
        threshold = 3.0 * _median_spacing(pts, period)
    parts = components(pts, threshold, period)
    curves = []
    for part in parts:
        if len(part) < 2:
            curves.append(PreimageCurve(part, False, target, eps, threshold))
            continue
        lifted, closed, winding = _chain_one(part, threshold, period)
        curves.append(PreimageCurve(lifted, closed and len(part) >= 3, target, eps, threshold, winding))
    if len(curves) > 1:
        raise FragmentedCurve(f"point cloud splits into {len(curves)} components", curves=curves)
    return curves[0]


def chain_all(points, threshold: float | None = None, period: float | None = None, target=None, eps=None,
              min_points: int = 4) -> list[PreimageCurve]:
    """Like chain_curve but always returns every component (dropping ones with fewer than ``min_points``)."""
    try:
        curves = [chain_curve(points, threshold, period, target, eps)]
    except FragmentedCurve as err:
        curves = err.curves
    return [c for c in curves if len(c) >= min_points]


# ---------------------------------------------------------------- linking


def _solid_angles(a0, a1, b0, b1) -> np.ndarray:
    """Signed solid angle of every segment pair, shape (len(a), len(b))."""
    p1 = a0[:, None, :]
    p2 = a1[:, None, :]
    p3 = b0[None, :, :]
    p4 = b1[None, :, :]
    r13, r14, r23, r24 = p3 - p1, p4 - p1, p3 - p2, p4 - p2

    def nrm(v):
        n = np.linalg.norm(v, axis=-1, keepdims=True)
        return np.divide(v, n, out=np.zeros_like(v), where=n > 0)

    n1 = nrm(np.cross(r13, r14))
    n2 = nrm(np.cross(r14, r24))
    n3 = nrm(np.cross(r24, r23))
    n4 = nrm(np.cross(r23, r13))

    def asin(x):
        return np.arcsin(np.clip(x, -1.0, 1.0))

    omega = (asin(np.sum(n1 * n2, -1)) + asin(np.sum(n2 * n3, -1))
             + asin(np.sum(n3 * n4, -1)) + asin(np.sum(n4 * n1, -1)))
    sign = np.sign(np.sum(np.cross(p4 - p3, p2 - p1) * r13, axis=-1))
    return omega * sign


def _segment_distance(a0, a1, b0, b1) -> float:
    """Minimum distance between two sets of segments (sampled, adequate for the disjointness guard)."""
    t = np.linspace(0.0, 1.0, 5)
    pa = (a0[:, None] + t[None, :, None] * (a1 - a0)[:, None]).reshape(-1, 3)
    pb = (b0[:, None] + t[None, :, None] * (b1 - b0)[:, None]).reshape(-1, 3)
    d, _ = cKDTree(pb).query(pa)
    return float(d.min())


def _as_closed(curve) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(curve, PreimageCurve):
        if not curve.closed:
            raise ValueError("linking number needs closed curves")
        p = curve.points
    else:
        p = np.asarray(curve, dtype=np.float64)
    return p, np.roll(p, -1, axis=0)


def linking_number(curve_a, curve_b, min_separation: float = MIN_CURVE_SEPARATION) -> tuple[float, int]:
    """Gauss linking number of two closed polylines, raw and rounded."""
    a0, a1 = _as_closed(curve_a)
    b0, b1 = _as_closed(curve_b)
    if _segment_distance(a0, a1, b0, b1) <= min_separation:
        raise CurvesIntersect("curves come closer than the minimum separation")
    lk = float(_solid_angles(a0, a1, b0, b1).sum() / (4.0 * np.pi))
    return lk, int(np.rint(lk))


def _bbox_overlaps(a: np.ndarray, b: np.ndarray) -> bool:
    return bool(np.all(a.min(0) <= b.max(0)) and np.all(b.min(0) <= a.max(0)))


def _canonical_shift(t: np.ndarray, w: np.ndarray) -> tuple:
    """Representative of the lattice shift ``t`` modulo the loop's winding vector ``w``."""
    if not w.any():
        return tuple(t)
    i = int(np.flatnonzero(w)[0])
    if w[i] < 0:
        w = -w
    m = int(np.floor(t[i] / w[i]))
    return tuple(t - m * w)


def crossing_number(closed, polyline) -> int:
    """Signed crossings of ``polyline`` through the cone spanning ``closed`` from its centroid.

    The cone is a (possibly singular) surface bounded by ``closed``, so for a
    closed ``polyline``, or an open one whose ends stay outside the cone's
    bounding box, the count equals the linking number. Signs follow the
    Gauss-integral convention of linking_number.
    """
    c = np.asarray(closed, dtype=np.float64)
    p = np.asarray(polyline, dtype=np.float64)
    apex = c.mean(axis=0)
    v1, v2 = c, np.roll(c, -1, axis=0)
    lo, hi = c.min(axis=0), c.max(axis=0)
    q0, q1 = p[:-1], p[1:]
    near = np.all((np.maximum(q0, q1) >= lo) & (np.minimum(q0, q1) <= hi), axis=1)
    q0, q1 = q0[near], q1[near]
    if len(q0) == 0:
        return 0
    # Moller-Trumbore for every (segment, triangle) pair
    e1 = (v1 - apex)[None]
    e2 = (v2 - apex)[None]
    d = (q1 - q0)[:, None]
    pv = np.cross(d, e2)
    det = np.sum(e1 * pv, axis=-1)
    ok = np.abs(det) > 1e-15
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tv = q0[:, None] - apex
    u = np.sum(tv * pv, axis=-1) * inv
    qv = np.cross(tv, e1)
    v = np.sum(d * qv, axis=-1) * inv
    t = np.sum(e2 * qv, axis=-1) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t >= 0) & (t < 1)
    return int(-np.sum(np.sign(det[hit])))


def _periodic_crossings(closed: np.ndarray, lift: np.ndarray, step: np.ndarray) -> int:
    """Crossings of an infinite periodic curve (one period ``lift``, shift ``step``) through a closed loop's cone."""
    axis = step / np.linalg.norm(step)
    proj_c = closed @ axis
    per = float(np.linalg.norm(step))
    lo = int(np.floor((proj_c.min() - (lift @ axis).max()) / per)) - 1
    hi = int(np.ceil((proj_c.max() - (lift @ axis).min()) / per)) + 1
    chain = np.concatenate([lift + m * step for m in range(lo, hi + 1)])
    return crossing_number(closed, chain)


def torus_linking_number(curves_a, curves_b, period: float = TWO_PI) -> tuple[float, int]:
    """Linking number of two loop families on the 3-torus.

    Each family is a list of lifted loops (``winding`` records how far a
    loop's lift is displaced after one turn). The result is the sum of R^3
    linking numbers between the loops of one family whose lifts close and
    every distinct lattice translate of the other family's lifts, counted as
    signed crossings through a spanning cone. Loops that
    wind around the torus are treated as infinite periodic curves. At least
    one family must consist of contractible loops, and each family's total
    winding must vanish for the linking number to be defined.
    """
    curves_a = [curves_a] if isinstance(curves_a, PreimageCurve) else list(curves_a)
    curves_b = [curves_b] if isinstance(curves_b, PreimageCurve) else list(curves_b)
    for fam in (curves_a, curves_b):
        if not all(c.closed for c in fam):
            raise ValueError("torus linking needs closed loops")
        total = np.sum([c.winding for c in fam], axis=0)
        if np.any(total != 0):
            raise ValueError(f"loop family winds around the torus {tuple(int(v) for v in total)}; linking is undefined")
    if any(any(c.winding) for c in curves_b):
        if any(any(c.winding) for c in curves_a):
            raise ValueError("both loop families contain non-contractible loops")
        curves_a, curves_b = curves_b, curves_a
    lk = 0.0
    for cb in curves_b:
        bp = cb.points
        for ca in curves_a:
            w = np.array(ca.winding)
            span = int(np.ceil(max(np.ptp(ca.points, 0).max(), np.ptp(bp, 0).max()) / period)) + 1
            seen = set()
            for t in itertools.product(range(-span, span + 1), repeat=3):
                key = _canonical_shift(np.array(t), w)
                if key in seen:
                    continue
                seen.add(key)
                moved = ca.points + period * np.array(key)
                if not any(w):
                    lk += crossing_number(bp, np.vstack([moved, moved[:1]]))
                else:
                    lk += _periodic_crossings(bp, moved, -period * w)
    return float(lk), int(lk)


_KUHN = np.array([[(0, 0, 0), a, tuple(np.add(a, b)), (1, 1, 1)]
                  for a, b in [((1, 0, 0), (0, 1, 0)), ((1, 0, 0), (0, 0, 1)), ((0, 1, 0), (1, 0, 0)),
                               ((0, 1, 0), (0, 0, 1)), ((0, 0, 1), (1, 0, 0)), ((0, 0, 1), (0, 1, 0))]])


def _transverse_basis(target: np.ndarray) -> np.ndarray:
    helper = np.eye(3)[int(np.argmin(np.abs(target)))]
    e1 = _unit(np.cross(target, helper))
    return np.stack([e1, np.cross(target, e1)])


def trace_preimage(h: float, target, resolution: int = DEFAULT_RESOLUTION, window: float = 0.8) -> list[PreimageCurve]:
    """Closed preimage loops of one orientation, traced through a tetrahedral mesh of the torus.

    Every grid cube is split into six tetrahedra. Inside each, the two
    components of S(k) transverse to ``target`` are interpolated linearly, so
    their common zero set is a straight segment joining two triangle faces.
    The mesh is offset by a fixed fraction of a cell. Face crossings (restricted to the hemisphere facing ``target``) are the
    curve points; tetrahedra supply the connections. Only cubes with a corner
    within ``window`` of the target are examined. Points are continuous lifts
    of the torus loops.
    """
    n = int(resolution)
    if n < 10:
        raise ValueError("resolution must be at least 10")
    tgt = _unit(target)
    basis = _transverse_basis(tgt)
    spacing = TWO_PI / n
    # a generic sub-cell shift keeps mesh edges off the model's mirror planes,
    # where the transverse components vanish identically
    shift = MESH_SHIFT * spacing
    s = ground_bloch(hamiltonian_coefficients(fine_grid(n) + shift, h))
    g = s @ basis.T
    along = s @ tgt
    near = np.flatnonzero(np.linalg.norm(s - tgt, axis=-1) <= window)
    if near.size == 0:
        raise EmptySet(f"no grid point within {window} of the target orientation")
    # cubes having a near vertex: corners are the near vertex minus any 0/1 offset
    ijk = np.stack(np.unravel_index(near, (n, n, n)), axis=-1)
    # one extra cube in every direction keeps loops from leaving the examined region
    offs = np.array(list(itertools.product((-1, 0, 1), repeat=3)))
    corners = np.unique(((ijk[:, None, :] - offs[None]) % n).reshape(-1, 3), axis=0)
    # tetrahedra: (cube, 6, 4 vertices, 3) integer lattice coordinates (unwrapped)
    verts = corners[:, None, None, :] + _KUHN[None]
    verts = verts.reshape(-1, 4, 3)
    vid = np.ravel_multi_index(tuple(np.moveaxis(verts % n, -1, 0)), (n, n, n))
    gt = g[vid]  # (T, 4, 2)
    # the four faces of each tetrahedron, each omitting one vertex
    faces = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])
    ga = gt[:, faces]  # (T, 4, 3, 2)
    # barycentric solve: l0*g0 + l1*g1 + l2*g2 = 0 with l0 + l1 + l2 = 1
    m = np.concatenate([np.swapaxes(ga, -1, -2), np.ones(ga.shape[:-2] + (1, 3))], axis=-2)
    det = np.linalg.det(m)
    ok = np.abs(det) > 1e-14
    rhs = np.zeros(m.shape[:-1])
    rhs[..., 2] = 1.0
    lam = np.zeros(m.shape[:-1])
    lam[ok] = np.linalg.solve(m[ok], rhs[ok][..., None])[..., 0]
    hit = ok & np.all(lam >= 0.0, axis=-1)
    facing = np.sum(lam * along[vid][:, faces], axis=-1) > 0.0
    hit &= facing
    counts = hit.sum(axis=1)
    # a generic linear zero line meets exactly two faces; drop degenerate tetrahedra
    use = counts == 2
    if not use.any():
        raise EmptySet("no preimage loop found at this resolution")
    tet_idx = np.flatnonzero(use)
    face_pos = np.argwhere(hit[use])  # rows (local tet, face), two per tet, ordered
    tets = tet_idx[face_pos[:, 0]]
    fverts = vid[tets][np.arange(len(tets))[:, None], faces[face_pos[:, 1]]]
    key = np.sort(fverts, axis=1)
    uniq, node = np.unique(key, axis=0, return_inverse=True)
    node = node.reshape(-1)
    lam_used = lam[tets, face_pos[:, 1]]
    xyz = verts[tets][np.arange(len(tets))[:, None], faces[face_pos[:, 1]]]
    point = _mod(np.einsum("ij,ijk->ik", lam_used, xyz.astype(np.float64)) * spacing + shift, TWO_PI)
    pos = np.zeros((len(uniq), 3))
    pos[node] = point
    edges = node.reshape(-1, 2)
    # orient each segment along grad(g1) x grad(g2): linear g in the tet gives exact gradients
    tv = verts[tet_idx].astype(np.float64) * spacing
    dv = tv[:, 1:] - tv[:, :1]
    dg = gt[tet_idx, 1:] - gt[tet_idx, :1]
    grad = np.linalg.solve(dv, dg)  # (T, 3, 2): columns are grad g1, grad g2
    tangent = np.cross(grad[..., 0], grad[..., 1])
    seg = _wrap(pos[edges[:, 1]] - pos[edges[:, 0]], TWO_PI)
    flip = np.sum(seg * tangent, axis=-1) < 0
    edges = np.where(flip[:, None], edges[:, ::-1], edges)
    succ = {int(a): int(b) for a, b in edges if a != b}
    seen = np.zeros(len(uniq), dtype=bool)
    curves = []
    pred = {b: a for a, b in succ.items()}
    for start in range(len(uniq)):
        if seen[start] or (start not in succ and start not in pred):
            continue
        # walk back to the beginning of an open chain, then forward along the orientation
        head = start
        while head in pred and pred[head] != start and not seen[pred[head]]:
            head = pred[head]
            if head == start:
                break
        order = [head]
        seen[head] = True
        cur = head
        while cur in succ and not seen[succ[cur]]:
            cur = succ[cur]
            seen[cur] = True
            order.append(cur)
        closed = succ.get(cur) == head and len(order) > 2
        path = pos[order]
        lifted = np.vstack([path[:1], path[0] + np.cumsum(_wrap(np.diff(path, axis=0), TWO_PI), axis=0)])
        winding = (0, 0, 0)
        if closed:
            gap = lifted[0] - lifted[-1]
            winding = tuple(int(v) for v in np.rint((gap - _wrap(gap, TWO_PI)) / TWO_PI))
        curves.append(PreimageCurve(lifted, closed, tgt, None, None, winding))
    return curves


def stereographic_curves(curves, h: float) -> list[PreimageCurve]:
    """Send torus loops through the 3-sphere to R^3 (same point order)."""
    return [PreimageCurve(stereographic_map(c.points, h), c.closed, c.target, c.eps, c.threshold) for c in curves]


def preimage_linking(h: float, target_a, target_b, resolution: int = 80, space: str = "torus") -> tuple[float, int]:
    """Linking number of the preimage loops of two orientations.

    ``space="torus"`` links the loop families in momentum space; this is the
    quantity equal to the Hopf index. ``space="stereo"`` links their images in
    R^3 under the 3-sphere projection.
    """
    a = trace_preimage(h, target_a, resolution)
    b = trace_preimage(h, target_b, resolution)
    if space == "torus":
        return torus_linking_number(a, b)
    if space == "stereo":
        sa, sb = stereographic_curves(a, h), stereographic_curves(b, h)
        lk = sum(linking_number(x, y)[0] for x in sa for y in sb)
        return lk, int(np.rint(lk))
    raise ValueError(f"unknown space {space!r}")


def hopf_link(samples: int = 200, radius: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Two circles forming the canonical Hopf link; the Gauss integral gives -1 for this orientation."""
    t = TWO_PI * np.arange(samples) / samples
    a = np.column_stack([radius * np.cos(t), radius * np.sin(t), np.zeros_like(t)])
    b = np.column_stack([radius + radius * np.cos(t), np.zeros_like(t), radius * np.sin(t)])
    return a, b


def texture_rows(field: BlochField) -> list[tuple]:
    """Flat (kz, kx, ky, sx, sy, sz) rows for CSV export."""
    rows = []
    for sl in texture_slices(field):
        for r in sl.rows:
            rows.append((sl.kz, *r))
    return rows


def curve_rows(curves) -> list[tuple]:
    """Flat (curve_id, order, x, y, z) rows for CSV export."""
    rows = []
    for cid, c in enumerate(curves):
        for i, p in enumerate(c.points):
            rows.append((cid, i, *p))
    return rows
