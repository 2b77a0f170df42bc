"""Unstructured triangle meshes for flow domains with a movable obstacle.

The fluid domain is the region between an outer boundary loop (tag OUTER,
held fixed) and an optional obstacle loop (tag OBSTACLE, moved by the
optimizer). Meshes are plain triangulations; quadratic midside nodes used by
the discretization are synthesized downstream from edge midpoints and are
never stored here.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import MeshError, ReversedTriangleError


class BoundaryTag(enum.IntEnum):
    OBSTACLE = 1
    OUTER = 2


_TAG_NAMES = {BoundaryTag.OBSTACLE: "OBSTACLE", BoundaryTag.OUTER: "OUTER"}
_NAME_TAGS = {v: k for k, v in _TAG_NAMES.items()}


class TriMesh:
    """Immutable triangulation of the fluid domain.

    nodes          : (n_v, 2) float64 vertex coordinates
    triangles      : (n_t, 3) int vertex indices, counterclockwise
    boundary_edges : (n_b, 2) int vertex pairs lying on the domain boundary
    boundary_tags  : (n_b,)  BoundaryTag value per boundary edge

    Construction reorders each triangle to positive signed area and validates
    connectivity; instances are treated as immutable afterwards (morphing
    returns a new mesh).
    """

    def __init__(self, nodes, triangles, boundary_edges, boundary_tags,
                 validate: bool = True):
        self.nodes = np.ascontiguousarray(nodes, dtype=np.float64)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        self.boundary_edges = np.ascontiguousarray(boundary_edges,
                                                   dtype=np.int64)
        self.boundary_tags = np.ascontiguousarray(boundary_tags,
                                                  dtype=np.int64)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 2:
            raise MeshError("nodes must be an (n, 2) array")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError("triangles must be an (n, 3) array")
        if self.boundary_edges.shape[0] != self.boundary_tags.shape[0]:
            raise MeshError("one tag per boundary edge required")
        self._orient()
        self._loops: list[tuple[BoundaryTag, np.ndarray]] | None = None
        if validate:
            self._validate()

    # -- derived quantities -------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def area(self) -> float:
        """Total fluid area (sum of triangle areas)."""
        return float(np.sum(self.signed_areas()))

    def boundary_loops(self) -> list[tuple[BoundaryTag, np.ndarray]]:
        """Closed boundary loops as (tag, node cycle) pairs.

        Each cycle lists the loop's nodes once, in walk order (the edge back
        to the first node is implied).
        """
        if self._loops is None:
            self._loops = self._walk_loops()
        return self._loops

    def nodes_of(self, tag: BoundaryTag) -> np.ndarray:
        """Sorted unique node indices on boundary edges carrying ``tag``."""
        sel = self.boundary_tags == int(tag)
        return np.unique(self.boundary_edges[sel])

    def obstacle_nodes(self) -> np.ndarray:
        return self.nodes_of(BoundaryTag.OBSTACLE)

    # -- internals ----------------------------------------------------------

    def _orient(self):
        a = self.signed_areas()
        scale = max(1.0, float(np.ptp(self.nodes)) ** 2)
        if np.any(np.abs(a) <= 1e-16 * scale):
            bad = int(np.argmin(np.abs(a)))
            raise MeshError(f"degenerate triangle {bad} (area {a[bad]:.3e})")
        flip = a < 0.0
        if np.any(flip):
            self.triangles = self.triangles.copy()
            self.triangles[flip, 1], self.triangles[flip, 2] = (
                self.triangles[flip, 2].copy(), self.triangles[flip, 1].copy())

    def _edge_counts(self):
        e = np.concatenate([self.triangles[:, [0, 1]],
                            self.triangles[:, [1, 2]],
                            self.triangles[:, [2, 0]]])
        e = np.sort(e, axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq, counts

    def _validate(self):
        n_v = self.n_nodes
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= n_v):
            raise MeshError("triangle vertex index out of range")
        if not np.all(np.isfinite(self.nodes)):
            raise MeshError("non-finite node coordinate")
        for t in np.unique(self.boundary_tags):
            if int(t) not in (int(BoundaryTag.OBSTACLE), int(BoundaryTag.OUTER)):
                raise MeshError(f"unknown boundary tag value {int(t)}")

        uniq, counts = self._edge_counts()
        if np.any(counts > 2):
            bad = uniq[np.argmax(counts)]
            raise MeshError(f"non-manifold edge {tuple(bad)} shared by "
                            f"{int(counts.max())} triangles")
        free = uniq[counts == 1]
        tagged = np.sort(self.boundary_edges, axis=1)
        if len(np.unique(tagged, axis=0)) != len(tagged):
            raise MeshError("duplicate tagged boundary edge")
        free_set = {tuple(e) for e in free}
        tagged_set = {tuple(e) for e in tagged}
        missing = free_set - tagged_set
        if missing:
            raise MeshError(f"boundary edge {sorted(missing)[0]} carries no tag")
        extra = tagged_set - free_set
        if extra:
            raise MeshError(f"tagged edge {sorted(extra)[0]} is not a "
                            "boundary edge of the triangulation")

        loops = self.boundary_loops()
        outer = [cyc for tag, cyc in loops if tag == BoundaryTag.OUTER]
        holes = [cyc for tag, cyc in loops if tag == BoundaryTag.OBSTACLE]
        if len(outer) != 1:
            raise MeshError(f"expected exactly one OUTER loop, found {len(outer)}")
        if len(holes) > 1:
            raise MeshError(f"expected at most one OBSTACLE loop, found {len(holes)}")
        if holes:
            poly = self.nodes[outer[0]]
            wn = winding_number(poly, self.nodes[holes[0]])
            if not np.all(wn != 0):
                raise MeshError("obstacle loop is not strictly inside the "
                                "outer loop")

    def _walk_loops(self):
        tagged = self.boundary_edges
        tags = self.boundary_tags
        adj: dict[int, list[int]] = {}
        for k, (a, b) in enumerate(tagged):
            adj.setdefault(int(a), []).append(k)
            adj.setdefault(int(b), []).append(k)
        for node, ks in adj.items():
            if len(ks) != 2:
                raise MeshError(f"boundary node {node} has {len(ks)} incident "
                                "boundary edges; loops must be closed")
        seen = np.zeros(len(tagged), dtype=bool)
        loops = []
        for k0 in range(len(tagged)):
            if seen[k0]:
                continue
            cycle = [int(tagged[k0, 0])]
            k, node = k0, int(tagged[k0, 0])
            loop_tags = set()
            while True:
                seen[k] = True
                loop_tags.add(int(tags[k]))
                a, b = int(tagged[k, 0]), int(tagged[k, 1])
                node = b if node == a else a
                if node == cycle[0]:
                    break
                cycle.append(node)
                nxt = [j for j in adj[node] if not seen[j]]
                if not nxt:
                    raise MeshError("open boundary loop")
                k = nxt[0]
            if len(loop_tags) != 1:
                raise MeshError("boundary loop carries more than one tag")
            loops.append((BoundaryTag(loop_tags.pop()), np.asarray(cycle)))
        return loops


@dataclass
class BoundaryNormalField:
    """Outward normals on one tagged boundary loop.

    Normals point out of the fluid region: into the obstacle on the OBSTACLE
    loop, away from the domain on the OUTER loop. Node normals are the
    edge-length weighted average of the two adjacent edge normals,
    renormalized to unit length.
    """

    tag: BoundaryTag
    node_ids: np.ndarray        # (n,) sorted node indices
    node_normals: np.ndarray    # (n, 2) unit vectors, aligned with node_ids
    edges: np.ndarray           # (m, 2) node pairs
    edge_normals: np.ndarray    # (m, 2) unit vectors, one per edge
    edge_lengths: np.ndarray    # (m,)

    def index_of(self, node: int) -> int:
        pos = int(np.searchsorted(self.node_ids, node))
        if pos >= len(self.node_ids) or self.node_ids[pos] != node:
            raise KeyError(f"node {node} is not on this boundary")
        return pos


def winding_number(polygon: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Winding number of a closed polygon (vertex list, no repeat) around
    each query point. Nonzero means inside."""
    poly = np.asarray(polygon, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    a = poly[None, :, :] - pts[:, None, :]
    b = np.roll(poly, -1, axis=0)[None, :, :] - pts[:, None, :]
    ang = np.arctan2(a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
                     a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1])
    wn = np.rint(ang.sum(axis=1) / (2.0 * np.pi)).astype(int)
    return wn if points.ndim > 1 else wn  # shape (k,)


def polygon_area(polygon: np.ndarray) -> float:
    """Signed area of a closed polygon given as a vertex cycle."""
    p = np.asarray(polygon, dtype=float)
    q = np.roll(p, -1, axis=0)
    return 0.5 * float(np.sum(p[:, 0] * q[:, 1] - p[:, 1] * q[:, 0]))


# -- file I/O ----------------------------------------------------------------

def save_mesh(mesh: TriMesh, path) -> None:
    """Write the native text format.

    NODES n, then one ``x y`` line per node; TRIANGLES m, then ``i j k``
    lines (0-based); BOUNDARY b, then ``i j TAG`` lines. Coordinates carry 17
    significant digits so a load/save round trip is bit exact.
    """
    lines = [f"NODES {mesh.n_nodes}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.nodes]
    lines.append(f"TRIANGLES {mesh.n_triangles}")
    lines += [f"{a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"BOUNDARY {len(mesh.boundary_edges)}")
    lines += [f"{a} {b} {_TAG_NAMES[BoundaryTag(t)]}"
              for (a, b), t in zip(mesh.boundary_edges, mesh.boundary_tags)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mesh(path, fmt: str | None = None) -> TriMesh:
    """Read a mesh file.

    ``fmt`` is "native" or "gmsh"; when omitted the format is detected from
    the content ($MeshFormat header means gmsh msh 2.2 ascii).
    """
    with open(path) as fh:
        text = fh.read()
    if fmt is None:
        fmt = "gmsh" if text.lstrip().startswith("$MeshFormat") else "native"
    if fmt == "gmsh":
        return _parse_gmsh(text)
    if fmt == "native":
        return _parse_native(text)
    raise MeshError(f"unknown mesh format {fmt!r}")


def _parse_native(text: str) -> TriMesh:
    tok = [ln.split() for ln in text.splitlines()
           if ln.strip() and not ln.lstrip().startswith("#")]
    pos = 0

    def expect_header(word):
        nonlocal pos
        if pos >= len(tok) or tok[pos][0] != word or len(tok[pos]) != 2:
            raise MeshError(f"expected '{word} <count>' at line {pos + 1}")
        n = int(tok[pos][1])
        pos += 1
        return n

    try:
        n = expect_header("NODES")
        nodes = np.array([[float(v) for v in tok[pos + i]] for i in range(n)])
        pos += n
        m = expect_header("TRIANGLES")
        tris = np.array([[int(v) for v in tok[pos + i]] for i in range(m)],
                        dtype=np.int64).reshape(m, 3)
        pos += m
        b = expect_header("BOUNDARY")
        be, bt = [], []
        for i in range(b):
            a, c, name = tok[pos + i]
            if name not in _NAME_TAGS:
                raise MeshError(f"unknown boundary tag {name!r}")
            be.append((int(a), int(c)))
            bt.append(int(_NAME_TAGS[name]))
        pos += b
    except (IndexError, ValueError) as exc:
        raise MeshError(f"malformed mesh file: {exc}") from exc
    if pos != len(tok):
        raise MeshError("trailing garbage after BOUNDARY block")
    return TriMesh(nodes, tris,
                   np.array(be, dtype=np.int64).reshape(b, 2),
                   np.array(bt, dtype=np.int64))


def _parse_gmsh(text: str) -> TriMesh:
    lines = text.splitlines()
    sections: dict[str, list[str]] = {}
    i = 0
    while i < len(lines):
        ln = lines[i].strip()
        if ln.startswith("$") and not ln.startswith("$End"):
            name = ln[1:]
            body = []
            i += 1
            while i < len(lines) and lines[i].strip() != f"$End{name}":
                body.append(lines[i].strip())
                i += 1
            if i >= len(lines):
                raise MeshError(f"unterminated gmsh section {name}")
            sections[name] = body
        i += 1
    try:
        ver = sections["MeshFormat"][0].split()[0]
    except (KeyError, IndexError) as exc:
        raise MeshError("missing $MeshFormat") from exc
    if not ver.startswith("2."):
        raise MeshError(f"only msh 2.x ascii is supported, got {ver}")

    phys_names = {}
    for ln in sections.get("PhysicalNames", [])[1:]:
        parts = ln.split(maxsplit=2)
        if len(parts) == 3:
            phys_names[int(parts[1])] = parts[2].strip().strip('"').upper()

    try:
        node_lines = sections["Nodes"]
        n = int(node_lines[0])
        ids = np.empty(n, dtype=np.int64)
        xy = np.empty((n, 2), dtype=float)
        for k in range(n):
            parts = node_lines[1 + k].split()
            ids[k] = int(parts[0])
            xy[k] = [float(parts[1]), float(parts[2])]
        id_map = {int(v): k for k, v in enumerate(ids)}

        tris, be, bt = [], [], []
        elem_lines = sections["Elements"]
        m = int(elem_lines[0])
        for k in range(m):
            parts = [int(v) for v in elem_lines[1 + k].split()]
            etype, ntags = parts[1], parts[2]
            tags = parts[3:3 + ntags]
            conn = parts[3 + ntags:]
            if etype == 2:
                tris.append([id_map[c] for c in conn])
            elif etype == 1:
                phys = tags[0] if tags else None
                name = phys_names.get(phys, "")
                tag = next((t for nm, t in _NAME_TAGS.items() if nm in name),
                           None)
                if tag is None:
                    raise MeshError(
                        f"gmsh line element {parts[0]} has no OBSTACLE/OUTER "
                        "physical name")
                be.append([id_map[c] for c in conn])
                bt.append(int(tag))
    except (KeyError, IndexError, ValueError) as exc:
        raise MeshError(f"malformed gmsh file: {exc}") from exc

    tris = np.asarray(tris, dtype=np.int64).reshape(len(tris), 3)
    used = np.zeros(n, dtype=bool)
    used[tris.ravel()] = True
    if be:
        used[np.asarray(be, dtype=np.int64).ravel()] = True
    renum = -np.ones(n, dtype=np.int64)
    renum[used] = np.arange(int(used.sum()))
    return TriMesh(xy[used], renum[tris],
                   renum[np.asarray(be, dtype=np.int64).reshape(len(be), 2)],
                   np.asarray(bt, dtype=np.int64))


# -- parametric boundary curves ----------------------------------------------

def circle_boundary(radius: float) -> Callable[[np.ndarray], np.ndarray]:
    def curve(t):
        t = np.asarray(t, dtype=float)
        return np.stack([radius * np.cos(t), radius * np.sin(t)], axis=-1)
    return curve


def ellipse_boundary(a: float, b: float) -> Callable[[np.ndarray], np.ndarray]:
    def curve(t):
        t = np.asarray(t, dtype=float)
        return np.stack([a * np.cos(t), b * np.sin(t)], axis=-1)
    return curve


def square_boundary(half_width: float) -> Callable[[np.ndarray], np.ndarray]:
    """Axis-aligned square of half side ``half_width``, parametrized by the
    ray angle from the origin (star-shaped parametrization)."""
    def curve(t):
        t = np.asarray(t, dtype=float)
        c, s = np.cos(t), np.sin(t)
        scale = half_width / np.maximum(np.abs(c), np.abs(s))
        return np.stack([scale * c, scale * s], axis=-1)
    return curve


# -- generators ----------------------------------------------------------------

def generate_annulus_mesh(outer_radius: float,
                          inner_boundary: Callable[[np.ndarray], np.ndarray],
                          target_edge_length: float) -> TriMesh:
    """Mesh the region between a star-shaped inner curve and an outer circle.

    Nodes are laid out on blended rings between the two curves with a half
    step angular offset per ring. The azimuthal count resolves the inner
    curve at the target edge length and the radial ring spacing is graded to
    keep triangles near isotropic as the rings widen. The inner curve must be
    star-shaped with respect to the origin and strictly inside the outer
    circle.
    """
    h = float(target_edge_length)
    if h <= 0:
        raise MeshError("target_edge_length must be positive")
    R = float(outer_radius)

    probe = np.linspace(0.0, 2.0 * np.pi, 720, endpoint=False)
    inner_pts = np.asarray(inner_boundary(probe), dtype=float)
    if inner_pts.shape != (len(probe), 2):
        raise MeshError("inner_boundary must map angles to (n, 2) points")
    radii = np.hypot(inner_pts[:, 0], inner_pts[:, 1])
    if np.max(radii) >= R - 1e-12:
        raise MeshError("inner boundary is not strictly inside the outer "
                        "circle")
    if np.min(radii) <= 0.0:
        raise MeshError("inner boundary must enclose the origin")

    seg = np.diff(inner_pts, axis=0, append=inner_pts[:1])
    per_inner = float(np.sum(np.hypot(seg[:, 0], seg[:, 1])))
    per_outer = 2.0 * np.pi * R
    n_theta = int(round(per_inner / h))
    if n_theta < 16:
        raise MeshError("target_edge_length too coarse: fewer than 16 nodes "
                        "on the obstacle loop")

    # Ring ladder in the blend parameter s: radial advance matches about
    # sqrt(3)/2 of the local tangential spacing, so strips stay isotropic.
    outer_pts = np.stack([R * np.cos(probe), R * np.sin(probe)], axis=-1)
    gap = float(np.mean(np.hypot(*(outer_pts - inner_pts).T)))
    ladder = [0.0]
    while ladder[-1] < 1.0:
        per_s = (1.0 - ladder[-1]) * per_inner + ladder[-1] * per_outer
        ladder.append(ladder[-1] + (math.sqrt(3.0) / 2.0)
                      * (per_s / n_theta) / gap)
    n_rings = max(2, len(ladder) - 1)
    ladder = np.asarray(ladder[:n_rings + 1]) / ladder[min(n_rings,
                                                           len(ladder) - 1)]

    nodes = np.empty(((n_rings + 1) * n_theta, 2))
    for j in range(n_rings + 1):
        s = float(ladder[j])
        t = (np.arange(n_theta) + 0.5 * j) * (2.0 * np.pi / n_theta)
        ring = (1.0 - s) * np.asarray(inner_boundary(t), dtype=float)
        ring += s * np.stack([R * np.cos(t), R * np.sin(t)], axis=-1)
        nodes[j * n_theta:(j + 1) * n_theta] = ring

    tris = []
    for j in range(n_rings):
        a0, b0 = j * n_theta, (j + 1) * n_theta
        for i in range(n_theta):
            ip = (i + 1) % n_theta
            tris.append((a0 + i, a0 + ip, b0 + i))
            tris.append((a0 + ip, b0 + ip, b0 + i))

    be, bt = [], []
    for i in range(n_theta):
        ip = (i + 1) % n_theta
        be.append((i, ip))
        bt.append(int(BoundaryTag.OBSTACLE))
    o0 = n_rings * n_theta
    for i in range(n_theta):
        ip = (i + 1) % n_theta
        be.append((o0 + i, o0 + ip))
        bt.append(int(BoundaryTag.OUTER))

    return TriMesh(nodes, np.asarray(tris, dtype=np.int64),
                   np.asarray(be, dtype=np.int64),
                   np.asarray(bt, dtype=np.int64))


def estimate_node_count(outer_radius: float,
                        inner_boundary: Callable[[np.ndarray], np.ndarray],
                        target_edge_length: float) -> float:
    """Perimeter-and-area scaling estimate of the generated node count:
    inner-perimeter nodes per ring times one ring per mean tangential
    spacing across the gap."""
    probe = np.linspace(0.0, 2.0 * np.pi, 720, endpoint=False)
    inner_pts = np.asarray(inner_boundary(probe), dtype=float)
    seg = np.diff(inner_pts, axis=0, append=inner_pts[:1])
    per_inner = float(np.sum(np.hypot(seg[:, 0], seg[:, 1])))
    per_outer = 2.0 * np.pi * outer_radius
    n_theta = per_inner / target_edge_length
    outer_pts = np.stack([outer_radius * np.cos(probe),
                          outer_radius * np.sin(probe)], axis=-1)
    gap = float(np.mean(np.hypot(*(outer_pts - inner_pts).T)))
    mean_tangential = 0.5 * (per_inner + per_outer) / n_theta
    rings = 1.0 + gap / (math.sqrt(3.0) / 2.0 * mean_tangential)
    return n_theta * rings


def generate_square_mesh(n: int, lo=(0.0, 0.0), hi=(1.0, 1.0)) -> TriMesh:
    """Structured n-by-n triangulation of a rectangle; single OUTER loop."""
    if n < 1:
        raise MeshError("n must be >= 1")
    xs = np.linspace(lo[0], hi[0], n + 1)
    ys = np.linspace(lo[1], hi[1], n + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.stack([X.ravel(), Y.ravel()], axis=-1)

    def nid(i, j):
        return j * (n + 1) + i

    tris = []
    for j in range(n):
        for i in range(n):
            a, b = nid(i, j), nid(i + 1, j)
            c, d = nid(i + 1, j + 1), nid(i, j + 1)
            if (i + j) % 2 == 0:
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]

    be = []
    for i in range(n):
        be.append((nid(i, 0), nid(i + 1, 0)))
        be.append((nid(i + 1, n), nid(i, n)))
    for j in range(n):
        be.append((nid(n, j), nid(n, j + 1)))
        be.append((nid(0, j + 1), nid(0, j)))
    bt = [int(BoundaryTag.OUTER)] * len(be)
    return TriMesh(nodes, np.asarray(tris, dtype=np.int64),
                   np.asarray(be, dtype=np.int64),
                   np.asarray(bt, dtype=np.int64))


# -- normals, morphing, quality ------------------------------------------------

def compute_normals(mesh: TriMesh,
                    tag: BoundaryTag = BoundaryTag.OBSTACLE) -> BoundaryNormalField:
    """Outward (out of the fluid) unit normals on one tagged loop."""
    sel = mesh.boundary_tags == int(tag)
    edges = mesh.boundary_edges[sel]
    if len(edges) == 0:
        raise MeshError(f"mesh has no boundary edges tagged {tag.name}")

    edge_tri = {}
    for t, tri in enumerate(mesh.triangles):
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            edge_tri.setdefault(key, []).append(t)

    p0 = mesh.nodes[edges[:, 0]]
    p1 = mesh.nodes[edges[:, 1]]
    tang = p1 - p0
    lengths = np.hypot(tang[:, 0], tang[:, 1])
    normals = np.stack([tang[:, 1], -tang[:, 0]], axis=-1) / lengths[:, None]
    mids = 0.5 * (p0 + p1)
    for k, (a, b) in enumerate(edges):
        owners = edge_tri[(min(a, b), max(a, b))]
        if len(owners) != 1:
            raise MeshError(f"tagged edge ({a}, {b}) is not a boundary edge")
        cen = mesh.nodes[mesh.triangles[owners[0]]].mean(axis=0)
        if np.dot(normals[k], cen - mids[k]) > 0.0:
            normals[k] = -normals[k]

    node_ids = np.unique(edges)
    acc = np.zeros((len(node_ids), 2))
    for k, (a, b) in enumerate(edges):
        for node in (a, b):
            pos = np.searchsorted(node_ids, node)
            acc[pos] += lengths[k] * normals[k]
    norm = np.hypot(acc[:, 0], acc[:, 1])
    if np.any(norm <= 0.0):
        raise MeshError("degenerate node normal (opposing adjacent edges)")
    return BoundaryNormalField(tag=BoundaryTag(tag), node_ids=node_ids,
                               node_normals=acc / norm[:, None],
                               edges=edges, edge_normals=normals,
                               edge_lengths=lengths)


def morph(mesh: TriMesh, vertex_displacement: np.ndarray,
          scale: float) -> TriMesh:
    """New mesh with every vertex x replaced by x - scale * d(x).

    Connectivity and tags are untouched. Raises ReversedTriangleError if any
    triangle's signed area becomes non-positive, and MeshError if the outer
    boundary would move by more than 1e-12.
    """
    disp = np.asarray(vertex_displacement, dtype=float)
    if disp.shape != mesh.nodes.shape:
        raise MeshError("vertex_displacement must be shaped like mesh.nodes")
    outer = mesh.nodes_of(BoundaryTag.OUTER)
    if len(outer) and np.max(np.abs(scale * disp[outer])) > 1e-12:
        raise MeshError("morph would move the outer boundary")

    new_nodes = mesh.nodes - scale * disp
    out = TriMesh.__new__(TriMesh)
    out.nodes = np.ascontiguousarray(new_nodes)
    out.triangles = mesh.triangles
    out.boundary_edges = mesh.boundary_edges
    out.boundary_tags = mesh.boundary_tags
    out._loops = mesh._loops
    areas = out.signed_areas()
    worst = int(np.argmin(areas))
    if areas[worst] <= 0.0:
        raise ReversedTriangleError(worst, float(areas[worst]))
    return out


def warp_to_circle(mesh: TriMesh, radius: float) -> TriMesh:
    """Slide every node along its ray so the obstacle loop lands on the
    circle of the given radius while the outer loop stays fixed.

    Connectivity is untouched, so the result discretizes the new domain
    with exactly the texture of the input mesh. The obstacle loop must
    be star shaped around the origin. Obstacle nodes land on the circle
    and outer nodes keep their radius to within roundoff.
    """
    pts = mesh.nodes
    r = np.hypot(pts[:, 0], pts[:, 1])
    theta = np.arctan2(pts[:, 1], pts[:, 0])
    loop = mesh.obstacle_nodes()
    if not len(loop):
        raise MeshError("warp_to_circle needs an obstacle loop")
    order = np.argsort(theta[loop])
    th_loop, r_loop = theta[loop][order], r[loop][order]
    if np.any(np.diff(th_loop) <= 0.0):
        raise MeshError("obstacle loop is not star shaped around the origin")
    rho = np.interp(theta, th_loop, r_loop, period=2.0 * np.pi)
    r_out = r.max()
    if not 0.0 < radius < r_out:
        raise MeshError(f"target radius {radius} must sit inside the domain")
    if np.any(rho >= r_out):
        raise MeshError("obstacle loop reaches the outer boundary")
    r_new = radius + (r - rho) * (r_out - radius) / (r_out - rho)
    warped = np.column_stack([r_new * np.cos(theta), r_new * np.sin(theta)])
    out = TriMesh(warped, mesh.triangles.copy(), mesh.boundary_edges.copy(),
                  mesh.boundary_tags.copy())
    areas = out.signed_areas()
    worst = int(np.argmin(areas))
    if areas[worst] <= 0.0:
        raise ReversedTriangleError(worst, float(areas[worst]))
    return out


def min_quality(mesh: TriMesh) -> float:
    """min over triangles of 2 * inradius / circumradius; equilateral -> 1."""
    p = mesh.nodes[mesh.triangles]
    a = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    b = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
    c = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
    s = 0.5 * (a + b + c)
    area = np.abs(mesh.signed_areas())
    inradius = area / s
    circumradius = a * b * c / (4.0 * area)
    return float(np.min(2.0 * inradius / circumradius))
