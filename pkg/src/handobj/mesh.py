"""Triangle meshes, sphere templates, graph structure, and surface energies.

Vertices are float64 (N, 3) arrays; faces are int64 (M, 3) index triples
with counter-clockwise winding facing outward for the closed shapes built
here. The differentiable energies operate on a ``DiffArray`` of vertices
with the topology frozen, which is exactly the setting of template
deformation: the face list never changes, only positions do.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import tensor as T
from .errors import ContractViolation, ParseError

_DEGENERATE_AREA_SQ = 1e-24


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    name: str | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    def validate(self):
        n = len(self.vertices)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ContractViolation(f"face index out of range [0, {n})")
        f = self.faces
        if ((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])).any():
            raise ContractViolation("degenerate face: repeated vertex index")
        return self

    def copy(self):
        return TriangleMesh(self.vertices.copy(), self.faces.copy(), self.name)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self):
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def centroid(self):
        return self.vertices.mean(axis=0)

    def translated(self, offset):
        return TriangleMesh(self.vertices + np.asarray(offset), self.faces.copy(), self.name)

    def transformed(self, rotation=None, translation=None, scale=1.0):
        v = self.vertices * scale
        if rotation is not None:
            v = v @ np.asarray(rotation).T
        if translation is not None:
            v = v + np.asarray(translation)
        return TriangleMesh(v, self.faces.copy(), self.name)


# --------------------------------------------------------------------------
# OBJ I/O (triangles only).


def save_obj(path, mesh):
    with open(path, "w") as fh:
        if mesh.name:
            fh.write(f"o {mesh.name}\n")
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.6f} {y:.6f} {z:.6f}\n")
        for a, b, c in mesh.faces + 1:
            fh.write(f"f {a} {b} {c}\n")


def load_obj(path):
    vertices = []
    faces = []
    name = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                try:
                    vertices.append([float(t) for t in parts[1:4]])
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: bad vertex line", line=lineno)
                if len(parts) < 4:
                    raise ParseError(f"{path}:{lineno}: vertex needs 3 coordinates", line=lineno)
            elif tag == "f":
                idx = parts[1:]
                if len(idx) != 3:
                    raise ParseError(
                        f"{path}:{lineno}: only triangular faces are supported "
                        f"(got {len(idx)} vertices)",
                        line=lineno,
                    )
                try:
                    faces.append([int(t.split("/")[0]) - 1 for t in idx])
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: bad face line", line=lineno)
            elif tag == "o" and len(parts) > 1:
                name = parts[1]
    mesh = TriangleMesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3), name)
    return mesh.validate()


# --------------------------------------------------------------------------
# Icosphere construction.

_ICO_T = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        [-1, _ICO_T, 0], [1, _ICO_T, 0], [-1, -_ICO_T, 0], [1, -_ICO_T, 0],
        [0, -1, _ICO_T], [0, 1, _ICO_T], [0, -1, -_ICO_T], [0, 1, -_ICO_T],
        [_ICO_T, 0, -1], [_ICO_T, 0, 1], [-_ICO_T, 0, -1], [-_ICO_T, 0, 1],
    ],
    dtype=np.float64,
)
_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)


def icosphere(subdivisions):
    """Unit sphere from repeated 4-way subdivision of a regular icosahedron.

    Each level splits every face into four, midpoints projected back onto
    the sphere, giving 20 * 4**s faces and 2 + 10 * 4**s vertices.
    """
    if subdivisions < 0:
        raise ContractViolation("subdivisions must be >= 0")
    verts = [v / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = _ICO_FACES.tolist()
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            got = cache.get(key)
            if got is None:
                m = verts[i] + verts[j]
                m /= np.linalg.norm(m)
                verts.append(m)
                got = len(verts) - 1
                cache[key] = got
            return got

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    return TriangleMesh(np.array(verts), np.array(faces), name=f"icosphere{subdivisions}").validate()


# --------------------------------------------------------------------------
# Graph adjacency and Chebyshev basis.


@dataclass
class GraphAdjacency:
    """Normalized adjacency with self-loops, derived from mesh faces."""

    n: int
    matrix: sp.csr_matrix
    note: str = ""
    _laplacian: sp.csr_matrix | None = field(default=None, repr=False)

    def dense(self):
        return self.matrix.toarray()

    def scaled_laplacian(self):
        """I - A_norm, the operator driving the Chebyshev recurrence."""
        if self._laplacian is None:
            self._laplacian = (sp.identity(self.n, format="csr") - self.matrix).tocsr()
        return self._laplacian


def adjacency_from_faces(mesh, normalization="symmetric"):
    n = mesh.n_vertices
    f = mesh.faces
    rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2], f[:, 1], f[:, 2], f[:, 0]])
    cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0], f[:, 0], f[:, 1], f[:, 2]])
    a = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    a.data[:] = 1.0  # collapse duplicate edge entries
    a = a + sp.identity(n, format="csr")
    deg = np.asarray(a.sum(axis=1)).reshape(-1)
    if normalization == "symmetric":
        d = sp.diags(1.0 / np.sqrt(deg))
        norm = (d @ a @ d).tocsr()
        note = "D^-1/2 (A+I) D^-1/2 from shared face edges"
    elif normalization == "row":
        norm = (sp.diags(1.0 / deg) @ a).tocsr()
        note = "D^-1 (A+I) from shared face edges"
    else:
        raise ContractViolation(f"unknown normalization {normalization!r}")
    return GraphAdjacency(n=n, matrix=norm, note=note)


def chebyshev_basis(adjacency, features, order):
    """T_0 = X, T_1 = L X, T_k = 2 L T_(k-1) - T_(k-2) with L = I - A_norm."""
    if order < 1:
        raise ContractViolation("chebyshev order must be >= 1")
    x = T.as_diff(features)
    if x.values.shape[0] != adjacency.n:
        raise ContractViolation(
            f"feature rows {x.values.shape[0]} do not match graph size {adjacency.n}"
        )
    lap = adjacency.scaled_laplacian()
    basis = [x]
    if order > 1:
        basis.append(T.sparse_matmul(lap, x, lap))
    for _ in range(2, order):
        nxt = T.sub(T.mul(T.sparse_matmul(lap, basis[-1], lap), 2.0), basis[-2])
        basis.append(nxt)
    return basis


# --------------------------------------------------------------------------
# Surface sampling.


@dataclass
class SurfaceSamples:
    points: np.ndarray
    face_index: np.ndarray
    barycentric: np.ndarray

    def __len__(self):
        return len(self.points)


def face_areas(vertices, faces):
    v = np.asarray(vertices)
    e1 = v[faces[:, 1]] - v[faces[:, 0]]
    e2 = v[faces[:, 2]] - v[faces[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


def sample_surface(mesh, count, rng=0):
    """Area-uniform surface samples; reproducible for a given seed."""
    if count < 1:
        raise ContractViolation("sample count must be >= 1")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    areas = face_areas(mesh.vertices, mesh.faces)
    total = areas.sum()
    if total <= 0:
        raise ContractViolation("cannot sample a zero-area mesh")
    fidx = rng.choice(len(areas), size=count, p=areas / total)
    u = rng.random(count)
    v = rng.random(count)
    flip = u + v > 1
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    bary = np.stack([1.0 - u - v, u, v], axis=1)
    tri = mesh.vertices[mesh.faces[fidx]]
    points = np.einsum("kij,ki->kj", tri, bary)
    return SurfaceSamples(points=points, face_index=fidx, barycentric=bary)


def sample_points(vertices, faces, samples):
    """Evaluate sample positions differentiably from a vertex DiffArray."""
    verts = T.as_diff(vertices)
    f = faces[samples.face_index]
    b = samples.barycentric
    parts = []
    for corner in range(3):
        picked = T.take_rows(verts, f[:, corner])
        parts.append(T.scale_rows(picked, T.constant(b[:, corner])))
    return T.add(T.add(parts[0], parts[1]), parts[2])


# --------------------------------------------------------------------------
# Energies. ``chamfer`` takes point sets; the others take vertex positions
# for a fixed topology prepared once via MeshEnergies.


def chamfer(p, q):
    """Symmetric mean of squared nearest-neighbor distances.

    Mean is over the union of both point sets, so two singletons at
    distance d give d**2. Differentiable in both operands; the pairing is
    held fixed at the current positions.
    """
    pd, qd = T.as_diff(p), T.as_diff(q)
    pv, qv = pd.values, qd.values
    if len(pv) == 0 or len(qv) == 0:
        raise ContractViolation("chamfer requires nonempty point sets")
    ip = cKDTree(qv).query(pv)[1]
    iq = cKDTree(pv).query(qv)[1]
    dp = T.sub(pd, T.take_rows(qd, ip))
    dq = T.sub(qd, T.take_rows(pd, iq))
    total = T.add(T.sum_all(T.mul(dp, dp)), T.sum_all(T.mul(dq, dq)))
    return T.mul(total, 1.0 / (len(pv) + len(qv)))


class MeshEnergies:
    """Per-topology operators for the deformation regularizers.

    Building the sparse Laplacian, the unique edge list, and the adjacent
    face pairs once makes per-iteration energy evaluation cheap during
    registration.
    """

    def __init__(self, faces, n_vertices):
        self.faces = np.asarray(faces, dtype=np.int64)
        self.n_vertices = n_vertices
        f = self.faces
        edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        self.edges = np.unique(edges, axis=0)

        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        a = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_vertices, n_vertices)).tocsr()
        a.data[:] = 1.0
        deg = np.asarray(a.sum(axis=1)).reshape(-1)
        inv_deg = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        # Isolated vertices get a zero row: they contribute nothing.
        lap = sp.identity(n_vertices, format="csr") - sp.diags(inv_deg) @ a
        isolated = deg == 0
        if isolated.any():
            mask = sp.diags((~isolated).astype(np.float64))
            lap = (mask @ lap).tocsr()
        self.lap = lap.tocsr()
        self.lap_t = self.lap.T.tocsr()

        # Face pairs sharing an edge, for normal consistency.
        edge_to_faces = {}
        for fi, (a_, b_, c_) in enumerate(f):
            for e in ((a_, b_), (b_, c_), (c_, a_)):
                key = (e[0], e[1]) if e[0] < e[1] else (e[1], e[0])
                edge_to_faces.setdefault(key, []).append(fi)
        pairs = [tuple(v[:2]) for v in edge_to_faces.values() if len(v) >= 2]
        self.face_pairs = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)

    def laplacian(self, vertices):
        """Mean squared offset of each vertex from its neighbor centroid."""
        v = T.as_diff(vertices)
        y = T.sparse_matmul(self.lap, v, self.lap_t)
        return T.mul(T.sum_all(T.mul(y, y)), 1.0 / self.n_vertices)

    def edge_length(self, vertices):
        """Mean squared length over unique edges."""
        v = T.as_diff(vertices)
        d = T.sub(T.take_rows(v, self.edges[:, 0]), T.take_rows(v, self.edges[:, 1]))
        return T.mul(T.sum_all(T.mul(d, d)), 1.0 / max(len(self.edges), 1))

    def face_normals(self, vertices, unit=True):
        v = T.as_diff(vertices)
        v0 = T.take_rows(v, self.faces[:, 0])
        e1 = T.sub(T.take_rows(v, self.faces[:, 1]), v0)
        e2 = T.sub(T.take_rows(v, self.faces[:, 2]), v0)
        n = T.cross_rows(e1, e2)
        if not unit:
            return n
        nn = T.sum_last(T.mul(n, n))
        return n, nn

    def normal_consistency(self, vertices):
        """Mean of (1 - cos angle) over adjacent face pairs."""
        if len(self.face_pairs) == 0:
            return T.constant(0.0)
        n, nn = self.face_normals(vertices)
        degenerate = nn.values < _DEGENERATE_AREA_SQ
        pairs = self.face_pairs
        if degenerate.any():
            warnings.warn("normal_consistency: excluding zero-area faces")
            keep = ~(degenerate[pairs[:, 0]] | degenerate[pairs[:, 1]])
            pairs = pairs[keep]
            if len(pairs) == 0:
                return T.constant(0.0)
        unit = T.scale_rows(n, T.rsqrt(nn, eps=_DEGENERATE_AREA_SQ))
        n1 = T.take_rows(unit, pairs[:, 0])
        n2 = T.take_rows(unit, pairs[:, 1])
        cos_sum = T.sum_all(T.sum_last(T.mul(n1, n2)))
        return T.sub(1.0, T.mul(cos_sum, 1.0 / len(pairs)))


def laplacian_smoothness(mesh):
    return MeshEnergies(mesh.faces, mesh.n_vertices).laplacian(mesh.vertices).item()


def normal_consistency(mesh):
    return MeshEnergies(mesh.faces, mesh.n_vertices).normal_consistency(mesh.vertices).item()


def edge_length_energy(mesh):
    return MeshEnergies(mesh.faces, mesh.n_vertices).edge_length(mesh.vertices).item()


def normalize_into_unit_sphere(mesh, margin=0.95):
    """Center the mesh and scale the farthest vertex to ``margin``.

    Returns (normalized mesh, c, t) with original == c * normalized + t.
    The margin keeps targets strictly inside the unit sphere so outward
    template displacements stay available during fitting.
    """
    t = mesh.centroid()
    centered = mesh.vertices - t
    r = np.linalg.norm(centered, axis=1).max()
    if r <= 0:
        raise ContractViolation("cannot normalize a single-point mesh")
    c = r / margin
    out = TriangleMesh(centered / c, mesh.faces.copy(), mesh.name)
    return out, float(c), t


# --------------------------------------------------------------------------
# Closed primitive shapes used as registration targets and scene objects.


def make_box(ex=1.0, ey=1.0, ez=1.0, name="box"):
    """Axis-aligned box with half-extents (ex, ey, ez), outward winding."""
    s = np.array([ex, ey, ez])
    corners = np.array(
        [[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64
    ) * s
    faces = np.array(
        [
            [0, 1, 3], [0, 3, 2],  # -x
            [4, 6, 7], [4, 7, 5],  # +x
            [0, 4, 5], [0, 5, 1],  # -y
            [2, 3, 7], [2, 7, 6],  # +y
            [0, 2, 6], [0, 6, 4],  # -z
            [1, 5, 7], [1, 7, 3],  # +z
        ],
        dtype=np.int64,
    )
    return TriangleMesh(corners, faces, name).validate()


def make_ellipsoid(rx=1.0, ry=1.0, rz=1.0, subdivisions=3, name="ellipsoid"):
    sphere = icosphere(subdivisions)
    return TriangleMesh(sphere.vertices * np.array([rx, ry, rz]), sphere.faces, name)


def make_tube(ring_z, ring_r, segments, name="tube"):
    """Closed surface of revolution: stacked rings plus two pole caps."""
    ring_z = np.asarray(ring_z, dtype=np.float64)
    ring_r = np.asarray(ring_r, dtype=np.float64)
    ang = 2 * np.pi * np.arange(segments) / segments
    circle = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    verts = [np.array([0.0, 0.0, ring_z[0]])]  # bottom pole
    for z, r in zip(ring_z, ring_r):
        for cx, cy in circle:
            verts.append(np.array([r * cx, r * cy, z]))
    verts.append(np.array([0.0, 0.0, ring_z[-1]]))  # top pole
    verts = np.array(verts)
    faces = []
    n_rings = len(ring_z)

    def rv(ring, seg):
        return 1 + ring * segments + (seg % segments)

    for s in range(segments):
        faces.append([0, rv(0, s + 1), rv(0, s)])
    for ring in range(n_rings - 1):
        for s in range(segments):
            a, b = rv(ring, s), rv(ring, s + 1)
            c, d = rv(ring + 1, s), rv(ring + 1, s + 1)
            faces.append([a, b, d])
            faces.append([a, d, c])
    top_idx = len(verts) - 1
    for s in range(segments):
        faces.append([top_idx, rv(n_rings - 1, s), rv(n_rings - 1, s + 1)])
    return TriangleMesh(verts, np.array(faces, dtype=np.int64), name).validate()


def make_cylinder(radius=1.0, height=2.0, segments=32, name="cylinder"):
    h = height / 2.0
    return make_tube([-h, h], [radius, radius], segments, name=name)


def make_capsule(radius=1.0, cyl_height=1.0, segments=24, cap_rings=6, name="capsule"):
    h = cyl_height / 2.0
    lats = np.linspace(-np.pi / 2, 0, cap_rings + 1)[1:]
    ring_z = []
    ring_r = []
    for lat in lats:  # bottom hemisphere
        ring_z.append(-h + radius * np.sin(lat))
        ring_r.append(radius * np.cos(lat))
    for lat in -lats[::-1]:  # top hemisphere
        ring_z.append(h + radius * np.sin(lat))
        ring_r.append(radius * np.cos(lat))
    mesh = make_tube(np.array(ring_z), np.array(ring_r), segments, name=name)
    # shift poles to the capsule tips
    mesh.vertices[0, 2] = -h - radius
    mesh.vertices[-1, 2] = h + radius
    return mesh
