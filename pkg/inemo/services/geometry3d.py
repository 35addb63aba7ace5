"""Cuboid meshes, the pinhole camera, z-buffer rasterization, neighborhoods and rotation metrics.

Conventions: camera coordinates are x right, y up, z forward; the object centre sits
at (0, 0, distance). A pose rotates the object by R = R_roll(z) @ R_elev(x) @ R_az(y),
so azimuth is applied first and roll last. Pixel (x, y) covers [x, x+1) x [y, y+1)
with y growing downward; a vertex's pixel is the floor of its projection.
"""
import logging
import math
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from inemo.errors import EmptyRenderError, InvalidArgumentError
from inemo.models import BACKGROUND, OFF_SCREEN, CuboidMesh, Pose, RenderResult

log = logging.getLogger(__name__)

_NEAR = 1e-6
_INSIDE_EPS = 1e-9
_VISIBILITY_RTOL = 1e-7


# ---------------------------------------------------------------------------
# Cuboid construction
# ---------------------------------------------------------------------------


def _surface_count(segments):
    nx, ny, nz = segments
    inner = max(nx - 1, 0) * max(ny - 1, 0) * max(nz - 1, 0)
    return (nx + 1) * (ny + 1) * (nz + 1) - inner


def _grid_segments(dims, target):
    """Pick per-axis segment counts for a common grid spacing so the surface count is closest to target."""
    limit = 2 * int(math.ceil(math.sqrt(target))) + 4
    best = None
    for axis in range(3):
        for n in range(1, limit + 1):
            spacing = dims[axis] / n
            segments = tuple(max(1, int(math.floor(d / spacing + 0.5))) for d in dims)
            count = _surface_count(segments)
            key = (abs(count - target), count, segments)
            if best is None or key < best:
                best = key
    return best[2]


def build_cuboid(dims, target_vertices):
    """Sample vertices on a regular surface grid of a centred cuboid and triangulate each face."""
    dims = np.asarray(dims, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(dims)) or np.any(dims <= 0):
        raise InvalidArgumentError(f"Cuboid extents must be positive, got {dims.tolist()}")
    if target_vertices < 8:
        raise InvalidArgumentError(f"target_vertices must be >= 8, got {target_vertices}")

    n = _grid_segments(dims, int(target_vertices))
    ii, jj, kk = np.meshgrid(*(np.arange(s + 1) for s in n), indexing="ij")
    lattice = (ii, jj, kk)
    on_surface = np.zeros(ii.shape, dtype=bool)
    for axis in range(3):
        on_surface |= (lattice[axis] == 0) | (lattice[axis] == n[axis])

    index = np.full(ii.shape, -1, dtype=np.int64)
    index[on_surface] = np.arange(int(on_surface.sum()))

    coords = []
    for axis in range(3):
        idx = lattice[axis][on_surface].astype(np.float64)
        half = dims[axis] / 2.0
        c = -half + idx * (dims[axis] / n[axis])
        c[idx == n[axis]] = half
        c[idx == 0] = -half
        coords.append(c)
    vertices = np.stack(coords, axis=1)

    faces = []
    for a in range(3):
        b, c = (a + 1) % 3, (a + 2) % 3
        u, v = np.meshgrid(np.arange(n[b]), np.arange(n[c]), indexing="ij")
        for side, flip in ((0, True), (n[a], False)):

            def corner(du, dv):
                lat = [None, None, None]
                lat[a] = np.full(u.shape, side)
                lat[b] = u + du
                lat[c] = v + dv
                return index[lat[0], lat[1], lat[2]].reshape(-1)

            p00, p10, p11, p01 = corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)
            tris = np.empty((2 * len(p00), 3), dtype=np.int64)
            tris[0::2] = np.stack([p00, p10, p11], axis=1)
            tris[1::2] = np.stack([p00, p11, p01], axis=1)
            if flip:
                tris = tris[:, ::-1]
            faces.append(tris)

    return CuboidMesh(vertices=vertices, faces=np.concatenate(faces), dims=dims)


def face_sides(mesh):
    """Cuboid side of each triangle: 2*axis for the negative side, 2*axis+1 for the positive."""
    tri = mesh.vertices[mesh.faces]  # (F, 3, 3)
    half = mesh.dims / 2.0
    sides = np.full(len(mesh.faces), -1, dtype=np.int64)
    for axis in range(3):
        coord = tri[:, :, axis]
        sides[np.all(np.abs(coord - half[axis]) < 1e-9, axis=1)] = 2 * axis + 1
        sides[np.all(np.abs(coord + half[axis]) < 1e-9, axis=1)] = 2 * axis
    return sides


def export_mesh(mesh, path):
    """Write the plain-text mesh format (see file-formats.md)."""
    lines = [f"{mesh.vertex_count} {len(mesh.faces)} {mesh.dims[0]:.3f} {mesh.dims[1]:.3f} {mesh.dims[2]:.3f}"]
    lines.extend(f"{x:.3f} {y:.3f} {z:.3f}" for x, y, z in mesh.vertices)
    lines.extend(f"{a} {b} {c}" for a, b, c in mesh.faces)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def import_mesh(path):
    rows = Path(path).read_text(encoding="utf-8").split("\n")
    head = rows[0].split()
    if len(head) != 5:
        raise InvalidArgumentError(f"Malformed mesh header in {path}: {rows[0]!r}")
    nv, nf = int(head[0]), int(head[1])
    body = [r for r in rows[1:] if r.strip()]
    if len(body) != nv + nf:
        raise InvalidArgumentError(f"Mesh file {path} declares {nv}+{nf} rows, found {len(body)}")
    vertices = np.array([[float(t) for t in r.split()] for r in body[:nv]], dtype=np.float64)
    faces = np.array([[int(t) for t in r.split()] for r in body[nv:]], dtype=np.int64)
    return CuboidMesh(vertices=vertices, faces=faces, dims=[float(t) for t in head[2:]])


# ---------------------------------------------------------------------------
# Poses and projection
# ---------------------------------------------------------------------------


def pose_to_rotation(pose):
    """Object-to-camera rotation: azimuth about y, then elevation about x, then roll about z."""
    ca, sa = math.cos(pose.azimuth), math.sin(pose.azimuth)
    ce, se = math.cos(pose.elevation), math.sin(pose.elevation)
    cr, sr = math.cos(pose.roll), math.sin(pose.roll)
    r_az = np.array([[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]])
    # positive elevation tilts the top face (+y) toward the camera
    r_el = np.array([[1.0, 0.0, 0.0], [0.0, ce, se], [0.0, -se, ce]])
    r_roll = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return r_roll @ r_el @ r_az


def to_camera(points, pose):
    return points @ pose_to_rotation(pose).T + np.array([0.0, 0.0, pose.distance])


def project_points(points_cam, camera):
    """Continuous screen coordinates (u right, v down) of camera-space points."""
    scale = camera.focal * camera.viewport
    z = points_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.out_width / 2.0 + scale * points_cam[:, 0] / z
        v = camera.out_height / 2.0 - scale * points_cam[:, 1] / z
    return np.stack([u, v], axis=1)


def _closest_faces(tri_uv, tri_z, query_uv, width, height):
    """Closest covering face at each query point.

    Candidate (face, pixel) pairs come from each face's pixel bounding box; queries
    are joined to the pairs of the pixel they fall in, then tested exactly with
    perspective-correct depth. Ties resolve to the lowest face index.
    """
    q_count = len(query_uv)
    depth = np.full(q_count, np.inf)
    face = np.full(q_count, -1, dtype=np.int64)
    if q_count == 0 or len(tri_uv) == 0:
        return depth, face

    lo = np.floor(tri_uv.min(axis=1)).astype(np.int64)
    hi = np.floor(tri_uv.max(axis=1)).astype(np.int64)
    lo[:, 0] = np.clip(lo[:, 0], 0, width)
    lo[:, 1] = np.clip(lo[:, 1], 0, height)
    hi[:, 0] = np.clip(hi[:, 0], -1, width - 1)
    hi[:, 1] = np.clip(hi[:, 1], -1, height - 1)
    wx = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
    wy = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    counts = wx * wy
    total = int(counts.sum())
    if total == 0:
        return depth, face

    pair_face = np.repeat(np.arange(len(tri_uv)), counts)
    offset = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    px = lo[pair_face, 0] + offset % wx[pair_face]
    py = lo[pair_face, 1] + offset // wx[pair_face]
    pair_pixel = py * width + px
    order = np.argsort(pair_pixel, kind="stable")
    sorted_pixel = pair_pixel[order]
    sorted_face = pair_face[order]

    qx = np.floor(query_uv[:, 0]).astype(np.int64)
    qy = np.floor(query_uv[:, 1]).astype(np.int64)
    inside_image = (qx >= 0) & (qx < width) & (qy >= 0) & (qy < height)
    q_pixel = np.where(inside_image, qy * width + qx, -1)
    start = np.searchsorted(sorted_pixel, q_pixel, side="left")
    stop = np.searchsorted(sorted_pixel, q_pixel, side="right")
    n = np.where(inside_image, stop - start, 0)
    if n.sum() == 0:
        return depth, face

    q_idx = np.repeat(np.arange(q_count), n)
    pos = np.repeat(start, n) + (np.arange(int(n.sum())) - np.repeat(np.cumsum(n) - n, n))
    f = sorted_face[pos]

    a, b, c = tri_uv[f, 0], tri_uv[f, 1], tri_uv[f, 2]
    p = query_uv[q_idx]
    v0, v1, v2 = b - a, c - a, p - a
    den = v0[:, 0] * v1[:, 1] - v1[:, 0] * v0[:, 1]
    l1 = (v2[:, 0] * v1[:, 1] - v1[:, 0] * v2[:, 1]) / den
    l2 = (v0[:, 0] * v2[:, 1] - v2[:, 0] * v0[:, 1]) / den
    l0 = 1.0 - l1 - l2
    hit = (l0 >= -_INSIDE_EPS) & (l1 >= -_INSIDE_EPS) & (l2 >= -_INSIDE_EPS)
    if not np.any(hit):
        return depth, face

    z = tri_z[f[hit]]
    inv_z = l0[hit] / z[:, 0] + l1[hit] / z[:, 1] + l2[hit] / z[:, 2]
    hit_depth = 1.0 / inv_z
    hit_q = q_idx[hit]
    hit_f = f[hit]
    order = np.lexsort((hit_f, hit_depth, hit_q))
    first = np.unique(hit_q[order], return_index=True)[1]
    chosen = order[first]
    depth[hit_q[chosen]] = hit_depth[chosen]
    face[hit_q[chosen]] = hit_f[chosen]
    return depth, face


def _screen_faces(mesh, points_cam, uv):
    """Faces fully in front of the camera with non-zero screen area."""
    faces = mesh.faces
    tri_z = points_cam[faces, 2]
    tri_uv = uv[faces]
    in_front = np.all(tri_z > _NEAR, axis=1)
    e0 = tri_uv[:, 1] - tri_uv[:, 0]
    e1 = tri_uv[:, 2] - tri_uv[:, 0]
    area = e0[:, 0] * e1[:, 1] - e1[:, 0] * e0[:, 1]
    keep = in_front & (np.abs(area) > 1e-12)
    return np.flatnonzero(keep), tri_uv[keep], tri_z[keep]


def project_vertices(mesh, pose, camera):
    """Continuous projections, depths, and ray visibility of every vertex (no pixel pass).

    A vertex is ray-visible when it is in front of the camera, projects inside the image
    and no face is strictly closer along its viewing ray.
    """
    points = to_camera(mesh.vertices, pose)
    depth = points[:, 2]
    if not np.any(depth > _NEAR):
        raise EmptyRenderError(f"Object is entirely behind the camera at {pose}")
    uv = project_points(points, camera)
    face_ids, tri_uv, tri_z = _screen_faces(mesh, points, uv)

    in_front = depth > _NEAR
    px = np.floor(np.where(in_front, uv[:, 0], -1.0))
    py = np.floor(np.where(in_front, uv[:, 1], -1.0))
    in_image = in_front & (px >= 0) & (px < camera.out_width) & (py >= 0) & (py < camera.out_height)

    candidates = np.flatnonzero(in_image)
    closest, _ = _closest_faces(tri_uv, tri_z, uv[candidates], camera.out_width, camera.out_height)
    ray_visible = np.zeros(len(depth), dtype=bool)
    ray_visible[candidates] = depth[candidates] <= closest * (1.0 + _VISIBILITY_RTOL)

    pixel = np.full((len(depth), 2), OFF_SCREEN, dtype=np.int64)
    pixel[in_image, 0] = px[in_image].astype(np.int64)
    pixel[in_image, 1] = py[in_image].astype(np.int64)
    return uv, depth, pixel, ray_visible, (face_ids, tri_uv, tri_z)


def rasterize(mesh, pose, camera):
    """Render mesh geometry at a pose: z-buffer, object mask, and per-vertex visibility."""
    uv, depth, pixel, ray_visible, (face_ids, tri_uv, tri_z) = project_vertices(mesh, pose, camera)
    width, height = camera.out_width, camera.out_height

    gx, gy = np.meshgrid(np.arange(width), np.arange(height))
    centres = np.stack([gx.ravel() + 0.5, gy.ravel() + 0.5], axis=1)
    zflat, fflat = _closest_faces(tri_uv, tri_z, centres, width, height)
    zbuffer = zflat.reshape(height, width)
    local_face = fflat.reshape(height, width)
    object_mask = local_face >= 0
    face_of_pixel = np.where(object_mask, face_ids[np.maximum(local_face, 0)], -1)

    visible = ray_visible.copy()
    on = np.flatnonzero(visible)
    visible[on] = object_mask[pixel[on, 1], pixel[on, 0]]

    vertex_of_pixel = np.full((height, width), BACKGROUND, dtype=np.int64)
    vis_idx = np.flatnonzero(visible)
    if len(vis_idx) and object_mask.any():
        tree = cKDTree(uv[vis_idx])
        ys, xs = np.nonzero(object_mask)
        _, nearest = tree.query(np.stack([xs + 0.5, ys + 0.5], axis=1))
        vertex_of_pixel[ys, xs] = vis_idx[nearest]

    return RenderResult(
        pixel_of_vertex=pixel,
        visible=visible,
        vertex_of_pixel=vertex_of_pixel,
        zbuffer=zbuffer,
        object_mask=object_mask,
        face_of_pixel=face_of_pixel,
        screen_xy=uv,
        vertex_depth=depth,
    )


# ---------------------------------------------------------------------------
# Neighborhoods, template grid, rotation metric
# ---------------------------------------------------------------------------


def neighborhood_mask(mesh, radius):
    """Boolean (K, K) matrix: True where ||v_i - v_k|| < radius and i != k."""
    if radius < 0:
        raise InvalidArgumentError(f"Neighborhood radius must be >= 0, got {radius}")
    dist = cdist(mesh.vertices, mesh.vertices)
    mask = dist < radius
    np.fill_diagonal(mask, False)
    return mask


def vertex_neighborhood(mesh, radius):
    return [np.flatnonzero(row) for row in neighborhood_mask(mesh, radius)]


_GRID_PREFERENCE = ((4, 3), (4, 1), (2, 3), (2, 1), (1, 3), (1, 1))


def _grid_shape(count):
    for n_el, n_roll in _GRID_PREFERENCE:
        if count % (n_el * n_roll) == 0 and count // (n_el * n_roll) >= n_el:
            return count // (n_el * n_roll), n_el, n_roll
    raise InvalidArgumentError(f"Cannot factor {count} templates into an azimuth x elevation x roll grid")


def template_pose_grid(count=144, distance=5.0, shape=None):
    """Deterministic grid of viewing poses; 144 factors as 12 azimuths x 4 elevations x 3 rolls."""
    if count < 1:
        raise InvalidArgumentError(f"Template count must be positive, got {count}")
    if shape is None:
        shape = _grid_shape(int(count))
    n_az, n_el, n_roll = (int(s) for s in shape)
    if n_az * n_el * n_roll != count or min(shape) < 1:
        raise InvalidArgumentError(f"Grid shape {shape} does not factor {count}")
    azimuths = 2.0 * math.pi * np.arange(n_az) / n_az
    elevations = np.linspace(-math.pi / 3, math.pi / 3, n_el) if n_el > 1 else np.zeros(1)
    rolls = np.linspace(-math.pi / 6, math.pi / 6, n_roll) if n_roll > 1 else np.zeros(1)
    return [
        Pose(float(a), float(e), float(r), distance).canonical()
        for a in azimuths
        for e in elevations
        for r in rolls
    ]


def _check_rotation(matrix, name):
    r = np.asarray(matrix, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise InvalidArgumentError(f"{name} must be a finite 3x3 matrix")
    if np.linalg.norm(r.T @ r - np.eye(3)) > 1e-6 or np.linalg.det(r) < 0:
        raise InvalidArgumentError(f"{name} is not a rotation matrix")
    return r


def rotation_error(r_pred, r_gt):
    """Geodesic angle between two rotations, in [0, pi].

    Equal to arccos((trace(R_pred^T R_gt) - 1) / 2); evaluated with atan2 of the
    sine and cosine parts so that identical inputs give exactly 0.
    """
    m = _check_rotation(r_pred, "R_pred").T @ _check_rotation(r_gt, "R_gt")
    cos_part = (np.trace(m) - 1.0) / 2.0
    sin_part = 0.5 * math.sqrt(
        (m[2, 1] - m[1, 2]) ** 2 + (m[0, 2] - m[2, 0]) ** 2 + (m[1, 0] - m[0, 1]) ** 2
    )
    return float(math.atan2(sin_part, cos_part))


def pose_error(pred, gt):
    return rotation_error(pose_to_rotation(pred), pose_to_rotation(gt))
