"""Point cloud to dense depth/distance maps, with a backward path to points.

The forward pipeline is project -> z-buffer -> nearest-neighbor densify. The
discrete choices (pixel winners, nearest-occupied-pixel assignment) are frozen
per call; gradients flow only through the continuous quantities they select,
which is what an attacker differentiates through when maps are rebuilt every
iteration anyway.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fuselab.scenegen import CameraIntrinsics


class LidarMapError(ValueError):
    pass


@dataclass
class SparseHits:
    """Per occupied pixel: the z-buffer winner among projected points."""

    rows: np.ndarray    # (P,) int32 pixel row
    cols: np.ndarray    # (P,) int32 pixel col
    point_index: np.ndarray  # (P,) int32 index into the cloud
    u: np.ndarray       # (P,) float32 continuous projected column
    v: np.ndarray       # (P,) float32 continuous projected row
    depth: np.ndarray   # (P,) float32 z in meters

    def __len__(self) -> int:
        return len(self.rows)


@dataclass
class DepthMaps:
    depth: np.ndarray     # (H, W) float32, meters
    distance: np.ndarray  # (H, W) float32, pixels
    assign: np.ndarray    # (H, W) int32 cloud index, -1 when cloud is empty


def project_points(cloud: np.ndarray, intrinsics: CameraIntrinsics) -> SparseHits:
    """Pinhole-project the cloud and keep the nearest point per pixel.

    Points behind the camera or outside the image are dropped. Within a
    pixel the smallest depth wins, ties by smaller point index.
    """
    cloud = np.asarray(cloud, dtype=np.float32)
    if cloud.ndim != 2 or (len(cloud) and cloud.shape[1] != 3):
        raise LidarMapError(f"cloud must be (N, 3), got {cloud.shape}")
    H, W = intrinsics.height, intrinsics.width
    empty = SparseHits(*(np.zeros(0, dt) for dt in
                         (np.int32, np.int32, np.int32, np.float32, np.float32, np.float32)))
    if len(cloud) == 0:
        return empty

    z = cloud[:, 2]
    front = z > 0
    idx = np.nonzero(front)[0]
    if len(idx) == 0:
        return empty
    x, y, z = cloud[idx, 0], cloud[idx, 1], cloud[idx, 2]
    u = intrinsics.fx * x / z + intrinsics.cx
    v = intrinsics.fy * y / z + intrinsics.cy
    col = np.floor(u).astype(np.int64)
    row = np.floor(v).astype(np.int64)
    keep = (col >= 0) & (col < W) & (row >= 0) & (row < H)
    if not keep.any():
        return empty
    idx, u, v, z = idx[keep], u[keep], v[keep], z[keep]
    row, col = row[keep], col[keep]

    lin = row * W + col
    # z-buffer: first entry per pixel after sorting by (pixel, depth, index)
    order = np.lexsort((idx, z, lin))
    lin_sorted = lin[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = lin_sorted[1:] != lin_sorted[:-1]
    win = order[first]
    return SparseHits(
        rows=row[win].astype(np.int32),
        cols=col[win].astype(np.int32),
        point_index=idx[win].astype(np.int32),
        u=u[win].astype(np.float32),
        v=v[win].astype(np.float32),
        depth=z[win].astype(np.float32),
    )


def densify(hits: SparseHits, H: int, W: int) -> DepthMaps:
    """Spread sparse hits to every pixel via nearest occupied pixel.

    Nearness is Euclidean distance between integer pixel coordinates, ties
    broken by the smaller linear index of the occupied pixel. All candidate
    squared distances are exact small integers, so evaluating them in float32
    matrix form changes nothing and keeps the argmin total and reproducible.
    """
    if len(hits) == 0:
        return DepthMaps(
            depth=np.zeros((H, W), dtype=np.float32),
            distance=np.zeros((H, W), dtype=np.float32),
            assign=np.full((H, W), -1, dtype=np.int32),
        )

    # sort hits by linear index so argmin's first-minimum rule is the tie-break
    lin = hits.rows.astype(np.int64) * W + hits.cols.astype(np.int64)
    order = np.argsort(lin)
    hr = hits.rows[order].astype(np.float32)
    hc = hits.cols[order].astype(np.float32)

    # squared distance = -2*rp*rq - 2*cp*cq + (rq^2+cq^2), plus a per-pixel
    # constant that cannot change the argmin
    P = len(hr)
    rhs = np.empty((3, P), dtype=np.float32)
    rhs[0] = -2.0 * hr
    rhs[1] = -2.0 * hc
    rhs[2] = hr * hr + hc * hc

    rp, cp = np.meshgrid(np.arange(H, dtype=np.float32),
                         np.arange(W, dtype=np.float32), indexing="ij")
    lhs = np.empty((H * W, 3), dtype=np.float32)
    lhs[:, 0] = rp.ravel()
    lhs[:, 1] = cp.ravel()
    lhs[:, 2] = 1.0

    nearest = np.empty(H * W, dtype=np.int64)
    block = 4096  # bound the (pixels x hits) scratch matrix
    for lo in range(0, H * W, block):
        hi = min(lo + block, H * W)
        scores = lhs[lo:hi] @ rhs
        nearest[lo:hi] = np.argmin(scores, axis=1)

    src = order[nearest]  # back to original hit order
    depth = hits.depth[src].reshape(H, W)
    assign = hits.point_index[src].reshape(H, W)

    centers_u = cp.ravel() + np.float32(0.5)
    centers_v = rp.ravel() + np.float32(0.5)
    du = centers_u - hits.u[src]
    dv = centers_v - hits.v[src]
    distance = np.sqrt(du * du + dv * dv).reshape(H, W).astype(np.float32)
    return DepthMaps(depth=depth.copy(), distance=distance, assign=assign.copy())


def image_diagonal(H: int, W: int) -> float:
    return float(np.sqrt((H - 1) ** 2 + (W - 1) ** 2))


def normalize_depth(maps: DepthMaps, stats) -> np.ndarray:
    """Two-channel network input: standardized depth, diagonal-scaled distance."""
    if stats.std == 0:
        raise LidarMapError("degenerate depth statistics: std is zero")
    H, W = maps.depth.shape
    out = np.empty((2, H, W), dtype=np.float32)
    out[0] = (maps.depth - np.float32(stats.mean)) / np.float32(stats.std)
    out[1] = maps.distance / np.float32(image_diagonal(H, W))
    return out


def normalize_backward(grad_input: np.ndarray, stats, H: int, W: int) -> np.ndarray:
    """Pull gradients on the normalized channels back to raw depth/distance."""
    grad = np.empty((2, H, W), dtype=np.float32)
    grad[0] = grad_input[0] / np.float32(stats.std)
    grad[1] = grad_input[1] / np.float32(image_diagonal(H, W))
    return grad


def maps_backward(grad_maps: np.ndarray, hits: SparseHits, maps: DepthMaps,
                  cloud: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Gradients of (depth, distance) map values w.r.t. point coordinates.

    The per-pixel assignment and the z-buffer winners are treated as fixed.
    The depth channel passes straight to the winning point's z. The distance
    channel reaches (x, y, z) through the projection of the winning point.
    Pixels at exactly zero distance contribute nothing there (the norm's
    subgradient at zero is taken to be zero).
    """
    N = len(cloud)
    grad_cloud = np.zeros((N, 3), dtype=np.float32)
    if len(hits) == 0 or N == 0:
        return grad_cloud
    H, W = maps.depth.shape
    if grad_maps.shape != (2, H, W):
        raise LidarMapError(f"grad_maps must be (2, {H}, {W}), got {grad_maps.shape}")

    pidx = maps.assign.ravel().astype(np.int64)
    g_depth = grad_maps[0].ravel().astype(np.float64)
    g_dist = grad_maps[1].ravel().astype(np.float64)

    # depth channel: d(depth)/dz = 1 at the assigned point
    gz = np.bincount(pidx, weights=g_depth, minlength=N)

    # distance channel: dist = ||center - (u, v)|| with u, v from the point
    x = cloud[pidx, 0].astype(np.float64)
    y = cloud[pidx, 1].astype(np.float64)
    z = cloud[pidx, 2].astype(np.float64)
    u = intrinsics.fx * x / z + intrinsics.cx
    v = intrinsics.fy * y / z + intrinsics.cy
    rp, cp = np.meshgrid(np.arange(H, dtype=np.float64),
                         np.arange(W, dtype=np.float64), indexing="ij")
    du = u - (cp.ravel() + 0.5)   # d(dist)/du = du / dist
    dv = v - (rp.ravel() + 0.5)
    dist = np.sqrt(du * du + dv * dv)
    safe = dist > 0
    scale = np.where(safe, g_dist / np.where(safe, dist, 1.0), 0.0)
    gu = scale * du
    gv = scale * dv
    gx = gu * (intrinsics.fx / z)
    gy = gv * (intrinsics.fy / z)
    gz_dist = gu * (-intrinsics.fx * x / (z * z)) + gv * (-intrinsics.fy * y / (z * z))

    grad_cloud[:, 0] = np.bincount(pidx, weights=gx, minlength=N)
    grad_cloud[:, 1] = np.bincount(pidx, weights=gy, minlength=N)
    grad_cloud[:, 2] = (gz + np.bincount(pidx, weights=gz_dist, minlength=N))
    return grad_cloud


def scene_maps(cloud: np.ndarray, intrinsics: CameraIntrinsics):
    """Convenience: project then densify, returning (hits, maps)."""
    hits = project_points(cloud, intrinsics)
    maps = densify(hits, intrinsics.height, intrinsics.width)
    return hits, maps
