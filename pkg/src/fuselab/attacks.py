"""Masked L-infinity attacks on image intensities and LiDAR point coordinates.

The perturbation lives in physical units: image deltas in [0,255] intensity
counts, point deltas in meters, each bounded per coordinate and zeroed
outside its mask. Maps are rebuilt from the shifted cloud on every iteration;
gradients reach the points through the frozen per-iteration assignment.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fuselab import lidarmap
from fuselab.detector import DetectorConfig, assign_targets, decode, forward, loss_regression
from fuselab.ndlab import ParamStore, Tape, ops
from fuselab.rng import stream
from fuselab.scenegen import CameraIntrinsics, Scene

CHANNELS = ("image", "lidar")
MASK_MODES = ("full", "car_boxes")


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    channels: tuple = ("image",)
    eps_image: float = 2.0
    gamma_lidar: float = 0.3
    steps: int = 10
    step_image: float | None = None  # default eps/4
    step_lidar: float | None = None  # default gamma/4
    mask_mode: str = "full"
    rand_init: bool = False

    def __post_init__(self):
        chans = tuple(c for c in CHANNELS if c in self.channels)
        if not chans or set(self.channels) - set(CHANNELS):
            raise AttackError(f"channels must be a non-empty subset of {CHANNELS}, "
                              f"got {self.channels!r}")
        object.__setattr__(self, "channels", chans)
        if self.eps_image < 0 or self.gamma_lidar < 0 or self.steps < 0:
            raise AttackError("bounds and step count must be non-negative")
        if self.mask_mode not in MASK_MODES:
            raise AttackError(f"unknown mask mode {self.mask_mode!r}")

    @property
    def alpha_image(self) -> float:
        return self.step_image if self.step_image is not None else self.eps_image / 4.0

    @property
    def alpha_lidar(self) -> float:
        return self.step_lidar if self.step_lidar is not None else self.gamma_lidar / 4.0

    def to_dict(self) -> dict:
        return {"channels": list(self.channels), "eps_image": self.eps_image,
                "gamma_lidar": self.gamma_lidar, "steps": self.steps,
                "step_image": self.step_image, "step_lidar": self.step_lidar,
                "mask_mode": self.mask_mode, "rand_init": self.rand_init}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass
class MaskSet:
    image: np.ndarray   # (H, W) float32 in {0, 1}
    points: np.ndarray  # (N,) float32 in {0, 1}


@dataclass
class Perturbation:
    delta_image: np.ndarray   # (3, H, W) float32, intensity units
    delta_points: np.ndarray  # (N, 3) float32, meters


def build_masks(scene: Scene, intrinsics: CameraIntrinsics, mask_mode: str) -> MaskSet:
    """Full masks are all ones; car masks cover exactly the car gt boxes.

    A pixel (r, c) is inside a box when x_min <= c < x_max and
    y_min <= r < y_max; a point is masked when its projection (u, v) falls in
    a car box the same way. Point membership uses the unperturbed cloud.
    """
    H, W = intrinsics.height, intrinsics.width
    N = len(scene.cloud)
    if mask_mode == "full":
        return MaskSet(image=np.ones((H, W), dtype=np.float32),
                       points=np.ones(N, dtype=np.float32))
    if mask_mode != "car_boxes":
        raise AttackError(f"unknown mask mode {mask_mode!r}")

    image = np.zeros((H, W), dtype=np.float32)
    points = np.zeros(N, dtype=np.float32)
    car_boxes = [g.box for g in scene.gt if g.cls == "car"]
    if not car_boxes:
        return MaskSet(image=image, points=points)

    for b in car_boxes:
        r0 = max(int(np.ceil(b[1])), 0)
        r1 = min(int(np.ceil(b[3])), H)
        c0 = max(int(np.ceil(b[0])), 0)
        c1 = min(int(np.ceil(b[2])), W)
        image[r0:r1, c0:c1] = 1.0

    if N:
        cloud = scene.cloud
        z = cloud[:, 2]
        front = z > 0
        u = np.where(front, intrinsics.fx * cloud[:, 0] / np.where(front, z, 1.0)
                     + intrinsics.cx, -1.0)
        v = np.where(front, intrinsics.fy * cloud[:, 1] / np.where(front, z, 1.0)
                     + intrinsics.cy, -1.0)
        for b in car_boxes:
            inside = front & (u >= b[0]) & (u < b[2]) & (v >= b[1]) & (v < b[3])
            points[inside] = 1.0
    return MaskSet(image=image, points=points)


def zero_perturbation(scene: Scene, intrinsics: CameraIntrinsics) -> Perturbation:
    return Perturbation(
        delta_image=np.zeros((3, intrinsics.height, intrinsics.width), np.float32),
        delta_points=np.zeros((len(scene.cloud), 3), np.float32),
    )


def _f32_floor(bound: float) -> np.float32:
    """Largest float32 not exceeding the bound, so clipped deltas never round
    past it (float32(0.3) is slightly above 0.3)."""
    f = np.float32(bound)
    if float(f) > bound:
        f = np.nextafter(f, np.float32(0.0))
    return f


def pgd_attack(store: ParamStore | None, config: DetectorConfig | None, scene: Scene,
               intrinsics: CameraIntrinsics, stats, spec: AttackSpec, seed: int,
               iterate_hook=None, objective=None) -> Perturbation:
    """Sign-gradient ascent on the regression loss, projected each step.

    The default objective is the model's box-regression loss against the
    scene's ground truth; ``objective(tape, rgb_leaf, lidar_leaf, scene)``
    may replace it (rgb_leaf carries raw intensities). ``iterate_hook`` is
    called as hook(iteration, perturbation, loss_value) after every step.
    """
    masks = build_masks(scene, intrinsics, spec.mask_mode)
    H, W = intrinsics.height, intrinsics.width
    N = len(scene.cloud)
    img_on = "image" in spec.channels
    pts_on = "lidar" in spec.channels

    eps = _f32_floor(spec.eps_image)
    gamma = _f32_floor(spec.gamma_lidar)

    rng = stream(seed, "pgd")
    delta_img = np.zeros((3, H, W), dtype=np.float32)
    delta_pts = np.zeros((N, 3), dtype=np.float32)
    if spec.rand_init:
        if img_on:
            draw = rng.uniform(-spec.eps_image, spec.eps_image, (3, H, W))
            delta_img = np.clip(draw.astype(np.float32), -eps, eps) * masks.image
        if pts_on and N:
            draw = rng.uniform(-spec.gamma_lidar, spec.gamma_lidar, (N, 3))
            delta_pts = (np.clip(draw.astype(np.float32), -gamma, gamma)
                         * masks.points[:, None])

    targets = None
    if objective is None:
        if store is None or config is None:
            raise AttackError("default objective needs a model")
        targets = assign_targets(scene.gt, H, W, config)

    a_img = np.float32(spec.alpha_image)
    a_pts = np.float32(spec.alpha_lidar)

    for it in range(spec.steps):
        rgb_adv = np.clip(scene.rgb + delta_img, 0.0, 255.0).astype(np.float32)
        cloud_adv = scene.cloud + delta_pts
        hits, maps = lidarmap.scene_maps(cloud_adv, intrinsics)
        lidar_in = lidarmap.normalize_depth(maps, stats)

        tape = Tape()
        rgb_leaf = tape.leaf(rgb_adv)
        lidar_leaf = tape.leaf(lidar_in)
        if objective is None:
            leaves = store.leaves(tape)
            rgb01 = ops.scale(rgb_leaf, 1.0 / 255.0)
            pred = forward(leaves, config,
                           rgb01 if config.needs_rgb else None,
                           lidar_leaf if config.needs_lidar else None)
            out = loss_regression(pred, targets)
        else:
            out = objective(tape, rgb_leaf, lidar_leaf, scene)
        loss_value = out.item()
        grads = tape.backward(out)

        if img_on:
            g = grads.wrt(rgb_leaf)
            delta_img = np.clip(delta_img + a_img * np.sign(g), -eps, eps) * masks.image
        if pts_on and N:
            g_maps = lidarmap.normalize_backward(grads.wrt(lidar_leaf), stats, H, W)
            g_pts = lidarmap.maps_backward(g_maps, hits, maps, cloud_adv, intrinsics)
            delta_pts = (np.clip(delta_pts + a_pts * np.sign(g_pts), -gamma, gamma)
                         * masks.points[:, None])
        if iterate_hook is not None:
            iterate_hook(it, Perturbation(delta_img.copy(), delta_pts.copy()), loss_value)

    return Perturbation(delta_image=delta_img, delta_points=delta_pts)


def apply_perturbation(scene: Scene, pert: Perturbation,
                       intrinsics: CameraIntrinsics, stats):
    """Perturbed network inputs: clipped raw rgb and regenerated lidar maps."""
    if pert.delta_image.shape != scene.rgb.shape:
        raise AttackError(f"image delta shape {pert.delta_image.shape} "
                          f"does not match scene {scene.rgb.shape}")
    if pert.delta_points.shape != scene.cloud.shape:
        raise AttackError(f"point delta shape {pert.delta_points.shape} "
                          f"does not match cloud {scene.cloud.shape}")
    rgb_adv = np.clip(scene.rgb + pert.delta_image, 0.0, 255.0).astype(np.float32)
    cloud_adv = scene.cloud + pert.delta_points
    _, maps = lidarmap.scene_maps(cloud_adv, intrinsics)
    return rgb_adv, lidarmap.normalize_depth(maps, stats)


def feasibility_violations(pert: Perturbation, spec: AttackSpec, masks: MaskSet,
                           scene: Scene) -> list:
    """Every way a perturbation could break its contract, as messages."""
    out = []
    di, dp = pert.delta_image, pert.delta_points
    if "image" in spec.channels:
        if di.size and float(np.abs(di).max()) > spec.eps_image:
            out.append(f"image delta exceeds eps: {np.abs(di).max()} > {spec.eps_image}")
        off = masks.image == 0
        if di[:, off].size and np.any(di[:, off] != 0):
            out.append("image delta nonzero outside mask")
    elif np.any(di != 0):
        out.append("untouched image channel perturbed")
    if "lidar" in spec.channels:
        if dp.size and float(np.abs(dp).max()) > spec.gamma_lidar:
            out.append(f"point delta exceeds gamma: {np.abs(dp).max()} > {spec.gamma_lidar}")
        off = masks.points == 0
        if dp[off].size and np.any(dp[off] != 0):
            out.append("point delta nonzero outside mask")
    elif np.any(dp != 0):
        out.append("untouched lidar channel perturbed")
    applied = scene.rgb + di
    clipped = np.clip(applied, 0.0, 255.0)
    if clipped.size and (clipped.min() < 0 or clipped.max() > 255):
        out.append("applied image escapes [0, 255]")
    return out


# -- perturbation files -------------------------------------------------------------


def save_perturbation(pert: Perturbation, path) -> None:
    """Two length-prefixed little-endian f32 blocks: image flat, points flat."""
    with open(path, "wb") as f:
        for block in (pert.delta_image, pert.delta_points):
            flat = np.ascontiguousarray(block, dtype="<f4").ravel()
            f.write(struct.pack("<I", flat.size))
            f.write(flat.tobytes())


def load_perturbation(path, intrinsics: CameraIntrinsics) -> Perturbation:
    path = Path(path)
    raw = path.read_bytes()
    off = 0
    blocks = []
    for _ in range(2):
        if off + 4 > len(raw):
            raise AttackError(f"{path}: truncated perturbation file")
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        if off + 4 * count > len(raw):
            raise AttackError(f"{path}: truncated perturbation block")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        off += 4 * count
        blocks.append(arr.copy())
    H, W = intrinsics.height, intrinsics.width
    if blocks[0].size != 3 * H * W:
        raise AttackError(f"{path}: image block size {blocks[0].size} "
                          f"does not match {3 * H * W}")
    if blocks[1].size % 3:
        raise AttackError(f"{path}: point block size {blocks[1].size} not divisible by 3")
    return Perturbation(delta_image=blocks[0].reshape(3, H, W),
                        delta_points=blocks[1].reshape(-1, 3))


def transfer_attack(source_store, source_config, target_store, target_config,
                    scene: Scene, intrinsics: CameraIntrinsics, stats,
                    spec: AttackSpec, seed: int):
    """Craft on the source model, evaluate the target on the result.

    Returns (detections of the target on the perturbed inputs, perturbation).
    The target's gradients are never consulted.
    """
    pert = pgd_attack(source_store, source_config, scene, intrinsics, stats,
                      spec, seed)
    rgb_adv, lidar_adv = apply_perturbation(scene, pert, intrinsics, stats)
    tape = Tape()
    leaves = target_store.leaves(tape)
    rgb01 = tape.leaf(rgb_adv / np.float32(255.0)) if target_config.needs_rgb else None
    lid = tape.leaf(lidar_adv) if target_config.needs_lidar else None
    pred = forward(leaves, target_config, rgb01, lid)
    return decode(pred.data, intrinsics.height, intrinsics.width, target_config), pert
