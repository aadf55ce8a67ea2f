"""Synthetic driving scenes: RGB images, LiDAR clouds, ground-truth boxes.

The camera sits at the origin looking along +z with +y pointing down. The
ground is the plane y = +1.5 m. Objects are axis-aligned cuboids resting on
the ground, length along z and width along x. Everything is drawn from one
per-scene RNG stream, so a (spec, intrinsics, seed) triple always produces a
bit-identical scene.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fuselab.rng import derive_seed, stream

CLASS_NAMES = ("car", "pedestrian", "cyclist")

FORMAT_VERSION = 1


class SceneGenError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise SceneGenError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise SceneGenError("principal point outside the image")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                   width=int(d["width"]), height=int(d["height"]))


DEFAULT_INTRINSICS = CameraIntrinsics(fx=120.0, fy=120.0, cx=64.0, cy=48.0,
                                      width=128, height=96)

GROUND_Y = 1.5


@dataclass(frozen=True)
class ObjectClass:
    name: str
    length: float  # z extent, meters
    height: float  # y extent
    width: float   # x extent
    color: tuple   # base RGB, intensity units
    count_range: tuple  # inclusive (lo, hi)

    def to_dict(self) -> dict:
        return {"name": self.name, "length": self.length, "height": self.height,
                "width": self.width, "color": list(self.color),
                "count_range": list(self.count_range)}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectClass":
        return cls(name=d["name"], length=d["length"], height=d["height"],
                   width=d["width"], color=tuple(d["color"]),
                   count_range=tuple(d["count_range"]))


def default_classes() -> tuple:
    return (
        ObjectClass("car", 4.5, 1.5, 1.8, (200.0, 45.0, 45.0), (1, 4)),
        ObjectClass("pedestrian", 0.5, 1.8, 0.5, (45.0, 200.0, 70.0), (0, 2)),
        ObjectClass("cyclist", 1.8, 1.7, 0.6, (55.0, 90.0, 215.0), (0, 2)),
    )


@dataclass(frozen=True)
class SceneSpec:
    classes: tuple = field(default_factory=default_classes)
    x_range: tuple = (-8.0, 8.0)
    z_range: tuple = (6.0, 35.0)
    noise_sigma: float = 4.0
    point_density: float = 6000.0  # points ~ density * face_area / z^2
    ground_points: int = 400
    dropout: float = 0.05
    max_box_overlap: float = 0.3  # pairwise IoU ceiling for placement
    brightness_jitter: float = 0.2
    sky_color: tuple = (150.0, 160.0, 175.0)
    ground_color: tuple = (90.0, 90.0, 95.0)

    def __post_init__(self):
        if self.z_range[0] <= 0:
            raise SceneGenError("z range must be strictly positive")
        if self.x_range[0] > self.x_range[1] or self.z_range[0] > self.z_range[1]:
            raise SceneGenError("empty placement range")
        for c in self.classes:
            if c.count_range[0] > c.count_range[1] or c.count_range[0] < 0:
                raise SceneGenError(f"bad count range for {c.name}")

    def to_dict(self) -> dict:
        return {
            "classes": [c.to_dict() for c in self.classes],
            "x_range": list(self.x_range),
            "z_range": list(self.z_range),
            "noise_sigma": self.noise_sigma,
            "point_density": self.point_density,
            "ground_points": self.ground_points,
            "dropout": self.dropout,
            "max_box_overlap": self.max_box_overlap,
            "brightness_jitter": self.brightness_jitter,
            "sky_color": list(self.sky_color),
            "ground_color": list(self.ground_color),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            classes=tuple(ObjectClass.from_dict(c) for c in d["classes"]),
            x_range=tuple(d["x_range"]),
            z_range=tuple(d["z_range"]),
            noise_sigma=d["noise_sigma"],
            point_density=d["point_density"],
            ground_points=int(d["ground_points"]),
            dropout=d["dropout"],
            max_box_overlap=d["max_box_overlap"],
            brightness_jitter=d["brightness_jitter"],
            sky_color=tuple(d["sky_color"]),
            ground_color=tuple(d["ground_color"]),
        )


@dataclass
class GroundTruthBox:
    box: np.ndarray  # [x_min, y_min, x_max, y_max] continuous pixels
    cls: str


@dataclass
class Scene:
    rgb: np.ndarray    # (3, H, W) float32, [0, 255]
    cloud: np.ndarray  # (N, 3) float32, camera frame, z > 0
    gt: list           # list of GroundTruthBox


def _box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _project(pts: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of (N,3) points to (N,2) continuous (u,v)."""
    u = intr.fx * pts[:, 0] / pts[:, 2] + intr.cx
    v = intr.fy * pts[:, 1] / pts[:, 2] + intr.cy
    return np.stack([u, v], axis=1)


@dataclass
class _Placed:
    cls: ObjectClass
    center: np.ndarray  # (x, y_center, z)
    box: np.ndarray     # clipped image box


def _cuboid_box(cls: ObjectClass, x: float, z: float, intr: CameraIntrinsics):
    """Project the cuboid at lateral x, forward z; return (clipped, unclipped) boxes."""
    hx, hz = cls.width / 2, cls.length / 2
    y_top, y_bot = GROUND_Y - cls.height, GROUND_Y
    corners = np.array([
        [x + sx * hx, y, z + sz * hz]
        for sx in (-1, 1) for sz in (-1, 1) for y in (y_top, y_bot)
    ])
    uv = _project(corners, intr)
    raw = np.array([uv[:, 0].min(), uv[:, 1].min(), uv[:, 0].max(), uv[:, 1].max()])
    clipped = np.array([
        max(raw[0], 0.0), max(raw[1], 0.0),
        min(raw[2], float(intr.width)), min(raw[3], float(intr.height)),
    ])
    return clipped, raw


def _front_center(obj: _Placed) -> np.ndarray:
    c = obj.center
    return np.array([c[0], c[1], c[2] - obj.cls.length / 2])


def _place_objects(spec: SceneSpec, intr: CameraIntrinsics, rng) -> list:
    """Rejection-sample object placements; objects that cannot be placed are dropped."""
    placed = []
    for cls in spec.classes:
        lo, hi = cls.count_range
        count = int(rng.integers(lo, hi + 1))
        for _ in range(count):
            for _attempt in range(100):
                x = rng.uniform(*spec.x_range)
                z = rng.uniform(*spec.z_range)
                clipped, raw = _cuboid_box(cls, x, z, intr)
                w, h = clipped[2] - clipped[0], clipped[3] - clipped[1]
                if w < 3.0 or h < 3.0:
                    continue
                raw_area = (raw[2] - raw[0]) * (raw[3] - raw[1])
                if w * h < 0.5 * raw_area:
                    continue  # mostly out of frame
                center = np.array([x, GROUND_Y - cls.height / 2, z])
                fc = _project(np.array([[x, center[1], z - cls.length / 2]]), intr)[0]
                if not (clipped[0] <= fc[0] <= clipped[2] and clipped[1] <= fc[1] <= clipped[3]):
                    continue  # front-face center clipped away
                if any(_box_iou(clipped, p.box) > spec.max_box_overlap for p in placed):
                    continue
                placed.append(_Placed(cls=cls, center=center, box=clipped))
                break
            # after 100 failed attempts the object is dropped, shrinking the count
    return placed


def _sample_object_points(obj: _Placed, spec: SceneSpec, rng) -> np.ndarray:
    """Sample LiDAR returns on the camera-visible faces of one cuboid."""
    cls, c = obj.cls, obj.center
    hx, hz = cls.width / 2, cls.length / 2
    y_top, y_bot = GROUND_Y - cls.height, GROUND_Y
    z_front = c[2] - hz

    faces = [("front", cls.width * cls.height)]
    if c[0] - hx > 0:
        faces.append(("left", cls.length * cls.height))
    elif c[0] + hx < 0:
        faces.append(("right", cls.length * cls.height))

    front_area = faces[0][1]
    n_total = max(3, int(round(spec.point_density * front_area / (z_front * z_front))))
    total_area = sum(a for _, a in faces)

    pts = []
    budget = n_total
    for i, (name, area) in enumerate(faces):
        n = budget if i == len(faces) - 1 else int(round(n_total * area / total_area))
        n = min(n, budget)
        budget -= n
        if n <= 0:
            continue
        a = rng.uniform(0.0, 1.0, size=(n, 2))
        if name == "front":
            xs = c[0] - hx + a[:, 0] * cls.width
            ys = y_top + a[:, 1] * cls.height
            zs = np.full(n, z_front)
        else:
            xs = np.full(n, c[0] - hx if name == "left" else c[0] + hx)
            ys = y_top + a[:, 1] * cls.height
            zs = c[2] - hz + a[:, 0] * cls.length
        pts.append(np.stack([xs, ys, zs], axis=1))
    out = np.concatenate(pts, axis=0)
    keep = rng.uniform(size=len(out)) >= spec.dropout
    out = out[keep]
    # guarantee at least one in-box return per object
    return np.concatenate([out, _front_center(obj)[None, :]], axis=0)


def _sample_ground(spec: SceneSpec, rng) -> np.ndarray:
    n = spec.ground_points
    if n == 0:
        return np.zeros((0, 3))
    z0, z1 = 4.0, 40.0
    u = rng.uniform(size=n)
    # inverse-cdf draw for density proportional to 1/z^2
    z = 1.0 / (1.0 / z0 - u * (1.0 / z0 - 1.0 / z1))
    x = rng.uniform(-12.0, 12.0, size=n)
    pts = np.stack([x, np.full(n, GROUND_Y), z], axis=1)
    keep = rng.uniform(size=n) >= spec.dropout
    return pts[keep]


def _render(placed: list, jitters: np.ndarray, spec: SceneSpec,
            intr: CameraIntrinsics, rng) -> np.ndarray:
    H, W = intr.height, intr.width
    img = np.empty((3, H, W), dtype=np.float32)
    horizon = int(round(intr.cy))
    for ch in range(3):
        img[ch, :horizon, :] = spec.sky_color[ch]
        img[ch, horizon:, :] = spec.ground_color[ch]
    # painter's algorithm: far to near
    order = sorted(range(len(placed)), key=lambda i: -placed[i].center[2])
    for i in order:
        obj = placed[i]
        color = np.array(obj.cls.color, dtype=np.float32) * jitters[i]
        c0, r0 = int(np.floor(obj.box[0])), int(np.floor(obj.box[1]))
        c1, r1 = int(np.ceil(obj.box[2])), int(np.ceil(obj.box[3]))
        r0, r1 = max(r0, 0), min(r1, H)
        c0, c1 = max(c0, 0), min(c1, W)
        for ch in range(3):
            img[ch, r0:r1, c0:c1] = color[ch]
    img += spec.noise_sigma * rng.standard_normal(img.shape, dtype=np.float32)
    np.clip(img, 0.0, 255.0, out=img)
    return img


def generate_scene(spec: SceneSpec, intrinsics: CameraIntrinsics, seed: int) -> Scene:
    rng = stream(seed, "scene")
    placed = _place_objects(spec, intrinsics, rng)
    jitters = np.array([
        1.0 + rng.uniform(-spec.brightness_jitter, spec.brightness_jitter)
        for _ in placed
    ], dtype=np.float32)

    clouds = [_sample_object_points(o, spec, rng) for o in placed]
    clouds.append(_sample_ground(spec, rng))
    cloud = (np.concatenate(clouds, axis=0) if clouds
             else np.zeros((0, 3))).astype(np.float32)

    rgb = _render(placed, jitters, spec, intrinsics, rng)
    gt = [GroundTruthBox(box=o.box.astype(np.float32), cls=o.cls.name) for o in placed]
    return Scene(rgb=rgb, cloud=cloud, gt=gt)


# -- dataset files --------------------------------------------------------------


@dataclass
class DepthStats:
    mean: float
    std: float


@dataclass
class DatasetManifest:
    split: str
    master_seed: int
    intrinsics: CameraIntrinsics
    spec: SceneSpec
    scenes: list  # dicts: index, rgb, cloud, labels, points
    depth_stats: DepthStats | None = None

    def to_dict(self) -> dict:
        d = {
            "format_version": FORMAT_VERSION,
            "split": self.split,
            "master_seed": self.master_seed,
            "intrinsics": self.intrinsics.to_dict(),
            "spec": self.spec.to_dict(),
            "scenes": self.scenes,
            "depth_stats": None,
        }
        if self.depth_stats is not None:
            d["depth_stats"] = {"mean": self.depth_stats.mean, "std": self.depth_stats.std}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        if d.get("format_version") != FORMAT_VERSION:
            raise SceneGenError(f"unsupported manifest version {d.get('format_version')}")
        stats = d.get("depth_stats")
        return cls(
            split=d["split"],
            master_seed=int(d["master_seed"]),
            intrinsics=CameraIntrinsics.from_dict(d["intrinsics"]),
            spec=SceneSpec.from_dict(d["spec"]),
            scenes=d["scenes"],
            depth_stats=DepthStats(stats["mean"], stats["std"]) if stats else None,
        )


def save_manifest(manifest: DatasetManifest, out_dir) -> Path:
    path = Path(out_dir) / "manifest.json"
    with open(path, "w") as f:
        json.dump(manifest.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")
    return path


def load_manifest(data_dir) -> DatasetManifest:
    path = Path(data_dir) / "manifest.json"
    try:
        with open(path) as f:
            return DatasetManifest.from_dict(json.load(f))
    except FileNotFoundError as e:
        raise SceneGenError(f"no manifest at {path}") from e


def save_scene(scene: Scene, out_dir, index: int) -> dict:
    out_dir = Path(out_dir)
    names = {
        "rgb": f"rgb_{index}.bin",
        "cloud": f"cloud_{index}.bin",
        "labels": f"labels_{index}.json",
    }
    scene.rgb.astype("<f4").tofile(out_dir / names["rgb"])
    scene.cloud.astype("<f4").tofile(out_dir / names["cloud"])
    labels = [{"box": [float(v) for v in g.box], "class": g.cls} for g in scene.gt]
    with open(out_dir / names["labels"], "w") as f:
        json.dump(labels, f, indent=1, sort_keys=True)
        f.write("\n")
    return {"index": index, "points": int(len(scene.cloud)), **names}


def load_scene(data_dir, entry: dict, intrinsics: CameraIntrinsics) -> Scene:
    data_dir = Path(data_dir)
    H, W = intrinsics.height, intrinsics.width
    rgb = np.fromfile(data_dir / entry["rgb"], dtype="<f4").reshape(3, H, W)
    cloud = np.fromfile(data_dir / entry["cloud"], dtype="<f4").reshape(-1, 3)
    if len(cloud) != entry["points"]:
        raise SceneGenError(f"{entry['cloud']}: expected {entry['points']} points, "
                            f"found {len(cloud)}")
    with open(data_dir / entry["labels"]) as f:
        labels = json.load(f)
    gt = [GroundTruthBox(box=np.array(l["box"], dtype=np.float32), cls=l["class"])
          for l in labels]
    return Scene(rgb=rgb, cloud=cloud, gt=gt)


def load_split(data_dir):
    """Manifest plus every scene of one dataset directory, in index order."""
    manifest = load_manifest(data_dir)
    scenes = [load_scene(data_dir, entry, manifest.intrinsics)
              for entry in manifest.scenes]
    return manifest, scenes


def scene_seed(master_seed: int, index: int) -> int:
    return derive_seed(master_seed, index)


def compute_depth_stats(scenes, intrinsics: CameraIntrinsics) -> DepthStats:
    """Population mean/std of the dense depth map over a scene list.

    These are the statistics a training split publishes in its manifest and
    every consumer (training, evaluation, attacks) uses to standardize the
    depth channel.
    """
    from fuselab import lidarmap  # deferred: lidarmap type-hints on intrinsics

    if not scenes:
        raise SceneGenError("depth statistics need at least one scene")
    total = 0
    acc = 0.0
    acc2 = 0.0
    for scene in scenes:
        hits = lidarmap.project_points(scene.cloud, intrinsics)
        maps = lidarmap.densify(hits, intrinsics.height, intrinsics.width)
        d = maps.depth.astype(np.float64)
        total += d.size
        acc += d.sum()
        acc2 += (d * d).sum()
    mean = acc / total
    var = max(acc2 / total - mean * mean, 0.0)
    return DepthStats(mean=float(mean), std=float(np.sqrt(var)))


def generate_dataset(spec: SceneSpec, intrinsics: CameraIntrinsics, count: int,
                     master_seed: int, out_dir, split: str = "train") -> DatasetManifest:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out_dir}: {e}") from e

    entries = []
    scenes_for_stats = []
    for i in range(count):
        scene = generate_scene(spec, intrinsics, scene_seed(master_seed, i))
        entries.append(save_scene(scene, out_dir, i))
        if split == "train":
            scenes_for_stats.append(scene)

    stats = None
    if split == "train" and count > 0:
        stats = compute_depth_stats(scenes_for_stats, intrinsics)

    manifest = DatasetManifest(split=split, master_seed=master_seed,
                               intrinsics=intrinsics, spec=spec,
                               scenes=entries, depth_stats=stats)
    save_manifest(manifest, out_dir)
    return manifest
