"""Single-stage grid detectors over RGB, depth, or fused inputs.

One prediction per stride-8 cell: an objectness logit, three class logits,
and four box parameters (tx, ty are within-cell offsets through a sigmoid,
tw, th are log sizes relative to the full image). Fusion modes share this
head; they differ in how sensor channels reach it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fuselab import lidarmap
from fuselab.ndlab import ParamStore, Tensor, he_uniform_init, ops
from fuselab.rng import stream
from fuselab.scenegen import CLASS_NAMES, CameraIntrinsics, Scene

FUSION_MODES = ("rgb", "depth", "early", "late")

# (name, in_ch, out_ch, kernel, stride) per fusion mode; head follows
_SINGLE_BODY = ((16, 3, 1), (32, 3, 2), (64, 3, 2), (64, 3, 2))
_LATE_BODY = ((16, 3, 2), (32, 3, 2), (32, 3, 2))

HEAD_CHANNELS = 1 + len(CLASS_NAMES) + 4


class DetectorError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    fusion: str = "early"
    stride: int = 8
    leaky_slope: float = 0.1
    score_thresh: float = 0.1
    nms_iou: float = 0.5

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise DetectorError(f"unknown fusion mode {self.fusion!r}")

    @property
    def needs_rgb(self) -> bool:
        return self.fusion in ("rgb", "early", "late")

    @property
    def needs_lidar(self) -> bool:
        return self.fusion in ("depth", "early", "late")

    def to_dict(self) -> dict:
        return {"fusion": self.fusion, "stride": self.stride,
                "leaky_slope": self.leaky_slope,
                "score_thresh": self.score_thresh, "nms_iou": self.nms_iou}

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(**d)


def _layer_table(config: DetectorConfig) -> list:
    """(name, in_ch, out_ch, kernel, stride) for every conv in the model."""
    if config.fusion == "late":
        layers = []
        cin = 3
        for i, (cout, k, s) in enumerate(_LATE_BODY, 1):
            layers.append((f"rgb{i}", cin, cout, k, s))
            cin = cout
        cin = 2
        for i, (cout, k, s) in enumerate(_LATE_BODY, 1):
            layers.append((f"lidar{i}", cin, cout, k, s))
            cin = cout
        layers.append(("fuse", 2 * _LATE_BODY[-1][0], 64, 3, 1))
        layers.append(("head", 64, HEAD_CHANNELS, 1, 1))
        return layers
    cin = {"rgb": 3, "depth": 2, "early": 5}[config.fusion]
    layers = []
    for i, (cout, k, s) in enumerate(_SINGLE_BODY, 1):
        layers.append((f"conv{i}", cin, cout, k, s))
        cin = cout
    layers.append(("head", cin, HEAD_CHANNELS, 1, 1))
    return layers


def build_params(config: DetectorConfig, seed: int) -> ParamStore:
    """He-uniform weights, zero biases, one RNG stream per parameter."""
    store = ParamStore()
    for name, cin, cout, k, _ in _layer_table(config):
        fan_in = cin * k * k
        w = he_uniform_init((cout, cin, k, k), fan_in, stream(seed, "init", name))
        store.add(f"{name}.w", w)
        store.add(f"{name}.b", np.zeros(cout, dtype=np.float32))
    return store


def infer_fusion(store: ParamStore) -> str:
    """Fusion mode a checkpoint was built for, read off its layer layout."""
    if "rgb1.w" in store:
        return "late"
    if "conv1.w" in store:
        cin = store["conv1.w"].shape[1]
        by_cin = {3: "rgb", 2: "depth", 5: "early"}
        if cin in by_cin:
            return by_cin[cin]
    raise DetectorError("checkpoint does not match any known detector layout")


def check_checkpoint(store: ParamStore, config: DetectorConfig) -> None:
    """Parameter names and shapes must match what the config would build."""
    expected = {}
    for name, cin, cout, k, _ in _layer_table(config):
        expected[f"{name}.w"] = (cout, cin, k, k)
        expected[f"{name}.b"] = (cout,)
    names = list(store.names())
    if set(names) != set(expected):
        raise DetectorError(
            f"checkpoint layout does not match fusion mode {config.fusion!r}: "
            f"has {sorted(names)}, wants {sorted(expected)}")
    for name, shape in expected.items():
        if store[name].shape != shape:
            raise DetectorError(f"checkpoint parameter {name} has shape "
                                f"{store[name].shape}, expected {shape}")


def forward(leaves: dict, config: DetectorConfig,
            rgb: Tensor | None = None, lidar: Tensor | None = None) -> Tensor:
    """Raw grid prediction from tape tensors.

    ``rgb`` must already be scaled to [0, 1]; ``lidar`` is the normalized
    two-channel map stack. ``leaves`` maps parameter names to tape leaves.
    """
    if config.needs_rgb and rgb is None:
        raise DetectorError(f"fusion mode {config.fusion!r} requires an rgb input")
    if config.needs_lidar and lidar is None:
        raise DetectorError(f"fusion mode {config.fusion!r} requires a lidar input")

    def conv(name, x, stride):
        return ops.conv2d(x, leaves[f"{name}.w"], leaves[f"{name}.b"], stride=stride)

    slope = config.leaky_slope
    if config.fusion == "late":
        def branch(prefix, x):
            for i, (_, _, s) in enumerate(_LATE_BODY, 1):
                x = ops.leaky_relu(conv(f"{prefix}{i}", x, s), slope)
            return x

        feat = ops.concat_channels([branch("rgb", rgb), branch("lidar", lidar)])
        feat = ops.leaky_relu(conv("fuse", feat, 1), slope)
        return conv("head", feat, 1)

    if config.fusion == "rgb":
        x = rgb
    elif config.fusion == "depth":
        x = lidar
    else:
        x = ops.concat_channels([rgb, lidar])
    for i, (_, _, s) in enumerate(_SINGLE_BODY, 1):
        x = ops.leaky_relu(conv(f"conv{i}", x, s), slope)
    return conv("head", x, 1)


# -- target assignment and loss --------------------------------------------------


@dataclass
class Targets:
    obj: np.ndarray       # (1, Hs, Ws) float32, 1 at positive cells
    cls: np.ndarray       # (K, M) one-hot per positive
    box: np.ndarray       # (4, M) tx, ty, tw, th per positive
    rows: np.ndarray      # (M,) positive cell rows
    cols: np.ndarray      # (M,) positive cell cols
    dropped: int = 0      # objects lost to cell collisions

    @property
    def num_pos(self) -> int:
        return len(self.rows)


def assign_targets(gt: list, height: int, width: int,
                   config: DetectorConfig) -> Targets:
    """One positive cell per object: the cell holding the box center.

    Collisions keep the larger-area box. tw, th are log sizes relative to
    the whole image, so a full-image box encodes to zero.
    """
    s = config.stride
    hs, ws = height // s, width // s
    chosen = {}  # (row, col) -> (area, gt index)
    dropped = 0
    for i, g in enumerate(gt):
        b = g.box
        cx, cy = (b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0
        col = min(int(cx // s), ws - 1)
        row = min(int(cy // s), hs - 1)
        area = float((b[2] - b[0]) * (b[3] - b[1]))
        key = (row, col)
        if key in chosen:
            dropped += 1
            if area <= chosen[key][0]:
                continue
        chosen[key] = (area, i)

    keys = sorted(chosen)  # deterministic positive ordering
    M = len(keys)
    obj = np.zeros((1, hs, ws), dtype=np.float32)
    cls = np.zeros((len(CLASS_NAMES), M), dtype=np.float32)
    box = np.zeros((4, M), dtype=np.float32)
    rows = np.zeros(M, dtype=np.int64)
    cols = np.zeros(M, dtype=np.int64)
    for m, (row, col) in enumerate(keys):
        _, i = chosen[(row, col)]
        g = gt[i]
        b = g.box
        cx, cy = (b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0
        obj[0, row, col] = 1.0
        cls[CLASS_NAMES.index(g.cls), m] = 1.0
        box[0, m] = cx / s - col
        box[1, m] = cy / s - row
        box[2, m] = np.log((b[2] - b[0]) / width)
        box[3, m] = np.log((b[3] - b[1]) / height)
        rows[m] = row
        cols[m] = col
    return Targets(obj=obj, cls=cls, box=box, rows=rows, cols=cols, dropped=dropped)


REG_WEIGHT = 5.0


@dataclass
class LossParts:
    total: Tensor
    obj: Tensor
    cls: Tensor
    reg: Tensor


def loss_regression(pred: Tensor, targets: Targets) -> Tensor:
    """Smooth-L1 over box parameters at positive cells, averaged per positive."""
    tape = pred.tape
    if targets.num_pos == 0:
        return tape.leaf(np.zeros((), dtype=np.float32))
    raw = ops.gather_pixels(ops.slice_channels(pred, 4, 8), targets.rows, targets.cols)
    txy = ops.sigmoid(ops.slice_channels(raw, 0, 2))
    twh = ops.slice_channels(raw, 2, 4)
    pred_box = ops.concat_channels([txy, twh])
    return ops.smooth_l1(pred_box, targets.box, normalizer=float(targets.num_pos))


def loss(pred: Tensor, targets: Targets) -> LossParts:
    tape = pred.tape
    obj = ops.bce_with_logits(ops.slice_channels(pred, 0, 1), targets.obj)
    if targets.num_pos > 0:
        logits = ops.gather_pixels(ops.slice_channels(pred, 1, 4),
                                   targets.rows, targets.cols)
        cls = ops.softmax_cross_entropy(logits, targets.cls)
    else:
        cls = tape.leaf(np.zeros((), dtype=np.float32))
    reg = loss_regression(pred, targets)
    total = ops.add(obj, ops.add(cls, ops.scale(reg, REG_WEIGHT)))
    return LossParts(total=total, obj=obj, cls=cls, reg=reg)


# -- decoding ---------------------------------------------------------------------


@dataclass
class Detection:
    box: np.ndarray  # [x_min, y_min, x_max, y_max] pixels
    cls: str
    score: float


def _sigmoid_np(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _nms(dets: list, iou_thresh: float) -> list:
    kept = []
    for d in dets:
        if all(_iou_np(d.box, k.box) < iou_thresh for k in kept):
            kept.append(d)
    return kept


def _iou_np(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0:
        return 0.0
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / ua)


def decode(pred: np.ndarray, height: int, width: int, config: DetectorConfig,
           score_thresh: float | None = None,
           iou_thresh: float | None = None) -> list:
    """Grid prediction to a deterministic, NMS-filtered detection list."""
    score_thresh = config.score_thresh if score_thresh is None else score_thresh
    iou_thresh = config.nms_iou if iou_thresh is None else iou_thresh
    K = len(CLASS_NAMES)
    hs, ws = pred.shape[1], pred.shape[2]
    s = config.stride

    obj = _sigmoid_np(pred[0].astype(np.float64))
    logits = pred[1:1 + K].astype(np.float64)
    logits = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=0, keepdims=True)
    cls_idx = probs.argmax(axis=0)  # first max wins ties
    cls_prob = probs.max(axis=0)
    score = obj * cls_prob

    tx = _sigmoid_np(pred[1 + K].astype(np.float64))
    ty = _sigmoid_np(pred[2 + K].astype(np.float64))
    bw = width * np.exp(np.minimum(pred[3 + K].astype(np.float64), 4.0))
    bh = height * np.exp(np.minimum(pred[4 + K].astype(np.float64), 4.0))

    cand = []
    for row in range(hs):
        for col in range(ws):
            sc = score[row, col]
            if sc < score_thresh:
                continue
            cx = (col + tx[row, col]) * s
            cy = (row + ty[row, col]) * s
            w2, h2 = bw[row, col] / 2, bh[row, col] / 2
            box = np.array([
                max(cx - w2, 0.0), max(cy - h2, 0.0),
                min(cx + w2, float(width)), min(cy + h2, float(height)),
            ], dtype=np.float32)
            if box[0] >= box[2] or box[1] >= box[3]:
                continue
            cell = row * ws + col
            cand.append((-float(sc), cell, Detection(
                box=box, cls=CLASS_NAMES[cls_idx[row, col]], score=float(sc))))
    cand.sort(key=lambda t: (t[0], t[1]))

    out = []
    for name in CLASS_NAMES:
        out.extend(_nms([d for _, _, d in cand if d.cls == name], iou_thresh))
    out.sort(key=lambda d: -d.score)
    return out


# -- scene plumbing ---------------------------------------------------------------


def scene_inputs(scene: Scene, intrinsics: CameraIntrinsics, stats):
    """Network-ready arrays: rgb scaled to [0,1] and normalized lidar maps."""
    rgb = (scene.rgb / np.float32(255.0)).astype(np.float32)
    _, maps = lidarmap.scene_maps(scene.cloud, intrinsics)
    return rgb, lidarmap.normalize_depth(maps, stats)
