"""Detection metrics: IoU, per-class average precision, robustness curves.

Detections are pooled across the whole split per class and swept once by
descending score; matching stays within each detection's own scene. AP is
the area under the interpolated precision-recall curve (all-point precision
envelope). Classes with no ground truth are excluded from the mean.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fuselab import attacks, detector
from fuselab.ndlab import ParamStore, Tape
from fuselab.rng import derive_seed
from fuselab.scenegen import CLASS_NAMES, CameraIntrinsics, Scene


class EvalError(ValueError):
    pass


def iou(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a[2] <= a[0] or a[3] <= a[1] or b[2] <= b[0] or b[3] <= b[1]:
        raise EvalError(f"degenerate box: {a.tolist()} vs {b.tolist()}")
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0:
        return 0.0
    union = ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)
    return float(inter / union)


@dataclass
class ClassEval:
    ap: float | None       # None when the class has no ground truth
    n_gt: int
    n_det: int
    recalls: np.ndarray
    precisions: np.ndarray


@dataclass
class APResult:
    per_class: dict  # class name -> ClassEval

    @property
    def map(self) -> float:
        aps = [ce.ap for ce in self.per_class.values() if ce.ap is not None]
        return float(np.mean(aps)) if aps else 0.0

    def ap_of(self, name: str) -> float | None:
        return self.per_class[name].ap


def match_detections(entries: list, gts: dict, iou_thresh: float):
    """Greedy per-scene matching of score-sorted detections.

    ``entries`` are (score, scene_id, box) tuples; ``gts`` maps scene_id to a
    list of boxes. Returns (tp_flags, order) where order indexes entries by
    descending score, ties by insertion order.
    """
    order = sorted(range(len(entries)), key=lambda i: (-entries[i][0], i))
    matched = {sid: np.zeros(len(boxes), dtype=bool) for sid, boxes in gts.items()}
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        _, sid, box = entries[i]
        boxes = gts.get(sid, [])
        best_iou, best_j = 0.0, -1
        for j, gbox in enumerate(boxes):
            if matched[sid][j]:
                continue
            v = iou(box, gbox)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_thresh:
            matched[sid][best_j] = True
            tp[rank] = True
    return tp, order


def average_precision(entries: list, gts: dict, iou_thresh: float = 0.5) -> ClassEval:
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return ClassEval(ap=None, n_gt=0, n_det=len(entries),
                         recalls=np.zeros(0), precisions=np.zeros(0))
    if not entries:
        return ClassEval(ap=0.0, n_gt=n_gt, n_det=0,
                         recalls=np.zeros(0), precisions=np.zeros(0))

    tp, _ = match_detections(entries, gts, iou_thresh)
    tp_cum = np.cumsum(tp.astype(np.float64))
    fp_cum = np.cumsum((~tp).astype(np.float64))
    rec = tp_cum / n_gt
    prec = tp_cum / (tp_cum + fp_cum)

    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    step = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    ap = float(np.sum((mrec[step] - mrec[step - 1]) * mpre[step]))
    return ClassEval(ap=ap, n_gt=n_gt, n_det=len(entries), recalls=rec, precisions=prec)


def predict_scene(store: ParamStore, config: detector.DetectorConfig,
                  rgb01: np.ndarray | None, lidar: np.ndarray | None) -> np.ndarray:
    tape = Tape()
    leaves = store.leaves(tape)
    r = tape.leaf(rgb01) if rgb01 is not None else None
    l = tape.leaf(lidar) if lidar is not None else None
    return detector.forward(leaves, config, r, l).data


# AP sweeps the full precision-recall curve, so evaluation decodes at a much
# lower score threshold than the detector's operational default; detections
# the deploy threshold would drop still take their place in the ranking.
EVAL_SCORE_THRESH = 0.01


def evaluate_map(store: ParamStore, config: detector.DetectorConfig, scenes: list,
                 intrinsics: CameraIntrinsics, stats, perturb=None,
                 iou_thresh: float = 0.5) -> APResult:
    """mAP over a split; ``perturb(index, scene) -> (rgb01, lidar)`` if given."""
    if not scenes:
        raise EvalError("empty evaluation split")
    entries = {name: [] for name in CLASS_NAMES}
    gts = {name: {} for name in CLASS_NAMES}
    H, W = intrinsics.height, intrinsics.width
    for si, scene in enumerate(scenes):
        for name in CLASS_NAMES:
            gts[name][si] = [g.box for g in scene.gt if g.cls == name]
        if perturb is None:
            rgb01, lidar = detector.scene_inputs(scene, intrinsics, stats)
        else:
            rgb01, lidar = perturb(si, scene)
        pred = predict_scene(store, config,
                             rgb01 if config.needs_rgb else None,
                             lidar if config.needs_lidar else None)
        for d in detector.decode(pred, H, W, config, score_thresh=EVAL_SCORE_THRESH):
            entries[d.cls].append((d.score, si, d.box))
    per_class = {name: average_precision(entries[name], gts[name], iou_thresh)
                 for name in CLASS_NAMES}
    return APResult(per_class=per_class)


# -- robustness curves ------------------------------------------------------------


@dataclass
class RobustnessCurve:
    budgets: list
    maps: list
    per_class: list          # one {class: ap or None} dict per budget
    attack: dict             # resolved attack descriptor
    model: dict              # model descriptor
    seed: int
    extra: dict = field(default_factory=dict)

    def as_rows(self) -> list:
        rows = []
        for b, m, pc in zip(self.budgets, self.maps, self.per_class):
            rows.append([b, m] + [pc[name] for name in CLASS_NAMES])
        return rows


def scaled_spec(base: attacks.AttackSpec, budget: float) -> attacks.AttackSpec:
    """Rescale the attacked channel's bound and step to a curve budget."""
    eps = budget if "image" in base.channels else base.eps_image
    gamma = budget if "lidar" in base.channels else base.gamma_lidar
    return attacks.AttackSpec(
        channels=base.channels,
        eps_image=eps,
        gamma_lidar=gamma,
        steps=base.steps,
        step_image=eps / 4.0,
        step_lidar=gamma / 4.0,
        mask_mode=base.mask_mode,
        rand_init=base.rand_init,
    )


def attack_perturb_fn(store, config, intrinsics, stats, spec, seed):
    """evaluate_map hook running a white-box attack per scene."""

    def perturb(si, scene):
        pert = attacks.pgd_attack(store, config, scene, intrinsics, stats, spec,
                                  seed=derive_seed(seed, "attack", si))
        rgb_adv, lidar_adv = attacks.apply_perturbation(scene, pert, intrinsics, stats)
        return rgb_adv / np.float32(255.0), lidar_adv

    return perturb


def precompute_inputs(scenes, perturb, jobs: int = 1) -> list:
    """Run a perturb hook over all scenes, optionally on a thread pool.

    Scenes are independent, so the result is identical for any job count;
    outputs are merged back in scene order.
    """
    if jobs and jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(perturb, range(len(scenes)), scenes))
    return [perturb(si, scene) for si, scene in enumerate(scenes)]


def robustness_curve(store, config, scenes, intrinsics, stats,
                     base_spec: attacks.AttackSpec, budgets: list,
                     seed: int, iou_thresh: float = 0.5,
                     jobs: int = 1) -> RobustnessCurve:
    if 0 not in budgets and 0.0 not in budgets:
        raise EvalError("budget axis must include 0")
    maps_out, per_class = [], []
    for budget in budgets:
        if budget == 0:
            res = evaluate_map(store, config, scenes, intrinsics, stats,
                               iou_thresh=iou_thresh)
        else:
            spec = scaled_spec(base_spec, float(budget))
            hook = attack_perturb_fn(store, config, intrinsics, stats, spec,
                                     derive_seed(seed, "budget", repr(float(budget))))
            inputs = precompute_inputs(scenes, hook, jobs=jobs)
            res = evaluate_map(store, config, scenes, intrinsics, stats,
                               perturb=lambda si, scene: inputs[si],
                               iou_thresh=iou_thresh)
        maps_out.append(res.map)
        per_class.append({name: res.ap_of(name) for name in CLASS_NAMES})
    return RobustnessCurve(
        budgets=list(budgets), maps=maps_out, per_class=per_class,
        attack={"channels": list(base_spec.channels), "mask_mode": base_spec.mask_mode,
                "steps": base_spec.steps, "rand_init": base_spec.rand_init},
        model={"fusion": config.fusion}, seed=seed)


def write_curve_csv(curve: RobustnessCurve, path, sidecar: dict | None = None) -> None:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["budget", "map"] + [f"ap_{name}" for name in CLASS_NAMES])
        for row in curve.as_rows():
            w.writerow([repr(float(v)) if v is not None else "" for v in row])
    meta = {
        "budgets": curve.budgets,
        "attack": curve.attack,
        "model": curve.model,
        "seed": curve.seed,
    }
    if sidecar:
        meta.update(sidecar)
    with open(path.with_suffix(path.suffix + ".json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")
