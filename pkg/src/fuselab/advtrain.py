"""Training loops: clean SGD and fast adversarial training.

Adversarial variants differ only in which channels the inner attack touches
and whether it is confined to car boxes. The inner solver is single-step
sign-gradient with random initialization inside the feasible box; the outer
update treats the perturbed inputs as fixed data.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from fuselab import attacks, evalkit
from fuselab.detector import (DetectorConfig, assign_targets, build_params,
                              forward, loss, scene_inputs)
from fuselab.ndlab import NDLabError, ParamStore, Tape
from fuselab.rng import derive_seed, stream
from fuselab.scenegen import CameraIntrinsics, DepthStats, Scene

# variant -> (attacked channels, mask mode)
VARIANTS = {
    "at-image": (("image",), "full"),
    "at-car": (("image",), "car_boxes"),
    "at-lidar": (("lidar",), "full"),
    "at-lidar-car": (("lidar",), "car_boxes"),
    "at-joint": (("image", "lidar"), "full"),
    "at-joint-car": (("image", "lidar"), "car_boxes"),
}

SCHEDULE_KINDS = ("cosine", "cyclic")


class AdvTrainError(ValueError):
    pass


class DivergenceError(AdvTrainError):
    """Training hit non-finite numbers; carries epoch/step context."""


@dataclass(frozen=True)
class LRSchedule:
    kind: str = "cosine"
    start: float = 0.01        # cosine only
    end: float = 0.002         # cosine floor
    max_lr: float = 1e-3       # cyclic only
    peak_fraction: float = 0.4

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise AdvTrainError(f"unknown lr schedule {self.kind!r}")
        if self.kind == "cosine" and (self.start < 0 or self.end < 0):
            raise AdvTrainError("cosine schedule needs start >= 0, end >= 0")
        if self.kind == "cyclic":
            if self.max_lr <= 0:
                raise AdvTrainError("cyclic schedule needs max_lr > 0")
            if not 0.0 < self.peak_fraction < 1.0:
                raise AdvTrainError("peak_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        if self.kind == "cosine":
            return {"kind": "cosine", "start": self.start, "end": self.end}
        return {"kind": "cyclic", "max_lr": self.max_lr,
                "peak_fraction": self.peak_fraction}

    @classmethod
    def from_dict(cls, d: dict) -> "LRSchedule":
        return cls(**d)


def lr_at(step: int, total_steps: int, schedule: LRSchedule) -> float:
    """Learning rate for a zero-based step index."""
    if not 0 <= step < total_steps:
        raise AdvTrainError(f"step {step} outside [0, {total_steps})")
    if schedule.kind == "cosine":
        value = schedule.start * (1.0 + np.cos(np.pi * step / total_steps)) / 2.0
        return float(max(value, schedule.end))
    peak = schedule.peak_fraction * total_steps
    if step <= peak:
        return float(schedule.max_lr * step / peak)
    return float(schedule.max_lr * (total_steps - step) / (total_steps - peak))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    schedule: LRSchedule = field(default_factory=LRSchedule)
    at_variant: str | None = None
    eps_image: float = 2.0
    gamma_lidar: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise AdvTrainError("epochs must be at least 1")
        if self.batch_size < 1:
            raise AdvTrainError("batch_size must be at least 1")
        if self.at_variant is not None and self.at_variant not in VARIANTS:
            raise AdvTrainError(
                f"unknown adversarial-training variant {self.at_variant!r}; "
                f"choose one of {sorted(VARIANTS)}")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size,
                "schedule": self.schedule.to_dict(), "at_variant": self.at_variant,
                "eps_image": self.eps_image, "gamma_lidar": self.gamma_lidar,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "schedule" in d and isinstance(d["schedule"], dict):
            d["schedule"] = LRSchedule.from_dict(d["schedule"])
        return cls(**d)


def check_variant(model_config: DetectorConfig, variant: str | None) -> None:
    """A variant may only attack channels the model consumes."""
    if variant is None:
        return
    channels, _ = VARIANTS[variant]
    if "image" in channels and not model_config.needs_rgb:
        raise AdvTrainError(f"{variant} attacks the image but fusion mode "
                            f"{model_config.fusion!r} ignores it")
    if "lidar" in channels and not model_config.needs_lidar:
        raise AdvTrainError(f"{variant} attacks the point cloud but fusion mode "
                            f"{model_config.fusion!r} ignores it")


def attack_spec_for(config: TrainConfig) -> attacks.AttackSpec:
    """The single-step random-start inner attack for an AT variant."""
    channels, mask_mode = VARIANTS[config.at_variant]
    return attacks.AttackSpec(
        channels=channels,
        eps_image=config.eps_image,
        gamma_lidar=config.gamma_lidar,
        steps=1,
        step_image=config.eps_image,
        step_lidar=config.gamma_lidar,
        mask_mode=mask_mode,
        rand_init=True,
    )


def at_inner(scene: Scene, store: ParamStore, model_config: DetectorConfig,
             config: TrainConfig, intrinsics: CameraIntrinsics,
             stats: DepthStats | None, seed: int):
    """Perturbed (rgb01, lidar) inputs for one scene under the config's variant."""
    if config.at_variant is None:
        raise AdvTrainError("at_inner needs an adversarial variant")
    spec = attack_spec_for(config)
    pert = attacks.pgd_attack(store, model_config, scene, intrinsics, stats,
                              spec, seed=seed)
    rgb_adv, lidar_adv = attacks.apply_perturbation(scene, pert, intrinsics, stats)
    return rgb_adv / np.float32(255.0), lidar_adv


@dataclass
class TrainReport:
    epochs: list                 # per-epoch dicts: losses and last-step lr
    lr_trace: list               # lr at every optimizer step
    final_val_map: float | None
    wall_time_s: float
    dropped_objects: int
    steps_per_epoch: int

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "lr_trace": self.lr_trace,
                "final_val_map": self.final_val_map,
                "wall_time_s": self.wall_time_s,
                "dropped_objects": self.dropped_objects,
                "steps_per_epoch": self.steps_per_epoch}


def train(model_config: DetectorConfig, scenes: list, intrinsics: CameraIntrinsics,
          stats: DepthStats | None, config: TrainConfig, val_scenes=None,
          epoch_callback=None):
    """SGD over seeded epoch shuffles; returns (ParamStore, TrainReport).

    With an at_variant every scene in every batch is perturbed by the inner
    attack before the loss is computed; gradients flow only through the model
    parameters, never back into the perturbation.
    """
    if not scenes:
        raise AdvTrainError("empty training split")
    check_variant(model_config, config.at_variant)
    if model_config.needs_lidar and stats is None:
        raise AdvTrainError("fusion mode needs depth statistics")

    t0 = time.perf_counter()
    H, W = intrinsics.height, intrinsics.width
    store = build_params(model_config, seed=config.seed)

    targets = [assign_targets(s.gt, H, W, model_config) for s in scenes]
    dropped = sum(t.dropped for t in targets)

    variant = config.at_variant
    attacked = VARIANTS[variant][0] if variant else ()
    # inputs that no attack touches can be prepared once
    clean_inputs = []
    for s in scenes:
        rgb01, lidar = scene_inputs(s, intrinsics, stats) if model_config.needs_lidar \
            else (s.rgb / np.float32(255.0), None)
        clean_inputs.append((rgb01, lidar))

    n = len(scenes)
    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * steps_per_epoch

    lr_trace = []
    epoch_rows = []
    step_index = 0
    for epoch in range(config.epochs):
        perm = stream(config.seed, "shuffle", epoch).permutation(n)
        sums = np.zeros(4, dtype=np.float64)
        last_lr = 0.0
        for b0 in range(0, n, config.batch_size):
            batch = perm[b0:b0 + config.batch_size]
            lr = lr_at(step_index, total_steps, config.schedule)
            lr_trace.append(lr)
            last_lr = lr
            batch_losses = np.zeros(4, dtype=np.float64)
            for idx in batch:
                idx = int(idx)
                scene = scenes[idx]
                try:
                    if variant is not None:
                        rgb01, lidar = at_inner(
                            scene, store, model_config, config, intrinsics, stats,
                            seed=derive_seed(config.seed, "at", epoch, idx))
                    else:
                        rgb01, lidar = clean_inputs[idx]
                    tape = Tape()
                    leaves = store.leaves(tape)
                    pred = forward(
                        leaves, model_config,
                        tape.leaf(rgb01) if model_config.needs_rgb else None,
                        tape.leaf(lidar) if model_config.needs_lidar else None)
                    parts = loss(pred, targets[idx])
                    grads = tape.backward(parts.total)
                except NDLabError as e:
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch} step "
                        f"{step_index % steps_per_epoch} (scene {idx}): {e}") from e
                store.accumulate(grads, leaves)
                batch_losses += [parts.total.item(), parts.obj.item(),
                                 parts.cls.item(), parts.reg.item()]
            batch_losses /= len(batch)
            if not np.all(np.isfinite(batch_losses)):
                raise DivergenceError(f"non-finite loss at epoch {epoch} step "
                                      f"{step_index % steps_per_epoch}")
            store.scale_grads(np.float32(1.0 / len(batch)))
            store.sgd_step(np.float32(lr))
            sums += batch_losses
            step_index += 1
        row = {"epoch": epoch,
               "loss_total": float(sums[0] / steps_per_epoch),
               "loss_obj": float(sums[1] / steps_per_epoch),
               "loss_cls": float(sums[2] / steps_per_epoch),
               "loss_reg": float(sums[3] / steps_per_epoch),
               "lr": float(last_lr)}
        epoch_rows.append(row)
        if epoch_callback is not None:
            epoch_callback(row, store)

    final_map = None
    if val_scenes:
        final_map = evalkit.evaluate_map(store, model_config, val_scenes,
                                         intrinsics, stats).map
    report = TrainReport(epochs=epoch_rows, lr_trace=lr_trace,
                         final_val_map=final_map,
                         wall_time_s=time.perf_counter() - t0,
                         dropped_objects=dropped,
                         steps_per_epoch=steps_per_epoch)
    return store, report
