"""Seeded synthetic action dataset: a 15-joint skeleton driven by per-class sinusoidal joint angles.

Each class fixes, for every degree of freedom, a cycle count, amplitude,
phase and offset. Samples differ by a time shift, amplitude and speed
jitter, bone-length scale and positional noise. Because the degrees of
freedom oscillate at different rates, one frame of a partly observed body
does not pin down the missing limbs; the whole sequence does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ActionSequence, SkeletonTopology

JOINT_NAMES = (
    "pelvis",
    "chest",
    "head",
    "lshoulder",
    "lelbow",
    "lwrist",
    "rshoulder",
    "relbow",
    "rwrist",
    "lhip",
    "lknee",
    "lankle",
    "rhip",
    "rknee",
    "rankle",
)
PARENTS = (-1, 0, 1, 1, 3, 4, 1, 6, 7, 0, 9, 10, 0, 12, 13)
LIMBS = {
    "left_arm": (3, 4, 5),
    "right_arm": (6, 7, 8),
    "left_leg": (9, 10, 11),
    "right_leg": (12, 13, 14),
}
# torso lean, torso yaw, then (swing, abduction, bend) per arm and leg
DOF_NAMES = (
    "torso_lean",
    "torso_yaw",
    *(f"{limb}_{d}" for limb in LIMBS for d in ("swing", "abduct", "bend")),
)


def synthetic_topology() -> SkeletonTopology:
    return SkeletonTopology(list(JOINT_NAMES), 0, {k: list(v) for k, v in LIMBS.items()}, list(PARENTS))


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    o, i = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([i, o, o], -1), np.stack([o, c, -s], -1), np.stack([o, s, c], -1)], -2)


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    o, i = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([c, o, s], -1), np.stack([o, i, o], -1), np.stack([-s, o, c], -1)], -2)


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    o, i = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([c, -s, o], -1), np.stack([s, c, o], -1), np.stack([o, o, i], -1)], -2)


def _apply(r, v):
    return np.einsum("nij,j->ni", r, v)


def forward_kinematics(angles: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Joint positions ``(N, 15, 3)`` in meters from DOF angles ``(N, 14)``; pelvis at the origin."""
    n = len(angles)
    a = dict(zip(DOF_NAMES, angles.T))
    pos = np.zeros((n, len(JOINT_NAMES), 3))
    torso = np.einsum("nij,njk->nik", _ry(a["torso_yaw"]), _rx(a["torso_lean"]))
    pos[:, 1] = _apply(torso, np.array([0.0, 0.5, 0.0]) * scale)
    pos[:, 2] = pos[:, 1] + _apply(torso, np.array([0.0, 0.25, 0.0]) * scale)
    down = np.array([0.0, -1.0, 0.0])
    for side, sign in (("left", 1.0), ("right", -1.0)):
        arm = LIMBS[f"{side}_arm"]
        pos[:, arm[0]] = pos[:, 1] + _apply(torso, np.array([0.18 * sign, 0.0, 0.0]) * scale)
        upper = torso @ _rx(a[f"{side}_arm_swing"]) @ _rz(sign * a[f"{side}_arm_abduct"])
        pos[:, arm[1]] = pos[:, arm[0]] + _apply(upper, 0.3 * scale * down)
        fore = upper @ _rx(-np.abs(a[f"{side}_arm_bend"]))
        pos[:, arm[2]] = pos[:, arm[1]] + _apply(fore, 0.27 * scale * down)
        leg = LIMBS[f"{side}_leg"]
        pos[:, leg[0]] = np.array([0.1 * sign, -0.05, 0.0]) * scale
        thigh = _rx(a[f"{side}_leg_swing"]) @ _rz(sign * a[f"{side}_leg_abduct"])
        pos[:, leg[1]] = pos[:, leg[0]] + _apply(thigh, 0.42 * scale * down)
        shin = thigh @ _rx(np.abs(a[f"{side}_leg_bend"]))
        pos[:, leg[2]] = pos[:, leg[1]] + _apply(shin, 0.4 * scale * down)
    return pos


@dataclass(frozen=True)
class ClassMotion:
    cycles: np.ndarray
    amplitude: np.ndarray
    phase: np.ndarray
    offset: np.ndarray

    def angles(self, frames: int, shift: float, amp_scale, speed: float, phase_jitter=0.0) -> np.ndarray:
        t = (np.arange(frames)[:, None] / frames) * speed + shift
        return self.offset + amp_scale * self.amplitude * np.sin(2 * np.pi * self.cycles * t + self.phase + phase_jitter)


def class_motions(classes: int, seed=0, spread: float = 0.5, max_cycles: int = 3) -> list[ClassMotion]:
    """Classes are perturbations of one shared base motion; ``spread`` scales how far apart they sit."""
    rng = np.random.default_rng([int(seed), 1])
    dof = len(DOF_NAMES)
    base = ClassMotion(
        cycles=rng.integers(1, max_cycles + 1, size=dof).astype(float),
        amplitude=rng.uniform(0.2, 0.8, size=dof),
        phase=rng.uniform(0, 2 * np.pi, size=dof),
        offset=rng.uniform(-0.3, 0.3, size=dof),
    )
    return [
        ClassMotion(
            cycles=base.cycles,
            amplitude=base.amplitude * np.exp(spread * rng.normal(0.0, 0.3, size=dof)),
            phase=base.phase + spread * rng.normal(0.0, 0.8, size=dof),
            offset=base.offset + spread * rng.normal(0.0, 0.15, size=dof),
        )
        for _ in range(classes)
    ]


@dataclass
class SyntheticDataset:
    train: list
    test: list
    topology: SkeletonTopology
    classes: int


def sample_action(
    motion: ClassMotion,
    label: int,
    frames: int,
    rng: np.random.Generator,
    noise: float = 0.005,
    shift_range: float = 1.0,
    style: float = 0.0,
    speed_jitter: float = 0.1,
    phase_jitter: float = 0.0,
    name: str = "",
) -> ActionSequence:
    """One performance: time shift, speed, amplitude and bone-length jitter, posture offsets, sensor noise."""
    dof = len(DOF_NAMES)
    angles = motion.angles(
        frames,
        shift=rng.uniform(0.0, shift_range),
        amp_scale=rng.uniform(0.8, 1.2) * np.exp(rng.normal(0.0, 0.5 * style, size=dof)),
        speed=rng.uniform(1.0 - speed_jitter, 1.0 + speed_jitter),
        phase_jitter=rng.normal(0.0, phase_jitter, size=dof),
    )
    angles = angles + rng.normal(0.0, 0.03 + style, size=dof)
    pos = forward_kinematics(angles, scale=rng.uniform(0.92, 1.08))
    pos[:, 1:] += rng.normal(0.0, noise, size=pos[:, 1:].shape)
    coords = pos.transpose(1, 2, 0).reshape(3 * len(JOINT_NAMES), frames)
    return ActionSequence(coords, label=label, subject=None, name=name)


def make_synthetic(
    seed=0,
    n_train: int = 300,
    n_test: int = 120,
    classes: int = 6,
    frames: int = 64,
    noise: float = 0.005,
    spread: float = 0.5,
    shift_range: float = 1.0,
    style: float = 0.0,
    max_cycles: int = 3,
    speed_jitter: float = 0.1,
    phase_jitter: float = 0.0,
) -> SyntheticDataset:
    """Balanced, hip-centered train and test sets (positions in meters)."""
    motions = class_motions(classes, seed, spread, max_cycles)
    rng = np.random.default_rng([int(seed), 2])
    sets = []
    for split, count in (("train", n_train), ("test", n_test)):
        labels = np.arange(count) % classes
        sets.append(
            [
                sample_action(motions[c], int(c), frames, rng, noise, shift_range, style, speed_jitter, phase_jitter, f"{split}_{i:04d}")
                for i, c in enumerate(labels)
            ]
        )
    return SyntheticDataset(sets[0], sets[1], synthetic_topology(), classes)
