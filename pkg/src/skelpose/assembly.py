"""Two-stage pose assembly.

Stage one orthogonalizes the blended global transform and the per-bone
transforms, composes absolute rotations and integrates joints. Stage
two takes refined joint positions from the heatmap branch and rotates
each stage-one bone onto its refined direction with the minimal
(shortest-arc) rotation, keeping positions and rotations consistent
without touching bone twist.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .codebook import RotationCodebook, blend
from .errors import DegenerateInput, ShapeMismatch
from .rotations import from_axis_angle, gram_schmidt
from .skeleton import Skeleton, bone_vectors, forward_kinematics


@dataclass
class InitialPose:
    rotations: np.ndarray   # (n, 3, 3) absolute bone rotations
    joints: np.ndarray      # (m, 3) mm
    global_rot: np.ndarray  # (3, 3), kept for the final pose


@dataclass
class FinalPose:
    global_rot: np.ndarray  # (3, 3)
    rotations: np.ndarray   # (n, 3, 3) absolute, direction-consistent with joints
    joints: np.ndarray      # (m, 3) mm

    def to_json(self) -> dict:
        rel = np.einsum("ji,njk->nik", self.global_rot, self.rotations)
        return {
            "global": [float(v) for v in self.global_rot.ravel()],
            "bones": [[float(v) for v in b.ravel()] for b in rel],
            "x": [[float(v) for v in j] for j in self.joints],
        }

    @property
    def bone_rel(self) -> np.ndarray:
        """Bone rotations relative to the root: global^T @ absolute."""
        return np.einsum("ji,njk->nik", self.global_rot, self.rotations)


def initial_pose(cb: RotationCodebook, probabilities, bone_transforms,
                 skel: Skeleton) -> InitialPose:
    """Orthogonalize blended-global and per-bone transforms, then integrate.

    Scales and shears in the raw transforms are removed by the
    orthogonalization, so joints depend only on the rotational part.
    """
    bone_transforms = np.asarray(bone_transforms, dtype=float)
    if bone_transforms.shape != (skel.num_bones, 3, 3):
        raise ShapeMismatch(f"bone_transforms must be ({skel.num_bones}, 3, 3)")
    g = gram_schmidt(blend(cb, probabilities))
    rel = np.array([gram_schmidt(t) for t in bone_transforms])
    pose = forward_kinematics(skel, g, rel)
    return InitialPose(rotations=pose.absolute, joints=pose.joints, global_rot=g)


def minimal_rotation(v_from, v_to) -> np.ndarray:
    """Smallest-angle rotation mapping the direction of v_from onto v_to.

    Antiparallel inputs are ambiguous; they get a half-turn about the
    first coordinate axis that is not parallel to v_from (deterministic).
    """
    v_from = np.asarray(v_from, dtype=float)
    v_to = np.asarray(v_to, dtype=float)
    nf = np.linalg.norm(v_from)
    nt = np.linalg.norm(v_to)
    if nf < 1e-9 or nt < 1e-9:
        raise DegenerateInput("direction vectors must have norm > 1e-9")
    a = v_from / nf
    b = v_to / nt
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    c = float(a @ b)
    if s < 1e-12:
        if c > 0.0:
            return np.eye(3)
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1.0
            perp = np.cross(a, e)
            if np.linalg.norm(perp) > 1e-6:
                return from_axis_angle(perp / np.linalg.norm(perp), math.pi)
        raise DegenerateInput("could not build a perpendicular axis")  # unreachable
    return from_axis_angle(axis / s, math.atan2(s, c))


def refine_rotations(init: InitialPose, x_final, skel: Skeleton) -> FinalPose:
    """Align each stage-one bone rotation with the refined bone direction.

    For bone i, dR_i is the minimal rotation from the stage-one bone
    vector to the refined one and the output rotation is dR_i @ R_i.
    The dR axis is perpendicular to the stage-one bone, so twist about
    the bone is untouched.
    """
    x_final = np.asarray(x_final, dtype=float)
    if x_final.shape != (skel.num_joints, 3):
        raise ShapeMismatch(f"x_final must be ({skel.num_joints}, 3)")
    v_init = bone_vectors(skel, init.joints)
    v_fin = bone_vectors(skel, x_final)
    if np.any(np.linalg.norm(v_fin, axis=1) < 1e-9):
        raise DegenerateInput("refined pose contains a zero-length bone")
    rotations = np.empty_like(init.rotations)
    for i in range(skel.num_bones):
        rotations[i] = minimal_rotation(v_init[i], v_fin[i]) @ init.rotations[i]
    return FinalPose(global_rot=init.global_rot, rotations=rotations, joints=x_final)
