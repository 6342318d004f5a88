"""Skeleton model and forward kinematics.

A skeleton is a joint tree with rest-pose positions in millimetres
(right-handed, y-up). A pose is a global rotation plus one rotation per
bone stored relative to the root; absolute bone rotations are the
product global @ relative. Joint positions come from rotating rest-pose
bone vectors by the absolute rotations and summing them outward from
the root.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import DegenerateInput, LengthMismatch, ShapeMismatch

ROOT_SENTINEL = -1


@dataclass
class Skeleton:
    joint_names: list[str]
    parent: np.ndarray          # (m,) int, ROOT_SENTINEL at the root
    rest_positions: np.ndarray  # (m, 3) float, mm

    root: int = field(init=False)
    bones: list[tuple[int, int]] = field(init=False)        # (parent, child), by child index
    topo_order: list[int] = field(init=False)               # parents before children
    rest_bone_vectors: np.ndarray = field(init=False)       # (n, 3)
    rest_bone_lengths: np.ndarray = field(init=False)       # (n,)

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=int)
        self.rest_positions = np.asarray(self.rest_positions, dtype=float)
        m = len(self.joint_names)
        if self.parent.shape != (m,) or self.rest_positions.shape != (m, 3):
            raise ShapeMismatch("joint_names, parent and rest_positions disagree on joint count")
        roots = np.flatnonzero(self.parent == ROOT_SENTINEL)
        if len(roots) != 1:
            raise DegenerateInput(f"expected exactly one root joint, found {len(roots)}")
        self.root = int(roots[0])

        # Verify the parent graph is a tree and build a topological order.
        children: list[list[int]] = [[] for _ in range(m)]
        for j in range(m):
            if j == self.root:
                continue
            p = int(self.parent[j])
            if not 0 <= p < m:
                raise DegenerateInput(f"joint {j} has out-of-range parent {p}")
            children[p].append(j)
        order = []
        stack = [self.root]
        while stack:
            j = stack.pop()
            order.append(j)
            stack.extend(reversed(children[j]))
        if len(order) != m:
            raise DegenerateInput("parent graph contains a cycle or unreachable joints")
        self.topo_order = order

        self.bones = [(int(self.parent[j]), j) for j in range(m) if j != self.root]
        vecs = np.array([self.rest_positions[c] - self.rest_positions[p] for p, c in self.bones])
        lengths = np.linalg.norm(vecs, axis=1)
        if np.any(lengths <= 0.0):
            raise DegenerateInput("every rest bone vector must have positive norm")
        self.rest_bone_vectors = vecs
        self.rest_bone_lengths = lengths

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def num_bones(self) -> int:
        return len(self.bones)

    def bone_index(self, child: int) -> int:
        """Index of the bone whose child joint is `child`."""
        for i, (_, c) in enumerate(self.bones):
            if c == child:
                return i
        raise KeyError(f"joint {child} is the root; it heads no bone")

    def subtree_joints(self, bone: int) -> list[int]:
        """Joints at or below the child of the given bone."""
        _, c = self.bones[bone]
        out = []
        stack = [c]
        kids: dict[int, list[int]] = {}
        for p, ch in self.bones:
            kids.setdefault(p, []).append(ch)
        while stack:
            j = stack.pop()
            out.append(j)
            stack.extend(kids.get(j, []))
        return out

    def to_json(self) -> dict:
        return {
            "joints": [
                {"name": n, "parent": int(p), "rest": list(map(float, r))}
                for n, p, r in zip(self.joint_names, self.parent, self.rest_positions)
            ]
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Skeleton":
        joints = obj["joints"]
        return cls(
            joint_names=[j["name"] for j in joints],
            parent=np.array([j["parent"] for j in joints], dtype=int),
            rest_positions=np.array([j["rest"] for j in joints], dtype=float),
        )

    @classmethod
    def load(cls, path) -> "Skeleton":
        with open(path) as f:
            return cls.from_json(json.load(f))

    @classmethod
    def default(cls) -> "Skeleton":
        """The bundled 16-joint, 15-bone skeleton (MPII joint order, total bone length 4000 mm)."""
        text = resources.files("skelpose").joinpath("data/skeleton_mpii16.json").read_text()
        return cls.from_json(json.loads(text))


@dataclass
class Pose:
    global_rot: np.ndarray   # (3, 3)
    bone_rel: np.ndarray     # (n, 3, 3), relative to the root
    absolute: np.ndarray     # (n, 3, 3), global_rot @ bone_rel
    joints: np.ndarray       # (m, 3) mm, root at the origin

    def to_json(self) -> dict:
        return {
            "global": [float(v) for v in self.global_rot.ravel()],
            "bones": [[float(v) for v in b.ravel()] for b in self.bone_rel],
        }


def pose_from_json(skel: Skeleton, obj: dict) -> Pose:
    g = np.array(obj["global"], dtype=float).reshape(3, 3)
    bones = np.array(obj["bones"], dtype=float).reshape(-1, 3, 3)
    if bones.shape[0] != skel.num_bones:
        raise LengthMismatch(f"pose has {bones.shape[0]} bones, skeleton has {skel.num_bones}")
    return forward_kinematics(skel, g, bones)


def forward_kinematics(skel: Skeleton, global_rot, bone_rel) -> Pose:
    """Joint positions from a global rotation and relative bone rotations.

    joints[root] = 0 and joints[child] = joints[parent] +
    (global @ bone_rel) @ rest_bone_vector, accumulated in topological
    order; bone lengths are preserved exactly because rotations are
    isometries.
    """
    global_rot = np.asarray(global_rot, dtype=float)
    bone_rel = np.asarray(bone_rel, dtype=float)
    if bone_rel.shape != (skel.num_bones, 3, 3):
        raise ShapeMismatch(f"bone_rel must be ({skel.num_bones}, 3, 3), got {bone_rel.shape}")
    absolute = global_rot @ bone_rel
    rotated = np.einsum("nij,nj->ni", absolute, skel.rest_bone_vectors)
    joints = np.zeros((skel.num_joints, 3))
    bone_of_child = {c: i for i, (_, c) in enumerate(skel.bones)}
    for j in skel.topo_order:
        if j == skel.root:
            continue
        b = bone_of_child[j]
        joints[j] = joints[skel.parent[j]] + rotated[b]
    return Pose(global_rot=global_rot, bone_rel=bone_rel, absolute=absolute, joints=joints)


def fk_backward(skel: Skeleton, global_rot, bone_rel, upstream_grad):
    """Gradients of sum(upstream_grad * joints) w.r.t. rotation entries.

    Moving one bone's absolute rotation translates its whole subtree,
    so d(loss)/d(absolute_b) = (sum of upstream rows over the subtree)
    outer rest_bone_vector; the product rule then splits that between
    the global and the relative factor.
    """
    global_rot = np.asarray(global_rot, dtype=float)
    bone_rel = np.asarray(bone_rel, dtype=float)
    upstream_grad = np.asarray(upstream_grad, dtype=float)
    if upstream_grad.shape != (skel.num_joints, 3):
        raise ShapeMismatch("upstream_grad must be (num_joints, 3)")

    acc = upstream_grad.copy()
    for j in reversed(skel.topo_order):
        p = skel.parent[j]
        if p != ROOT_SENTINEL:
            acc[p] += acc[j]

    g_global = np.zeros((3, 3))
    g_bones = np.zeros_like(bone_rel)
    for i, (_, c) in enumerate(skel.bones):
        g_abs = np.outer(acc[c], skel.rest_bone_vectors[i])
        g_global += g_abs @ bone_rel[i].T
        g_bones[i] = global_rot.T @ g_abs
    return g_global, g_bones


def bone_vectors(skel: Skeleton, joints) -> np.ndarray:
    """Per-bone child-minus-parent vectors for the given joint positions."""
    joints = np.asarray(joints, dtype=float)
    if joints.shape != (skel.num_joints, 3):
        raise ShapeMismatch(f"joints must be ({skel.num_joints}, 3)")
    p = np.array([b[0] for b in skel.bones])
    c = np.array([b[1] for b in skel.bones])
    return joints[c] - joints[p]


def total_bone_length(skel: Skeleton, joints) -> float:
    return float(np.linalg.norm(bone_vectors(skel, joints), axis=1).sum())


def normalize_lengths(skel: Skeleton, joints, l_ave: float) -> np.ndarray:
    """Root-center and rescale joints so the summed bone length equals l_ave."""
    joints = np.asarray(joints, dtype=float)
    l_pred = total_bone_length(skel, joints)
    if l_pred < 1e-9:
        raise DegenerateInput("predicted skeleton has near-zero total bone length")
    return (joints - joints[skel.root]) * (l_ave / l_pred)
