"""Linear blend skinning and OBJ export.

Each vertex moves as a convex combination of at most four bone rigid
transforms. A bone's pivot is its parent joint: the vertex is expressed
relative to the bind-pose pivot, rotated by the bone's delta rotation
(posed absolute times inverse bind absolute) and re-attached at the
posed pivot. Skinned positions are linear in the stacked rotation and
position entries for fixed weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .assembly import FinalPose
from .errors import BindMismatch, ShapeMismatch
from .skeleton import Pose, Skeleton

MAX_INFLUENCES = 4
ON_BONE_EPS = 1e-9


@dataclass
class SkinnedMesh:
    vertices: np.ndarray   # (V, 3) mm, bind pose
    faces: np.ndarray      # (F, 3) int
    weights: np.ndarray    # (V, n) nonnegative, rows sum to 1, <= 4 nonzero
    bind_pose: Pose
    skeleton: Skeleton

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.faces = np.asarray(self.faces, dtype=int).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=float)
        v = len(self.vertices)
        if self.weights.shape != (v, self.skeleton.num_bones):
            raise ShapeMismatch("weights must be (num_vertices, num_bones)")
        if np.any(self.weights < 0):
            raise ValueError("skin weights must be nonnegative")
        if v and np.max(np.abs(self.weights.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("skin weight rows must sum to 1")
        if v and np.max(np.count_nonzero(self.weights, axis=1)) > MAX_INFLUENCES:
            raise ValueError(f"at most {MAX_INFLUENCES} influences per vertex")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            raise ShapeMismatch("face indices out of range")


def skin(mesh: SkinnedMesh, pose: FinalPose) -> np.ndarray:
    """Deform bind-pose vertices by the posed bone transforms."""
    skel = mesh.skeleton
    if pose.rotations.shape != (skel.num_bones, 3, 3) or pose.joints.shape != (skel.num_joints, 3):
        raise BindMismatch("pose does not match the bound skeleton")
    out = np.zeros_like(mesh.vertices)
    for b, (parent, _child) in enumerate(skel.bones):
        w = mesh.weights[:, b]
        if not np.any(w):
            continue
        delta = pose.rotations[b] @ mesh.bind_pose.absolute[b].T
        pivot_bind = mesh.bind_pose.joints[parent]
        pivot_posed = pose.joints[parent]
        moved = (mesh.vertices - pivot_bind) @ delta.T + pivot_posed
        out += w[:, None] * moved
    return out


def auto_weights(vertices, skel: Skeleton) -> np.ndarray:
    """Inverse-distance weights to the two nearest bone segments.

    A vertex lying on a bone binds rigidly to it (split evenly when it
    touches several, e.g. at a shared joint).
    """
    vertices = np.asarray(vertices, dtype=float)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise ShapeMismatch("vertices must be (V, 3)")
    n = skel.num_bones
    seg_a = np.array([skel.rest_positions[p] for p, _ in skel.bones])
    seg_b = np.array([skel.rest_positions[c] for _, c in skel.bones])
    weights = np.zeros((len(vertices), n))
    for vi, v in enumerate(vertices):
        d = np.array([_point_segment_distance(v, seg_a[b], seg_b[b]) for b in range(n)])
        on_bone = d < ON_BONE_EPS
        if np.any(on_bone):
            weights[vi, on_bone] = 1.0 / np.count_nonzero(on_bone)
            continue
        nearest = np.argsort(d, kind="stable")[:2]
        inv = 1.0 / d[nearest]
        weights[vi, nearest] = inv / inv.sum()
    return weights


def _point_segment_distance(p, a, b):
    ab = b - a
    t = np.dot(p - a, ab) / np.dot(ab, ab)
    t = min(1.0, max(0.0, t))
    return float(np.linalg.norm(p - (a + t * ab)))


def export_obj(vertices, faces, path):
    """Wavefront OBJ: 'v x y z' lines then 1-based 'f a b c' lines.

    Coordinates use repr-exact formatting so a re-parse reproduces the
    floats bit for bit.
    """
    vertices = np.asarray(vertices, dtype=float)
    faces = np.asarray(faces, dtype=int).reshape(-1, 3)
    with open(path, "w") as f:
        f.write("# skelpose mesh\n")
        for v in vertices:
            f.write("v %.17g %.17g %.17g\n" % (v[0], v[1], v[2]))
        for a, b, c in faces:
            f.write("f %d %d %d\n" % (a + 1, b + 1, c + 1))


def load_obj(path):
    """Parse v/f lines back into (vertices, faces)."""
    verts = []
    faces = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return (np.array(verts, dtype=float).reshape(-1, 3),
            np.array(faces, dtype=int).reshape(-1, 3))


def save_weights_json(weights, path):
    """Sparse weight export: one [bone, vertex, weight] triple per nonzero,
    grouped by vertex."""
    weights = np.asarray(weights, dtype=float)
    entries = []
    for vi in range(weights.shape[0]):
        for b in np.flatnonzero(weights[vi]):
            entries.append([int(b), int(vi), float(weights[vi, b])])
    with open(path, "w") as f:
        json.dump({"weights": entries}, f)


def load_weights_json(path, num_vertices: int, num_bones: int) -> np.ndarray:
    with open(path) as f:
        obj = json.load(f)
    weights = np.zeros((num_vertices, num_bones))
    for b, vi, w in obj["weights"]:
        weights[vi, b] = w
    return weights


def make_demo_body(skel: Skeleton, sides: int = 6, radius: float = 40.0):
    """Procedural tube-per-bone body so skinning demos need no asset.

    Returns (vertices, faces) in the rest pose.
    """
    verts = []
    faces = []
    for p, c in skel.bones:
        a = skel.rest_positions[p]
        b = skel.rest_positions[c]
        axis = b - a
        axis = axis / np.linalg.norm(axis)
        ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = np.cross(axis, ref)
        u /= np.linalg.norm(u)
        w = np.cross(axis, u)
        base = len(verts)
        for end in (a, b):
            for k in range(sides):
                ang = 2.0 * np.pi * k / sides
                verts.append(end + radius * (np.cos(ang) * u + np.sin(ang) * w))
        for k in range(sides):
            k2 = (k + 1) % sides
            faces.append([base + k, base + sides + k, base + sides + k2])
            faces.append([base + k, base + sides + k2, base + k2])
    return np.array(verts), np.array(faces, dtype=int)
