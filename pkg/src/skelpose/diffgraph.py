"""Minimal reverse-mode differentiation tape and a toy trainer.

The tape records primitive nodes (matrix products, the orthogonalization
layer, forward kinematics, Gaussian rendering, spatial soft-argmax and
the loss terms) in construction order, which is already a topological
order, so the backward pass visits each node exactly once in reverse.
A two-layer model trained through the full pipeline stands in for the
convolutional backbone at desk scale: class probabilities are blended
into a global transform, per-bone transforms are orthogonalized,
joints are integrated, projected and rendered into seed maps that are
added to ground-truth heatmaps plus a learned residual, decoded with
soft-argmax and refined back into consistent rotations.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import objectives
from .assembly import minimal_rotation
from .codebook import RotationCodebook, classify
from .errors import GraphCycle, ShapeMismatch
from .heatmaps import CrossHeatmap, VolumeBounds, encode_cross, project_to_plane
from .objectives import LossComponents, LossWeights, SupervisionMask
from .rotations import from_axis_angle, gram_schmidt, gram_schmidt_backward
from .skeleton import Pose, Skeleton, bone_vectors, fk_backward, forward_kinematics


class Node:
    __slots__ = ("tape", "value", "parents", "vjp", "grad", "index")

    def __init__(self, tape, value, parents, vjp, index):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.index = index


class Tape:
    """Ordered record of primitive operations with reverse-mode support."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _make(self, value, parents=(), vjp=None) -> Node:
        for p in parents:
            if p.tape is not self or p.index >= len(self.nodes):
                raise GraphCycle("parents must be earlier nodes of the same tape")
        node = Node(self, np.asarray(value, dtype=float), tuple(parents), vjp, len(self.nodes))
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._make(value)

    def param(self, value) -> Node:
        return self._make(value)

    # ---- arithmetic -------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ShapeMismatch("add expects equal shapes")
        return self._make(a.value + b.value, (a, b), lambda g: (g, g))

    def mul(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ShapeMismatch("mul expects equal shapes")
        return self._make(a.value * b.value, (a, b),
                          lambda g, av=a.value, bv=b.value: (g * bv, g * av))

    def scale(self, a: Node, k: float) -> Node:
        return self._make(a.value * k, (a,), lambda g: (g * k,))

    def matvec(self, w: Node, x: Node) -> Node:
        return self._make(w.value @ x.value, (w, x),
                          lambda g, wv=w.value, xv=x.value: (np.outer(g, xv), wv.T @ g))

    def tanh(self, a: Node) -> Node:
        y = np.tanh(a.value)
        return self._make(y, (a,), lambda g, y=y: (g * (1.0 - y * y),))

    def softmax(self, a: Node) -> Node:
        z = a.value - a.value.max()
        e = np.exp(z)
        s = e / e.sum()
        return self._make(s, (a,), lambda g, s=s: (s * (g - np.dot(g, s)),))

    def slice1d(self, a: Node, start: int, stop: int) -> Node:
        def vjp(g, n=a.value.shape[0], start=start, stop=stop):
            out = np.zeros(n)
            out[start:stop] = g
            return (out,)
        return self._make(a.value[start:stop], (a,), vjp)

    def reshape(self, a: Node, shape) -> Node:
        return self._make(a.value.reshape(shape), (a,),
                          lambda g, s=a.value.shape: (g.reshape(s),))

    # ---- geometry layers --------------------------------------------

    def gram_schmidt(self, a: Node) -> Node:
        return self._make(gram_schmidt(a.value), (a,),
                          lambda g, m=a.value: (gram_schmidt_backward(m, g),))

    def gram_schmidt_stack(self, a: Node) -> Node:
        out = np.array([gram_schmidt(m) for m in a.value])

        def vjp(g, ms=a.value):
            return (np.array([gram_schmidt_backward(m, gi) for m, gi in zip(ms, g)]),)
        return self._make(out, (a,), vjp)

    def blend(self, cb: RotationCodebook, p: Node) -> Node:
        out = np.einsum("k,kij->ij", p.value, cb.centers)

        def vjp(g, centers=cb.centers):
            return (np.einsum("kij,ij->k", centers, g),)
        return self._make(out, (p,), vjp)

    def compose_rotations(self, g_rot: Node, bones: Node) -> Node:
        """Absolute rotations: global @ each relative bone rotation."""
        out = g_rot.value @ bones.value

        def vjp(g, gv=g_rot.value, bv=bones.value):
            gg = np.einsum("nij,nkj->ik", g, bv)
            gb = np.einsum("ji,njk->nik", gv, g)
            return gg, gb
        return self._make(out, (g_rot, bones), vjp)

    def forward_kinematics(self, skel: Skeleton, g_rot: Node, bones: Node) -> Node:
        pose = forward_kinematics(skel, g_rot.value, bones.value)

        def vjp(g, skel=skel, gv=g_rot.value, bv=bones.value):
            return fk_backward(skel, gv, bv, g)
        return self._make(pose.joints, (g_rot, bones), vjp)

    def project_to_plane(self, joints: Node, target_width: float) -> Node:
        """Bounding-box projection; the box center and extent are treated
        as locally affine functions of the extreme joints."""
        j = joints.value
        xy = j[:, :2]
        lo_idx = np.argmin(xy, axis=0)
        hi_idx = np.argmax(xy, axis=0)
        lo = xy[lo_idx, [0, 1]]
        hi = xy[hi_idx, [0, 1]]
        wide_axis = int(np.argmax(hi - lo))
        extent = hi[wide_axis] - lo[wide_axis]
        scale = 0.9 * target_width / extent
        center = (lo + hi) / 2.0
        out = (xy - center) * scale + target_width / 2.0

        def vjp(g):
            gxy = g * scale
            # center shift: each output row subtracts scale * dcenter
            gc = -scale * g.sum(axis=0)
            for ax in range(2):
                gxy[lo_idx[ax], ax] += 0.5 * gc[ax]
                gxy[hi_idx[ax], ax] += 0.5 * gc[ax]
            # extent change rescales every centered coordinate
            gs = float(np.sum(g * (xy - center))) * (-0.9 * target_width / extent ** 2)
            gxy[hi_idx[wide_axis], wide_axis] += gs
            gxy[lo_idx[wide_axis], wide_axis] -= gs
            full = np.zeros_like(j)
            full[:, :2] = gxy
            return (full,)
        return self._make(out, (joints,), vjp)

    def columns_affine(self, a: Node, cols, scales, offsets) -> Node:
        """out[:, k] = a[:, cols[k]] * scales[k] + offsets[k]."""
        av = a.value
        out = np.stack([av[:, c] * s + o for c, s, o in zip(cols, scales, offsets)], axis=1)

        def vjp(g, shape=av.shape, cols=tuple(cols), scales=tuple(scales)):
            full = np.zeros(shape)
            for k, (c, s) in enumerate(zip(cols, scales)):
                full[:, c] += g[:, k] * s
            return (full,)
        return self._make(out, (a,), vjp)

    def render_gaussians(self, centers: Node, h: int, w: int, sigma: float) -> Node:
        c = centers.value
        cols = np.arange(w, dtype=float)
        rows = np.arange(h, dtype=float)
        du = cols[None, None, :] - c[:, 0, None, None]
        dv = rows[None, :, None] - c[:, 1, None, None]
        maps = np.exp(-(du ** 2 + dv ** 2) / (2.0 * sigma * sigma))

        def vjp(g, du=du, dv=dv, maps=maps, sigma=sigma):
            gm = g * maps / (sigma * sigma)
            gu = np.sum(gm * du, axis=(1, 2))
            gv = np.sum(gm * dv, axis=(1, 2))
            return (np.stack([gu, gv], axis=1),)
        return self._make(maps, (centers,), vjp)

    def soft_argmax_stack(self, maps: Node, temperature: float) -> Node:
        """Vectorized sharpened expectation over a stack of maps.

        Same math as heatmaps.soft_argmax2d, with the sharpening powers
        computed once and shared with the backward pass.
        """
        h = maps.value
        m, rows, cols = h.shape
        beta = 1.0 / temperature
        p = np.maximum(h, 0.0)
        pmax = p.max(axis=(1, 2), keepdims=True)
        pmax_safe = np.maximum(pmax, 1e-300)
        r = p / pmax_safe
        q = r ** (beta - 1.0)   # reused by the backward pass
        w = q * r
        z = np.maximum(w.sum(axis=(1, 2), keepdims=True), 1e-300)
        s = w / z
        col_idx = np.arange(cols, dtype=float)
        row_idx = np.arange(rows, dtype=float)
        u = np.sum(s * col_idx[None, None, :], axis=(1, 2))
        v = np.sum(s * row_idx[None, :, None], axis=(1, 2))
        out = np.stack([u, v], axis=1)

        def vjp(g, q=q, z=z, pmax=pmax_safe, u=u, v=v, beta=beta):
            gu = g[:, 0, None, None]
            gv = g[:, 1, None, None]
            coeff = beta * q / (z * pmax)
            gh = coeff * (gu * (col_idx[None, None, :] - u[:, None, None])
                          + gv * (row_idx[None, :, None] - v[:, None, None]))
            gh[h < 0.0] = 0.0
            return (gh,)
        return self._make(out, (maps,), vjp)

    def decode_columns(self, xy_uv: Node, zy_uv: Node, bounds: VolumeBounds, grid: int) -> Node:
        """Pixel coordinates from both stacks back to mm, averaging y."""
        span = bounds.upper - bounds.lower
        sx, sy, sz = span / grid
        ux, vy1 = xy_uv.value[:, 0], xy_uv.value[:, 1]
        uz, vy2 = zy_uv.value[:, 0], zy_uv.value[:, 1]
        out = np.stack([
            ux * sx + bounds.lower[0],
            0.5 * (vy1 + vy2) * sy + bounds.lower[1],
            uz * sz + bounds.lower[2],
        ], axis=1)

        def vjp(g, sx=sx, sy=sy, sz=sz):
            gxy = np.stack([g[:, 0] * sx, 0.5 * g[:, 1] * sy], axis=1)
            gzy = np.stack([g[:, 2] * sz, 0.5 * g[:, 1] * sy], axis=1)
            return gxy, gzy
        return self._make(out, (xy_uv, zy_uv), vjp)

    def refine_rotations(self, skel: Skeleton, r_init: Node, joints_init: Node,
                         x_final: Node) -> Node:
        """Alignment rotations composed onto stage-one rotations.

        The per-bone alignment is a stop-gradient boundary: gradients
        reach r_init through the product but never flow into the bone
        directions that define the alignment.
        """
        v_init = bone_vectors(skel, joints_init.value)
        v_fin = bone_vectors(skel, x_final.value)
        d_rots = np.array([minimal_rotation(a, b) for a, b in zip(v_init, v_fin)])
        out = np.einsum("nij,njk->nik", d_rots, r_init.value)

        def vjp(g, d_rots=d_rots):
            return (np.einsum("nji,njk->nik", d_rots, g), None, None)
        return self._make(out, (r_init, joints_init, x_final), vjp)

    # ---- losses ------------------------------------------------------

    def loss_rotg(self, p: Node, label: int) -> Node:
        val, grad = objectives.loss_rotg(p.value, label)
        return self._make(val, (p,), lambda g, grad=grad: (g * grad,))

    def loss_mse(self, pred: Node, target) -> Node:
        target = np.asarray(target, dtype=float)
        diff = pred.value - target
        return self._make(float(np.sum(diff * diff)), (pred,),
                          lambda g, diff=diff: (g * 2.0 * diff,))

    def inner(self, a: Node, weights) -> Node:
        """Scalar probe sum(a * weights); linear, so finite differences
        of a layer composed with it see no truncation error."""
        weights = np.asarray(weights, dtype=float)
        return self._make(float(np.sum(a.value * weights)), (a,),
                          lambda g, w=weights: (g * w,))

    def weighted_sum(self, nodes, weights) -> Node:
        val = sum(w * n.value for n, w in zip(nodes, weights))
        return self._make(val, tuple(nodes),
                          lambda g, ws=tuple(weights): tuple(g * w for w in ws))


def backward(tape: Tape, loss: Node) -> None:
    """Reverse-mode accumulation from a scalar loss into node.grad."""
    if loss.tape is not tape:
        raise GraphCycle("loss node does not belong to this tape")
    if loss.value.size != 1:
        raise ShapeMismatch("backward expects a scalar loss node")
    for node in tape.nodes:
        node.grad = np.zeros_like(node.value)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.vjp is None or not np.any(node.grad):
            continue
        grads = node.vjp(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is not None:
                parent.grad = parent.grad + g


def gradcheck(fn, inputs, eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    `fn(tape, *nodes)` must build and return a scalar node. The error is
    |analytic - numeric| scaled by the larger gradient magnitude (with a
    floor of 1), evaluated entry by entry over every input.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-8, 1e-4]")
    inputs = [np.asarray(x, dtype=float) for x in inputs]
    tape = Tape()
    nodes = [tape.param(x) for x in inputs]
    backward(tape, fn(tape, *nodes))
    analytic = [n.grad.copy() for n in nodes]

    max_rel = 0.0
    for idx in range(len(inputs)):
        numeric = np.zeros(inputs[idx].size)
        for i in range(inputs[idx].size):
            vals = []
            for sign in (1.0, -1.0):
                shifted = [x.copy() for x in inputs]
                shifted[idx].ravel()[i] += sign * eps
                t2 = Tape()
                out = fn(t2, *[t2.param(x) for x in shifted])
                vals.append(float(out.value))
            numeric[i] = (vals[0] - vals[1]) / (2.0 * eps)
        ana = analytic[idx].ravel()
        scale = max(float(np.max(np.abs(ana), initial=0.0)),
                    float(np.max(np.abs(numeric), initial=0.0)), 1.0)
        rel = float(np.max(np.abs(ana - numeric), initial=0.0)) / scale
        max_rel = max(max_rel, rel)
    return max_rel


# ---- toy trainer -----------------------------------------------------


@dataclass
class ToyModel:
    """Two affine layers with tanh plus a learned heatmap residual.

    The second layer has one head for class logits over the
    global-rotation codebook and one for 9 raw transform entries per
    bone (kept as separate tensors so each head clips and steps on its
    own scale); the residual maps stand in for the hourglass that would
    predict heatmaps at full scale.
    """
    w1: np.ndarray
    b1: np.ndarray
    w_cls: np.ndarray   # (K, hidden)
    b_cls: np.ndarray
    w_bone: np.ndarray  # (9n, hidden)
    b_bone: np.ndarray
    residual_xy: np.ndarray  # (m, grid, grid)
    residual_zy: np.ndarray
    num_classes: int = 0
    num_bones: int = 0

    @classmethod
    def init(cls, in_dim: int, num_classes: int, num_bones: int, num_joints: int,
             grid: int, hidden: int = 64, seed: int = 0) -> "ToyModel":
        rng = np.random.default_rng(seed)
        return cls(
            w1=rng.normal(scale=1.0 / math.sqrt(in_dim), size=(hidden, in_dim)),
            b1=np.zeros(hidden),
            w_cls=rng.normal(scale=1.0 / math.sqrt(hidden), size=(num_classes, hidden)),
            b_cls=np.zeros(num_classes),
            w_bone=rng.normal(scale=0.01 / math.sqrt(hidden), size=(9 * num_bones, hidden)),
            # biased to identity transforms so the initial pose is the
            # rest pose instead of a random (possibly degenerate) one
            b_bone=np.tile(np.eye(3).ravel(), num_bones),
            residual_xy=np.zeros((num_joints, grid, grid)),
            residual_zy=np.zeros((num_joints, grid, grid)),
            num_classes=num_classes,
            num_bones=num_bones,
        )

    def parameters(self) -> dict:
        return {"w1": self.w1, "b1": self.b1,
                "w_cls": self.w_cls, "b_cls": self.b_cls,
                "w_bone": self.w_bone, "b_bone": self.b_bone,
                "residual_xy": self.residual_xy, "residual_zy": self.residual_zy}

    def head(self, features: np.ndarray):
        """Plain forward pass: (logits, bone transform entries)."""
        hid = np.tanh(self.w1 @ features + self.b1)
        return self.w_cls @ hid + self.b_cls, self.w_bone @ hid + self.b_bone

    def predict_class(self, features: np.ndarray) -> int:
        logits, _ = self.head(features)
        return int(np.argmax(logits))

    def save(self, path):
        obj = {k: v.tolist() for k, v in self.parameters().items()}
        obj["num_classes"] = self.num_classes
        obj["num_bones"] = self.num_bones
        with open(path, "w") as f:
            json.dump(obj, f)

    @classmethod
    def load(cls, path) -> "ToyModel":
        with open(path) as f:
            obj = json.load(f)
        arrays = {k: np.array(obj[k]) for k in
                  ("w1", "b1", "w_cls", "b_cls", "w_bone", "b_bone",
                   "residual_xy", "residual_zy")}
        return cls(num_classes=obj["num_classes"], num_bones=obj["num_bones"],
                   **arrays)


@dataclass
class ToySample:
    features: np.ndarray
    pose: Pose              # ground truth
    heatmap: CrossHeatmap   # ground-truth rendered maps
    label: int              # global-rotation class
    mask: SupervisionMask = field(default_factory=SupervisionMask.full)


@dataclass
class ToyDataset:
    samples: list
    skel: Skeleton
    codebook: RotationCodebook
    bounds: VolumeBounds
    grid: int = 64
    sigma: float = 1.0


@dataclass
class TrainResult:
    model: ToyModel
    curve: np.ndarray  # (epochs, 6): total, rotg, rotb, rot, pos, hm
    diverged: bool = False


def _lr_mirror_maps(skel: Skeleton):
    """Joint/bone index swaps for a left/right flip, by name prefix."""
    jmap = list(range(skel.num_joints))
    for j, name in enumerate(skel.joint_names):
        if name.startswith("r_"):
            other = "l_" + name[2:]
            if other in skel.joint_names:
                jmap[j] = skel.joint_names.index(other)
        elif name.startswith("l_"):
            other = "r_" + name[2:]
            if other in skel.joint_names:
                jmap[j] = skel.joint_names.index(other)
    child_of = [c for _, c in skel.bones]
    bmap = [child_of.index(jmap[c]) for c in child_of]
    return jmap, bmap


def mirror_pose(skel: Skeleton, pose):
    """Left/right flip across the x = 0 plane with joint relabeling."""
    mirror = np.diag([-1.0, 1.0, 1.0])
    _, bmap = _lr_mirror_maps(skel)
    g = mirror @ pose.global_rot @ mirror
    rel = np.empty_like(pose.bone_rel)
    for b, mb in enumerate(bmap):
        rel[b] = mirror @ pose.bone_rel[mb] @ mirror
    return forward_kinematics(skel, g, rel)


def make_synthetic_dataset(n_samples: int, skel: Skeleton, cb: RotationCodebook,
                           noise: float = 0.0, seed: int = 0, grid: int = 64,
                           sigma: float = 1.0, bounds: VolumeBounds | None = None,
                           global_jitter_deg: float = 8.0, bone_jitter_deg: float = 10.0,
                           rotation_only_fraction: float = 0.0,
                           flip_augment: bool = False) -> ToyDataset:
    """Cluster-sampled global rotations, jittered bone rotations and
    noisy projected-keypoint features.

    Deterministic for a fixed seed. `rotation_only_fraction` marks that
    leading share of samples with the reduced supervision mask.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if bounds is None:
        bounds = VolumeBounds.cube(side=2400.0)
    rng = np.random.default_rng(seed)
    poses = []
    for _ in range(n_samples):
        k = int(rng.integers(cb.K))
        jitter_axis = rng.normal(size=3)
        jitter_axis /= np.linalg.norm(jitter_axis)
        jitter = from_axis_angle(jitter_axis, math.radians(global_jitter_deg) * rng.uniform())
        g = gram_schmidt(cb.centers[k]) @ jitter
        rel = np.empty((skel.num_bones, 3, 3))
        for b in range(skel.num_bones):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            rel[b] = from_axis_angle(axis, math.radians(bone_jitter_deg) * rng.normal())
        poses.append(forward_kinematics(skel, g, rel))
    if flip_augment:
        poses = poses + [mirror_pose(skel, p) for p in poses]

    samples = []
    n_masked = int(round(rotation_only_fraction * len(poses)))
    for i, pose in enumerate(poses):
        px = project_to_plane(pose.joints, 16.0).ravel()
        px = px + noise * rng.normal(size=px.shape)
        feats = (px - 8.0) / 8.0  # standardized projected keypoints
        label, _ = classify(cb, pose.global_rot)
        hm = encode_cross(pose.joints, bounds, grid=grid, sigma=sigma)
        mask = SupervisionMask.rotation_only() if i < n_masked else SupervisionMask.full()
        samples.append(ToySample(features=feats, pose=pose, heatmap=hm,
                                 label=label, mask=mask))
    return ToyDataset(samples=samples, skel=skel, codebook=cb, bounds=bounds,
                      grid=grid, sigma=sigma)


def forward_sample(tape: Tape, params: dict, sample: ToySample, ds: ToyDataset,
                   weights: LossWeights):
    """Build the full differentiable pipeline for one sample.

    Returns (total_node, components) where components hold the raw loss
    values that were (or would be) combined.
    """
    skel, cb, bounds, grid = ds.skel, ds.codebook, ds.bounds, ds.grid
    n = skel.num_bones

    feats = tape.constant(sample.features)
    hid = tape.tanh(tape.add(tape.matvec(params["w1"], feats), params["b1"]))
    logits = tape.add(tape.matvec(params["w_cls"], hid), params["b_cls"])
    entries = tape.reshape(tape.add(tape.matvec(params["w_bone"], hid), params["b_bone"]),
                           (n, 3, 3))

    p = tape.softmax(logits)
    l_rotg = tape.loss_rotg(p, sample.label)
    l_rotb = tape.loss_mse(entries, sample.pose.bone_rel)

    g_rot = tape.gram_schmidt(tape.blend(cb, p))
    bones = tape.gram_schmidt_stack(entries)
    r_init = tape.compose_rotations(g_rot, bones)
    joints_init = tape.forward_kinematics(skel, g_rot, bones)

    # Seed maps: the stage-one joints are projected onto the xy and zy
    # heatmap planes (same plane mapping the ground-truth maps use) and
    # rendered as Gaussian bumps that are summed with the ground-truth
    # maps and the learned residual.
    span = bounds.upper - bounds.lower
    xy_seed_centers = tape.columns_affine(
        joints_init, cols=(0, 1),
        scales=(grid / span[0], grid / span[1]),
        offsets=(-bounds.lower[0] * grid / span[0], -bounds.lower[1] * grid / span[1]))
    zy_seed_centers = tape.columns_affine(
        joints_init, cols=(2, 1),
        scales=(grid / span[2], grid / span[1]),
        offsets=(-bounds.lower[2] * grid / span[2], -bounds.lower[1] * grid / span[1]))
    h_xy = tape.add(tape.add(tape.constant(sample.heatmap.xy), params["residual_xy"]),
                    tape.render_gaussians(xy_seed_centers, grid, grid, ds.sigma))
    h_zy = tape.add(tape.add(tape.constant(sample.heatmap.zy), params["residual_zy"]),
                    tape.render_gaussians(zy_seed_centers, grid, grid, ds.sigma))

    l_hm_xy = tape.loss_mse(h_xy, sample.heatmap.xy)
    l_hm_zy = tape.loss_mse(h_zy, sample.heatmap.zy)
    l_hm = tape.add(l_hm_xy, l_hm_zy) if sample.mask.zy else l_hm_xy

    xy_uv = tape.soft_argmax_stack(h_xy, 0.1)
    zy_uv = tape.soft_argmax_stack(h_zy, 0.1)
    x_final = tape.decode_columns(xy_uv, zy_uv, bounds, grid)
    l_pos = tape.loss_mse(x_final, sample.pose.joints)

    r_final = tape.refine_rotations(skel, r_init, joints_init, x_final)
    l_rot = tape.loss_mse(r_final, sample.pose.absolute)

    nodes = [l_rotg, l_rotb]
    node_weights = [1.0, weights.alpha]
    if sample.mask.rotations:
        nodes.append(l_rot)
        node_weights.append(weights.beta)
    if sample.mask.positions:
        nodes.append(l_pos)
        node_weights.append(weights.gamma)
    nodes.append(l_hm)
    node_weights.append(weights.lam)
    total = tape.weighted_sum(nodes, node_weights)

    comps = LossComponents(rotg=float(l_rotg.value), rotb=float(l_rotb.value),
                           rot=float(l_rot.value), pos=float(l_pos.value),
                           hm=float(l_hm.value))
    return total, comps


# Per-group step scales for one plain SGD loop: millimetre-squared
# position losses reach the bone-transform head through a ~400 mm
# forward-kinematics lever (squared in the curvature), and reach the
# heatmap residuals through the sharpened soft-argmax slope; both need
# far smaller steps than the classification head.
BONE_LR_SCALE = 1e-2
RESIDUAL_LR_SCALE = 1e-4
# Norm clipping bounds the unbounded early gradients of those same
# paths without touching converged dynamics.
CLIP_NORM = 10.0


def _group_scale(name: str) -> float:
    if name.startswith("residual"):
        return RESIDUAL_LR_SCALE
    if name.endswith("_bone"):
        return BONE_LR_SCALE
    return 1.0


def train_toy(dataset: ToyDataset, weights: LossWeights | None = None,
              epochs: int = 50, lr: float = 1e-4, seed: int = 0,
              hidden: int = 64, lr_decay: float = 100.0) -> TrainResult:
    """Plain SGD (no momentum) through the whole pipeline.

    The step size decays geometrically by a total factor of `lr_decay`
    over the run. Deterministic given the seed. Returns the trained
    model and the per-epoch mean of (total, rotg, rotb, rot, pos, hm).
    Training stops early with `diverged` set if the loss leaves the
    finite range.
    """
    if not dataset.samples:
        raise ValueError("dataset is empty")
    weights = weights or LossWeights()
    skel, cb = dataset.skel, dataset.codebook
    in_dim = dataset.samples[0].features.shape[0]
    model = ToyModel.init(in_dim, cb.K, skel.num_bones, skel.num_joints,
                          dataset.grid, hidden=hidden, seed=seed)
    order_rng = np.random.default_rng(seed + 1)
    decay = lr_decay ** (-1.0 / max(epochs - 1, 1))

    arrays = model.parameters()
    curve = np.zeros((epochs, 6))
    diverged = False
    for epoch in range(epochs):
        lr_now = lr * decay ** epoch
        group_lr = {k: lr_now * _group_scale(k) for k in arrays}
        order = order_rng.permutation(len(dataset.samples))
        sums = np.zeros(6)
        for idx in order:
            sample = dataset.samples[idx]
            tape = Tape()
            params = {k: tape.param(v) for k, v in arrays.items()}
            total, comps = forward_sample(tape, params, sample, dataset, weights)
            if not np.isfinite(total.value):
                diverged = True
                break
            backward(tape, total)
            for k, node in params.items():
                g = node.grad
                norm = float(np.linalg.norm(g))
                if norm > CLIP_NORM:
                    g = g * (CLIP_NORM / norm)
                arrays[k] -= group_lr[k] * g
            sums += [float(total.value), comps.rotg, comps.rotb,
                     comps.rot, comps.pos, comps.hm]
        if diverged:
            curve = curve[:epoch]
            break
        curve[epoch] = sums / len(dataset.samples)
    return TrainResult(model=model, curve=curve, diverged=diverged)


def write_loss_curve(curve, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "total", "rotg", "rotb", "rot", "pos", "hm"])
        for epoch, row in enumerate(curve):
            writer.writerow([epoch] + [f"{v:.10g}" for v in row])
