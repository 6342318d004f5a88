"""Loss terms, the weighted total and evaluation metrics.

Losses return (value, gradient) pairs so the training tape can reuse
them directly. Metrics follow the standard 3D pose protocol: MPJPE
after root alignment and skeleton-length normalization, reconstruction
error after a full similarity (Procrustes) alignment, and rotation
errors as geodesic angles in degrees.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .assembly import FinalPose
from .errors import ClampWarning, DegenerateInput, LengthMismatch, ShapeMismatch
from .heatmaps import CrossHeatmap
from .rotations import geodesic_deg
from .skeleton import Skeleton, normalize_lengths, total_bone_length

PROB_CLAMP = 1e-12


@dataclass
class LossWeights:
    alpha: float = 0.1   # bone-transform MSE
    beta: float = 0.1    # final-rotation MSE
    gamma: float = 0.1   # final-position MSE
    lam: float = 0.001   # heatmap MSE

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.lam) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class SupervisionMask:
    """Which loss terms a sample supervises.

    Samples with trustworthy 3D annotations supervise everything;
    rotation-only samples skip the final positions, final rotations and
    the zy half of the heatmap loss.
    """
    positions: bool = True
    rotations: bool = True
    zy: bool = True

    @classmethod
    def full(cls) -> "SupervisionMask":
        return cls()

    @classmethod
    def rotation_only(cls) -> "SupervisionMask":
        return cls(positions=False, rotations=False, zy=False)


@dataclass
class LossComponents:
    rotg: float = 0.0
    rotb: float = 0.0
    rot: float = 0.0
    pos: float = 0.0
    hm: float = 0.0


def loss_rotg(probabilities, label: int):
    """Cross-entropy -log p[label]; the probability is clamped at 1e-12."""
    p = np.asarray(probabilities, dtype=float)
    val = p[label]
    grad = np.zeros_like(p)
    if val < PROB_CLAMP:
        warnings.warn("class probability clamped to 1e-12", ClampWarning)
        return float(-np.log(PROB_CLAMP)), grad
    grad[label] = -1.0 / val
    return float(-np.log(val)), grad


def loss_rot_mse(pred, gt):
    """Sum over matrices of the squared Frobenius difference."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise LengthMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    diff = pred - gt
    return float(np.sum(diff * diff)), 2.0 * diff


def loss_pos(pred, gt):
    """Sum of squared joint distances."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise LengthMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    diff = pred - gt
    return float(np.sum(diff * diff)), 2.0 * diff


def loss_hm(pred: CrossHeatmap, gt: CrossHeatmap, mask: SupervisionMask | None = None):
    """Squared error over both stacks; the zy term is dropped when masked.

    Returns (value, (grad_xy, grad_zy)).
    """
    if pred.xy.shape != gt.xy.shape or pred.zy.shape != gt.zy.shape:
        raise ShapeMismatch("prediction and ground-truth heatmap shapes differ")
    mask = mask or SupervisionMask.full()
    dxy = pred.xy - gt.xy
    val = float(np.sum(dxy * dxy))
    gxy = 2.0 * dxy
    if mask.zy:
        dzy = pred.zy - gt.zy
        val += float(np.sum(dzy * dzy))
        gzy = 2.0 * dzy
    else:
        gzy = np.zeros_like(pred.zy)
    return val, (gxy, gzy)


def total_loss(weights: LossWeights, components: LossComponents,
               mask: SupervisionMask | None = None):
    """Weighted sum of the five loss terms with masked terms zeroed.

    Returns (value, gradients) where gradients maps each component name
    to d(total)/d(component) — the effective weight after masking.
    """
    mask = mask or SupervisionMask.full()
    grads = {
        "rotg": 1.0,
        "rotb": weights.alpha,
        "rot": weights.beta if mask.rotations else 0.0,
        "pos": weights.gamma if mask.positions else 0.0,
        "hm": weights.lam,
    }
    val = (grads["rotg"] * components.rotg + grads["rotb"] * components.rotb
           + grads["rot"] * components.rot + grads["pos"] * components.pos
           + grads["hm"] * components.hm)
    return float(val), grads


def mpjpe(pred_joints, gt_joints, skel: Skeleton, l_ave: float | None = None) -> float:
    """Mean per-joint position error in mm after root alignment.

    The prediction is first rescaled so its summed bone length equals
    l_ave (default: the ground truth's own sum), then both poses are
    root-centered; global orientation is kept as is.
    """
    pred_joints = np.asarray(pred_joints, dtype=float)
    gt_joints = np.asarray(gt_joints, dtype=float)
    if pred_joints.shape != gt_joints.shape:
        raise LengthMismatch("pred and gt joint counts differ")
    if l_ave is None:
        l_ave = total_bone_length(skel, gt_joints)
    pred = normalize_lengths(skel, pred_joints, l_ave)
    gt = gt_joints - gt_joints[skel.root]
    return float(np.mean(np.linalg.norm(pred - gt, axis=1)))


def similarity_align(pred, gt):
    """Least-squares similarity transform (s, R, t) mapping pred onto gt.

    Closed-form orthogonal Procrustes with det(R) = +1 enforced by
    flipping the smallest singular direction; reflections are excluded
    because skeletons are chiral.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise LengthMismatch("point sets must both be (m, 3)")
    if pred.shape[0] < 3:
        raise DegenerateInput("need at least 3 points for a similarity alignment")
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    x = pred - mu_p
    y = gt - mu_g
    sv_x = np.linalg.svd(x, compute_uv=False)
    sv_y = np.linalg.svd(y, compute_uv=False)
    if sv_x[1] < 1e-9 * max(sv_x[0], 1.0) or sv_y[1] < 1e-9 * max(sv_y[0], 1.0):
        raise DegenerateInput("joint sets are collinear; similarity alignment is ill-posed")
    u, s, vt = np.linalg.svd(y.T @ x)
    d = np.sign(np.linalg.det(u @ vt))
    flip = np.ones(3)
    flip[-1] = d
    rot = u @ np.diag(flip) @ vt
    var = np.sum(x * x)
    scale = float(np.sum(s * flip) / var)
    trans = mu_g - scale * rot @ mu_p
    return scale, rot, trans


def reconstruction_error(pred_joints, gt_joints) -> float:
    """Mean joint distance in mm after optimal similarity alignment."""
    pred = np.asarray(pred_joints, dtype=float)
    gt = np.asarray(gt_joints, dtype=float)
    scale, rot, trans = similarity_align(pred, gt)
    aligned = scale * pred @ rot.T + trans
    return float(np.mean(np.linalg.norm(aligned - gt, axis=1)))


def rotation_errors(pred: FinalPose, gt: FinalPose) -> tuple[float, float]:
    """(global error, mean bone error) in degrees.

    Each error is the geodesic angle of the relative rotation between
    prediction and ground truth; bone rotations are compared relative
    to the root.
    """
    if pred.rotations.shape != gt.rotations.shape:
        raise LengthMismatch("pose bone counts differ")
    global_err = geodesic_deg(pred.global_rot, gt.global_rot)
    pred_rel = pred.bone_rel
    gt_rel = gt.bone_rel
    bone_err = float(np.mean([geodesic_deg(a, b) for a, b in zip(pred_rel, gt_rel)]))
    return global_err, bone_err


def evaluation_report(per_sample: list[dict]) -> dict:
    """Aggregate per-sample metric dicts into the report layout."""
    keys = ("mpjpe_mm", "recon_mm", "global_rot_deg", "bone_rot_deg")
    agg = {k: float(np.mean([s[k] for s in per_sample])) if per_sample else 0.0 for k in keys}
    return {"samples": per_sample, "aggregate": agg}
