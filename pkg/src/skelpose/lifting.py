"""2D-to-3D annotation pipeline.

Keypoints are lifted to 3D with greedy matching pursuit over a PCA pose
basis, alternating weak-perspective camera fits with coefficient
selection. A rest-shape skeleton is then fitted to the lifted joints by
exact coordinate descent over per-bone rotations (bone lengths stay
fixed by construction), balancing position attraction against rotation
smoothness along the tree. Batch annotation writes one result JSON and
one skinned preview mesh per sample for human review.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateInput, InsufficientData, ShapeMismatch
from .rotations import from_axis_angle
from .skeleton import Pose, Skeleton, bone_vectors, forward_kinematics

VERDICTS = ("unreviewed", "acceptable", "bad")


@dataclass
class PCABasis:
    mean: np.ndarray        # (3m,) mm
    components: np.ndarray  # (B, 3m), orthonormal rows

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.components = np.asarray(self.components, dtype=float)
        if self.components.ndim != 2 or self.components.shape[1] != self.mean.shape[0]:
            raise ShapeMismatch("components must be (B, 3m) matching the mean")

    @property
    def num_joints(self) -> int:
        return self.mean.shape[0] // 3

    @property
    def num_components(self) -> int:
        return self.components.shape[0]

    def reconstruct(self, coefficients) -> np.ndarray:
        """Mean plus weighted components, reshaped to (m, 3)."""
        c = np.asarray(coefficients, dtype=float)
        flat = self.mean + c @ self.components
        return flat.reshape(self.num_joints, 3)

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "components": self.components.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "PCABasis":
        return cls(mean=np.array(obj["mean"]), components=np.array(obj["components"]))

    @classmethod
    def load(cls, path) -> "PCABasis":
        with open(path) as f:
            return cls.from_json(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)


def build_pca_basis(poses, n_components: int, root_index: int = 0) -> PCABasis:
    """Principal components of root-centered, flattened joint sets.

    Component signs are fixed (largest-magnitude entry positive) so the
    basis is deterministic across runs and platforms.
    """
    poses = np.asarray(poses, dtype=float)
    if poses.ndim != 3 or poses.shape[2] != 3:
        raise ShapeMismatch(f"poses must be (N, m, 3), got {poses.shape}")
    n = len(poses)
    if n < n_components + 1:
        raise InsufficientData(f"need at least {n_components + 1} poses, got {n}")
    centered = poses - poses[:, root_index:root_index + 1, :]
    x = centered.reshape(n, -1)
    mean = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
    comps = vt[:n_components].copy()
    for row in comps:
        k = int(np.argmax(np.abs(row)))
        if row[k] < 0:
            row *= -1.0
    return PCABasis(mean=mean, components=comps)


@dataclass
class WeakPerspectiveCamera:
    scale: float
    rotation: np.ndarray     # (3, 3)
    translation: np.ndarray  # (2,) px

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float)
        if self.scale <= 0:
            raise ValueError("camera scale must be positive")

    def project(self, points3d) -> np.ndarray:
        points3d = np.asarray(points3d, dtype=float)
        return self.scale * (points3d @ self.rotation.T)[:, :2] + self.translation

    def to_json(self) -> dict:
        return {
            "scale": float(self.scale),
            "rotation": [float(v) for v in self.rotation.ravel()],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "WeakPerspectiveCamera":
        return cls(scale=obj["scale"],
                   rotation=np.array(obj["rotation"]).reshape(3, 3),
                   translation=np.array(obj["translation"]))


@dataclass
class LiftResult:
    joints3d: np.ndarray        # (m, 3) mm
    camera: WeakPerspectiveCamera
    coefficients: np.ndarray    # (B,), zeros on unused components
    reprojection_error: float   # mean px
    verdict: str = "unreviewed"
    converged: bool = True

    def to_json(self) -> dict:
        return {
            "joints3d": [[float(v) for v in j] for j in self.joints3d],
            "camera": self.camera.to_json(),
            "coefficients": [float(c) for c in self.coefficients],
            "reprojection_error": float(self.reprojection_error),
            "verdict": self.verdict,
            "converged": bool(self.converged),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LiftResult":
        return cls(joints3d=np.array(obj["joints3d"]),
                   camera=WeakPerspectiveCamera.from_json(obj["camera"]),
                   coefficients=np.array(obj["coefficients"]),
                   reprojection_error=obj["reprojection_error"],
                   verdict=obj.get("verdict", "unreviewed"),
                   converged=obj.get("converged", True))


def fit_weak_perspective(points3d, keypoints2d, iters: int = 40) -> WeakPerspectiveCamera:
    """Least-squares scale/rotation/2D-translation fit of projections.

    Initialized by orthographic Procrustes (trace maximization over
    orthonormal 2x3 projections), then polished with a few Gauss-Newton
    steps because the closed form is only exact for isotropic point
    clouds.
    """
    x = np.asarray(points3d, dtype=float)
    y = np.asarray(keypoints2d, dtype=float)
    if x.shape[0] != y.shape[0] or x.shape[1] != 3 or y.shape[1] != 2:
        raise ShapeMismatch("need (m, 3) points and (m, 2) keypoints")
    mu_x = x.mean(axis=0)
    mu_y = y.mean(axis=0)
    xc = x - mu_x
    yc = y - mu_y

    m3 = xc.T @ yc  # (3, 2)
    w, _, zt = np.linalg.svd(m3, full_matrices=False)
    a = zt.T @ w.T  # (2, 3) orthonormal rows
    r3 = np.cross(a[0], a[1])
    rot = np.vstack([a, r3])
    proj = xc @ a.T
    denom = float(np.sum(proj * proj))
    if denom < 1e-12:
        raise DegenerateInput("3D points project to a single point")
    scale = max(float(np.sum(yc * proj)) / denom, 1e-9)

    for _ in range(iters):
        v = x @ rot.T  # rotated 3D points
        # Translation is solved implicitly by centering, so only
        # (ds, dw) appear in the Gauss-Newton system.
        vc = v - v.mean(axis=0)
        res_c = scale * vc[:, :2] - yc
        jac = np.zeros((2 * len(x), 4))
        jac[0::2, 0] = vc[:, 0]
        jac[1::2, 0] = vc[:, 1]
        # d(w x v)_xy for left-multiplied increment exp([dw]) rot
        jac[0::2, 1] = 0.0
        jac[0::2, 2] = scale * vc[:, 2]
        jac[0::2, 3] = -scale * vc[:, 1]
        jac[1::2, 1] = -scale * vc[:, 2]
        jac[1::2, 2] = 0.0
        jac[1::2, 3] = scale * vc[:, 0]
        rhs = -res_c.reshape(-1)
        delta, *_ = np.linalg.lstsq(jac, rhs, rcond=None)
        scale = max(scale + delta[0], 1e-9)
        wvec = delta[1:4]
        ang = np.linalg.norm(wvec)
        if ang > 0:
            rot = from_axis_angle(wvec / ang, ang) @ rot
        if np.linalg.norm(delta) < 1e-12:
            break
    v = x @ rot.T
    trans = mu_y - scale * v[:, :2].mean(axis=0)
    return WeakPerspectiveCamera(scale=scale, rotation=rot, translation=trans)


def _reproj_error(cam, points3d, keypoints2d) -> float:
    return float(np.mean(np.linalg.norm(cam.project(points3d) - keypoints2d, axis=1)))


def _refit_coeffs(basis, support, cam, keypoints2d):
    """Least-squares coefficients on the supported components, camera fixed."""
    m = basis.num_joints
    a = cam.rotation[:2]
    design = np.zeros((2 * m, len(support)))
    for col, k in enumerate(support):
        bk = basis.components[k].reshape(m, 3)
        design[:, col] = (cam.scale * bk @ a.T).reshape(-1)
    mean_proj = cam.scale * basis.mean.reshape(m, 3) @ a.T + cam.translation
    rhs = (np.asarray(keypoints2d, dtype=float) - mean_proj).reshape(-1)
    sol, *_ = np.linalg.lstsq(design, rhs, rcond=None)
    coeffs = np.zeros(basis.num_components)
    coeffs[list(support)] = sol
    return coeffs


def _joint_refine(basis, support, cam, coeffs, keypoints2d, iters=30):
    """Gauss-Newton over camera and supported coefficients together.

    Alternating camera fits with coefficient least squares converges at
    a crawl because camera rotation and depth-heavy components trade
    off against each other; the joint step removes that ping-pong.
    """
    y = np.asarray(keypoints2d, dtype=float)
    m = basis.num_joints
    scale, rot, trans = cam.scale, cam.rotation.copy(), cam.translation.copy()
    coeffs = coeffs.copy()
    comps = basis.components[list(support)].reshape(len(support), m, 3)
    n_par = 6 + len(support)
    for _ in range(iters):
        x = basis.reconstruct(coeffs)
        v = x @ rot.T
        pred = scale * v[:, :2] + trans
        res = (pred - y).reshape(-1)
        jac = np.zeros((2 * m, n_par))
        jac[0::2, 0] = v[:, 0]
        jac[1::2, 0] = v[:, 1]
        jac[0::2, 2] = scale * v[:, 2]
        jac[0::2, 3] = -scale * v[:, 1]
        jac[1::2, 1] = -scale * v[:, 2]
        jac[1::2, 3] = scale * v[:, 0]
        jac[0::2, 4] = 1.0
        jac[1::2, 5] = 1.0
        for col in range(len(support)):
            proj = comps[col] @ rot.T[:, :2]
            jac[0::2, 6 + col] = scale * proj[:, 0]
            jac[1::2, 6 + col] = scale * proj[:, 1]
        lhs = jac.T @ jac + 1e-9 * np.eye(n_par)
        delta = np.linalg.solve(lhs, -jac.T @ res)
        scale = max(scale + delta[0], 1e-9)
        ang = np.linalg.norm(delta[1:4])
        if ang > 0:
            rot = from_axis_angle(delta[1:4] / ang, ang) @ rot
        trans = trans + delta[4:6]
        for col, k in enumerate(support):
            coeffs[k] += delta[6 + col]
        if np.linalg.norm(delta) < 1e-10:
            break
    return WeakPerspectiveCamera(scale=scale, rotation=rot, translation=trans), coeffs


def pmp_lift(keypoints2d, basis: PCABasis, max_components: int | None = None,
             stop_tol: float = 1e-4) -> LiftResult:
    """Greedy matching-pursuit lifting of 2D keypoints to 3D joints.

    Starting from the mean pose, alternate (a) a weak-perspective camera
    fit to the current 3D estimate with (b) adding the unused component
    that most reduces the reprojection residual (all supported
    coefficients refitted by least squares). Stops when the support is
    full or the relative residual improvement drops below stop_tol; the
    `converged` flag records which.
    """
    y = np.asarray(keypoints2d, dtype=float)
    if y.ndim != 2 or y.shape != (basis.num_joints, 2):
        raise ShapeMismatch(f"keypoints2d must be ({basis.num_joints}, 2)")
    sv = np.linalg.svd(y - y.mean(axis=0), compute_uv=False)
    if sv[1] < 1e-9 * max(sv[0], 1.0):
        raise DegenerateInput("keypoints are collinear")
    if max_components is None:
        max_components = basis.num_components
    max_components = min(max_components, basis.num_components)

    coeffs = np.zeros(basis.num_components)
    support: list[int] = []
    x = basis.reconstruct(coeffs)
    cam = fit_weak_perspective(x, y)
    resid_prev = _reproj_error(cam, x, y)
    converged = True
    rel_improvement = 0.0

    while len(support) < max_components:
        best_k, best_coeffs, best_resid = -1, None, np.inf
        for k in range(basis.num_components):
            if k in support:
                continue
            trial = _refit_coeffs(basis, support + [k], cam, y)
            resid = _reproj_error(cam, basis.reconstruct(trial), y)
            if resid < best_resid:
                best_k, best_coeffs, best_resid = k, trial, resid
        support.append(best_k)
        cam = fit_weak_perspective(basis.reconstruct(best_coeffs), y)
        cam, coeffs = _joint_refine(basis, support, cam, best_coeffs, y)
        x = basis.reconstruct(coeffs)
        resid = _reproj_error(cam, x, y)
        rel_improvement = (resid_prev - resid) / max(resid_prev, 1e-12)
        resid_prev = resid
        if rel_improvement < stop_tol:
            break
    if support and len(support) == max_components and rel_improvement >= stop_tol:
        converged = False  # ran out of components while still improving

    return LiftResult(joints3d=x, camera=cam, coefficients=coeffs,
                      reprojection_error=_reproj_error(cam, x, y),
                      converged=converged)


@dataclass
class FitResult:
    pose: Pose
    energy: float
    energy_trace: np.ndarray = field(default=None)
    converged: bool = True


def _direction_frame(d, up=(0.0, 1.0, 0.0)):
    """Orthonormal frame whose first axis is the given direction."""
    t1 = d / np.linalg.norm(d)
    up = np.asarray(up, dtype=float)
    if abs(t1 @ up) > 0.99:
        up = np.array([1.0, 0.0, 0.0])
    t2 = up - (up @ t1) * t1
    t2 /= np.linalg.norm(t2)
    t3 = np.cross(t1, t2)
    return np.column_stack([t1, t2, t3])


def _project_so3(m):
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    flip = np.ones(3)
    flip[-1] = d
    return u @ np.diag(flip) @ vt


def fit_skeleton(target_joints, skel: Skeleton, w_pos: float = 1.0,
                 w_smooth: float = 0.01, max_iters: int = 100,
                 tol: float = 1e-9) -> FitResult:
    """Fit the rest skeleton to target joints by per-bone rotations.

    Minimizes w_pos * sum_j ||x_j - t_j||^2 + w_smooth * sum over
    parent/child bone pairs ||A_a - A_b||_F^2 over absolute bone
    rotations, with positions produced by forward kinematics, so bone
    lengths are preserved exactly no matter the targets. Each sweep
    performs exact single-bone coordinate descent (rotating a bone
    translates its whole subtree, which makes the per-bone subproblem a
    closed-form orthogonal Procrustes), so the energy never increases.

    Initial rotations map rest bone directions onto target bone
    directions via per-bone coordinate frames with a fixed up vector.
    """
    targets = np.asarray(target_joints, dtype=float)
    if targets.shape != (skel.num_joints, 3):
        raise ShapeMismatch(f"target_joints must be ({skel.num_joints}, 3)")
    if not np.all(np.isfinite(targets)):
        raise DegenerateInput("target joints must be finite")
    targets = targets - targets[skel.root]
    n = skel.num_bones

    target_vecs = bone_vectors(skel, targets)
    rots = np.empty((n, 3, 3))
    for b in range(n):
        tv = target_vecs[b]
        if np.linalg.norm(tv) < 1e-9:
            rots[b] = np.eye(3)
            continue
        rots[b] = _direction_frame(tv) @ _direction_frame(skel.rest_bone_vectors[b]).T

    neighbors: list[list[int]] = [[] for _ in range(n)]
    child_joint = {c: i for i, (_, c) in enumerate(skel.bones)}
    for i, (p, _c) in enumerate(skel.bones):
        j = child_joint.get(p)
        if j is not None:
            neighbors[i].append(j)
            neighbors[j].append(i)
    subtrees = [skel.subtree_joints(b) for b in range(n)]

    def energy(joints, rot_set):
        e = w_pos * float(np.sum((joints - targets) ** 2))
        for i in range(n):
            for j in neighbors[i]:
                if j > i:
                    e += w_smooth * float(np.sum((rot_set[i] - rot_set[j]) ** 2))
        return e

    identity = np.eye(3)
    joints = forward_kinematics(skel, identity, rots).joints
    trace = [energy(joints, rots)]
    converged = False
    for _ in range(max_iters):
        for b in range(n):
            v = skel.rest_bone_vectors[b]
            sub = subtrees[b]
            u_sum = np.zeros(3)
            for j in sub:
                u_sum += targets[j] - joints[j]
            u_sum += len(sub) * (rots[b] @ v)
            f = w_pos * np.outer(u_sum, v)
            for a in neighbors[b]:
                f += w_smooth * rots[a]
            new_rot = _project_so3(f)
            shift = (new_rot - rots[b]) @ v
            for j in sub:
                joints[j] += shift
            rots[b] = new_rot
        trace.append(energy(joints, rots))
        if trace[-2] - trace[-1] < tol * max(trace[-2], 1e-12):
            converged = True
            break

    pose = forward_kinematics(skel, identity, rots)
    return FitResult(pose=pose, energy=trace[-1],
                     energy_trace=np.array(trace), converged=converged)


def read_keypoints_jsonl(path) -> list[tuple[str, np.ndarray]]:
    """One sample per line: {"id": ..., "keypoints": [[u, v] x m]}."""
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append((str(obj["id"]), np.array(obj["keypoints"], dtype=float)))
    return out


def write_keypoints_jsonl(samples, path):
    with open(path, "w") as f:
        for sample_id, kp in samples:
            f.write(json.dumps({"id": str(sample_id),
                                "keypoints": [[float(u), float(v)] for u, v in kp]}) + "\n")


def annotate_batch(keypoint_file, basis: PCABasis, skel: Skeleton, out_dir,
                   max_components: int | None = None) -> list[tuple[str, LiftResult]]:
    """Lift, fit and render every sample in a keypoint file.

    Writes <id>.lift.json (lift result + keypoints + fitted pose) and
    <id>.preview.obj (skinned tube body) per sample; verdicts start as
    'unreviewed'. Output is deterministic, so reruns are byte-identical.
    """
    from .assembly import FinalPose
    from .skinning import SkinnedMesh, auto_weights, export_obj, make_demo_body, skin

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = read_keypoints_jsonl(keypoint_file)

    verts, faces = make_demo_body(skel)
    weights = auto_weights(verts, skel)
    bind = forward_kinematics(skel, np.eye(3), np.tile(np.eye(3), (skel.num_bones, 1, 1)))
    mesh = SkinnedMesh(vertices=verts, faces=faces, weights=weights,
                       bind_pose=bind, skeleton=skel)

    results = []
    for sample_id, kp in samples:
        lift = pmp_lift(kp, basis, max_components=max_components)
        fit = fit_skeleton(lift.joints3d, skel)
        posed = FinalPose(global_rot=fit.pose.global_rot,
                          rotations=fit.pose.absolute, joints=fit.pose.joints)
        export_obj(skin(mesh, posed), faces, out_dir / f"{sample_id}.preview.obj")
        payload = lift.to_json()
        payload["id"] = sample_id
        payload["keypoints2d"] = [[float(u), float(v)] for u, v in kp]
        payload["pose"] = fit.pose.to_json()
        payload["fit_converged"] = bool(fit.converged)
        with open(out_dir / f"{sample_id}.lift.json", "w") as f:
            json.dump(payload, f, indent=1)
        results.append((sample_id, lift))
    return results


def export_training_set(items: list[dict], verdicts: dict) -> list[dict]:
    """Keep only items a reviewer marked acceptable.

    Unreviewed and bad samples are both excluded from training data.
    """
    kept = []
    for item in items:
        if verdicts.get(str(item.get("id"))) == "acceptable":
            kept.append(item)
    return kept
