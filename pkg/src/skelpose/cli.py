"""Command-line surface.

One binary with subcommands, JSON in and out. Runtime failures print a
machine-readable error object to stderr and exit nonzero; outputs are
deterministic for fixed inputs and seeds.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import diffgraph, heatmaps, lifting, objectives, review, skinning
from .assembly import FinalPose
from .codebook import RotationCodebook, build_codebook
from .errors import ShapeMismatch
from .heatmaps import VolumeBounds
from .rotations import random_rotation
from .skeleton import Skeleton, forward_kinematics, pose_from_json


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": "usage", "message": message}), file=sys.stderr)
        sys.exit(2)


def _load_skeleton(args) -> Skeleton:
    return Skeleton.load(args.skeleton) if args.skeleton else Skeleton.default()


def _load_bounds(args) -> VolumeBounds:
    if not args.bounds:
        return VolumeBounds.cube()
    try:
        return VolumeBounds.cube(side=float(args.bounds))
    except ValueError:
        with open(args.bounds) as f:
            obj = json.load(f)
        return VolumeBounds(lower=np.array(obj["lower"]), upper=np.array(obj["upper"]))


def _load_weights(args) -> objectives.LossWeights:
    if not args.weights:
        return objectives.LossWeights()
    a, b, g, lam = (float(v) for v in args.weights.split(","))
    return objectives.LossWeights(alpha=a, beta=b, gamma=g, lam=lam)


def _final_pose_from_json(skel, obj) -> FinalPose:
    g = np.array(obj["global"], dtype=float).reshape(3, 3)
    rel = np.array(obj["bones"], dtype=float).reshape(-1, 3, 3)
    if "x" in obj:
        joints = np.array(obj["x"], dtype=float)
    else:
        joints = forward_kinematics(skel, g, rel).joints
    return FinalPose(global_rot=g, rotations=g @ rel, joints=joints)


def cmd_fk(args):
    skel = _load_skeleton(args)
    with open(args.pose) as f:
        pose = pose_from_json(skel, json.load(f))
    json.dump({"joints": [[float(v) for v in j] for j in pose.joints]},
              sys.stdout, indent=1)
    print()


def cmd_encode(args):
    skel = _load_skeleton(args)
    with open(args.pose) as f:
        obj = json.load(f)
    joints = (np.array(obj["joints"], dtype=float) if "joints" in obj
              else pose_from_json(skel, obj).joints)
    ch = heatmaps.encode_cross(joints, _load_bounds(args), grid=args.grid, sigma=args.sigma)
    heatmaps.save_cross(ch, args.out)
    print(json.dumps({"out": str(args.out), "joints": int(ch.num_joints),
                      "out_of_bounds": int(ch.out_of_bounds.sum())}))


def cmd_decode(args):
    ch = heatmaps.load_cross(args.heatmap)
    joints, uniform = heatmaps.decode_cross(ch, _load_bounds(args), temperature=args.temperature)
    json.dump({"joints": [[float(v) for v in j] for j in joints],
               "uniform": [bool(u) for u in uniform]}, sys.stdout, indent=1)
    print()


def cmd_eval(args):
    skel = _load_skeleton(args)
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    names = sorted(p.name for p in gt_dir.glob("*.json"))
    if not names:
        raise FileNotFoundError(f"no *.json pose files in {gt_dir}")
    rows = []
    for name in names:
        with open(gt_dir / name) as f:
            gt = _final_pose_from_json(skel, json.load(f))
        with open(pred_dir / name) as f:
            pred = _final_pose_from_json(skel, json.load(f))
        g_err, b_err = objectives.rotation_errors(pred, gt)
        rows.append({
            "name": name,
            "mpjpe_mm": objectives.mpjpe(pred.joints, gt.joints, skel, l_ave=args.l_ave),
            "recon_mm": objectives.reconstruction_error(pred.joints, gt.joints),
            "global_rot_deg": g_err,
            "bone_rot_deg": b_err,
        })
    json.dump(objectives.evaluation_report(rows), sys.stdout, indent=1)
    print()


def cmd_lift(args):
    skel = _load_skeleton(args)
    basis = lifting.PCABasis.load(args.basis)
    results = lifting.annotate_batch(args.keypoints, basis, skel, args.out,
                                     max_components=args.max_components)
    print(json.dumps({"out": str(args.out), "samples": len(results)}))


def cmd_fit(args):
    skel = _load_skeleton(args)
    with open(args.targets) as f:
        targets = np.array(json.load(f)["joints"], dtype=float)
    result = lifting.fit_skeleton(targets, skel)
    out = result.pose.to_json()
    out["energy"] = float(result.energy)
    out["converged"] = bool(result.converged)
    json.dump(out, sys.stdout, indent=1)
    print()


def cmd_train_toy(args):
    skel = _load_skeleton(args)
    if args.codebook:
        cb = RotationCodebook.load(args.codebook)
    else:
        rng = np.random.default_rng(args.seed)
        cb = build_codebook(np.array([random_rotation(rng) for _ in range(4 * args.clusters)]),
                            n_clusters=args.clusters, seed=args.seed)
    ds = diffgraph.make_synthetic_dataset(args.samples, skel, cb, noise=args.noise,
                                          seed=args.seed, grid=args.grid)
    result = diffgraph.train_toy(ds, weights=_load_weights(args), epochs=args.epochs,
                                 lr=args.lr, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    diffgraph.write_loss_curve(result.curve, out_dir / "loss_curve.csv")
    result.model.save(out_dir / "checkpoint.json")
    print(json.dumps({
        "out": str(out_dir),
        "epochs": int(len(result.curve)),
        "final_total": float(result.curve[-1, 0]) if len(result.curve) else None,
        "diverged": bool(result.diverged),
    }))


def cmd_gradcheck(args):
    rows = run_layer_gradchecks(seed=args.seed)
    failed = False
    for name, err, tol in rows:
        status = "ok" if err < tol else "FAIL"
        failed = failed or err >= tol
        print(f"{name:<14} max_rel_err={err:.3e}  tol={tol:g}  {status}")
    if failed:
        raise ShapeMismatch("gradcheck failed")


def run_layer_gradchecks(seed: int = 0, instances: int = 10):
    """Small gradcheck sweep over every differentiable layer."""
    rng = np.random.default_rng(seed)
    skel = Skeleton.default()
    cb = build_codebook(np.array([random_rotation(rng) for _ in range(12)]),
                        n_clusters=3, seed=seed)
    rows = []

    def sweep(name, fn, make_inputs, tol=1e-4):
        err = max(diffgraph.gradcheck(fn, make_inputs()) for _ in range(instances))
        rows.append((name, err, tol))

    probe_j = rng.normal(size=(skel.num_joints, 3))
    sweep("gram_schmidt",
          lambda t, m: t.loss_mse(t.gram_schmidt(m), np.zeros((3, 3))),
          lambda: [rng.normal(size=(3, 3)) + 2.0 * np.eye(3)])
    sweep("fk",
          lambda t, g, b: t.inner(t.forward_kinematics(skel, t.gram_schmidt(g),
                                                       t.gram_schmidt_stack(b)),
                                  probe_j),
          lambda: [rng.normal(size=(3, 3)) + 2.0 * np.eye(3),
                   rng.normal(size=(skel.num_bones, 3, 3)) + 2.0 * np.eye(3)])
    sweep("soft_argmax",
          lambda t, h: t.loss_mse(t.soft_argmax_stack(h, 0.25), np.zeros((1, 2))),
          lambda: [rng.uniform(0.2, 1.0, size=(1, 12, 12))])
    sweep("blend",
          lambda t, p: t.loss_mse(t.blend(cb, t.softmax(p)), np.zeros((3, 3))),
          lambda: [rng.normal(size=cb.K)])
    sweep("loss_rotg",
          lambda t, p: t.loss_rotg(t.softmax(p), 1),
          lambda: [rng.normal(size=cb.K)])
    sweep("loss_mse",
          lambda t, x: t.loss_mse(x, np.ones((4, 3))),
          lambda: [rng.normal(size=(4, 3))])
    return rows


def cmd_skin(args):
    skel = _load_skeleton(args)
    with open(args.pose) as f:
        pose = _final_pose_from_json(skel, json.load(f))
    if args.mesh:
        verts, faces = skinning.load_obj(args.mesh)
    else:
        verts, faces = skinning.make_demo_body(skel)
    weights = skinning.auto_weights(verts, skel)
    bind = forward_kinematics(skel, np.eye(3), np.tile(np.eye(3), (skel.num_bones, 1, 1)))
    mesh = skinning.SkinnedMesh(vertices=verts, faces=faces, weights=weights,
                                bind_pose=bind, skeleton=skel)
    skinning.export_obj(skinning.skin(mesh, pose), faces, args.out)
    print(json.dumps({"out": str(args.out), "vertices": int(len(verts))}))


def cmd_serve(args):
    store = review.ReviewStore(args.batch)
    server = review.make_review_server(store, port=args.port, static_dir=args.static)
    host, port = server.server_address
    print(json.dumps({"serving": f"http://{host}:{port}", "items": len(store.items)}))
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()


def build_parser() -> _Parser:
    parser = _Parser(prog="skelpose", description="skeleton pose toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--skeleton", help="skeleton JSON (default: bundled 16-joint)")
        p.add_argument("--bounds", help="volume bounds: side length or JSON file")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = common(sub.add_parser("fk", help="pose JSON -> joints JSON"))
    p.add_argument("--pose", required=True)
    p.set_defaults(fn=cmd_fk)

    p = common(sub.add_parser("encode", help="pose/joints JSON -> cross-heatmap binary"))
    p.add_argument("--pose", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--sigma", type=float, default=1.0)
    p.set_defaults(fn=cmd_encode)

    p = common(sub.add_parser("decode", help="cross-heatmap binary -> joints JSON"))
    p.add_argument("--heatmap", required=True)
    p.add_argument("--temperature", type=float, default=0.1)
    p.set_defaults(fn=cmd_decode)

    p = common(sub.add_parser("eval", help="pred vs gt pose directories -> metrics report"))
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--l-ave", type=float, default=None, dest="l_ave")
    p.set_defaults(fn=cmd_eval)

    p = common(sub.add_parser("lift", help="2D keypoints -> lifted batch with previews"))
    p.add_argument("--keypoints", required=True)
    p.add_argument("--basis", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-components", type=int, default=None)
    p.set_defaults(fn=cmd_lift)

    p = common(sub.add_parser("fit", help="target joints -> fitted pose JSON"))
    p.add_argument("--targets", required=True)
    p.set_defaults(fn=cmd_fit)

    p = common(sub.add_parser("train-toy", help="train the toy model on synthetic data"))
    p.add_argument("--codebook")
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--clusters", type=int, default=3)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--weights", help="alpha,beta,gamma,lambda")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_toy)

    p = common(sub.add_parser("gradcheck", help="finite-difference check of every layer"))
    p.set_defaults(fn=cmd_gradcheck)

    p = common(sub.add_parser("skin", help="pose JSON (+ optional OBJ) -> skinned OBJ"))
    p.add_argument("--pose", required=True)
    p.add_argument("--mesh")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_skin)

    p = common(sub.add_parser("serve", help="review service over a lifted batch"))
    p.add_argument("--batch", required=True)
    p.add_argument("--port", type=int, default=8100)
    p.add_argument("--static", help="review client asset directory")
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except Exception as exc:  # noqa: BLE001 - uniform machine-readable failure
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
