"""Command-line front door for the reconstruction pipeline.

Subcommands: simulate, gen-dataset, train, eval, reconstruct, experiment.
Every command accepts --config FILE (key=value lines) and repeatable
--set key=value overrides; dedicated flags win over --set, which wins over
the file, which wins over built-in defaults.  All randomness descends from
the run seed: command k's sample i uses SeedSequence([seed, i]).  Exit
codes: 0 success, 2 usage or bad configuration, 3 malformed or missing
data, 4 numeric failure during training.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys

import numpy as np

from .augment import (AllPointsRemoved, DatasetError, NoVisibleSurface,
                      load_dataset, make_dataset)
from .cloudio import FormatError, atomic_write_text, load_rfpc, save_ply, save_rfpc
from .config import (ConfigError, build_run_config, load_config_file,
                     parse_config_text, run_config_text)
from .experiments import UnknownExperiment, run_experiment
from .fusion import fuse_frame
from .geometry import PointCloud
from .meshes import DegenerateMesh, MeshParseError, load_obj
from .metrics import chamfer, chamfer_l2, emd_approx
from .net.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .net.train import NonFiniteLoss, infer_clouds, split_samples, train
from .radar import SceneParseError, load_scene, save_heatmap, simulate_frame
from .temporal import (EmptyTrajectory, Trajectory, TrajectoryFrame,
                       TrajectoryParseError, accumulate, load_trajectory)

_DATA_ERRORS = (SceneParseError, TrajectoryParseError, MeshParseError,
                DegenerateMesh, FormatError, CheckpointError, DatasetError,
                EmptyTrajectory, NoVisibleSurface, AllPointsRemoved, OSError)


def _csv_text(fieldnames, rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _load_layers(args) -> list:
    """Config mappings in precedence order: file, then --set pairs."""
    layers = []
    if args.config:
        layers.append(load_config_file(args.config))
    if args.set:
        layers.append(parse_config_text("\n".join(args.set), source="--set"))
    return layers


def _flag_map(args, names: dict) -> dict:
    """Dedicated flags as a config mapping (only the ones actually given)."""
    out = {}
    for attr, key in names.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = str(value)
    return out


def _run_config(args, extra_flags: dict = {}):
    flags = _flag_map(args, {"seed": "seed", "norm_mode": "norm_mode"})
    flags.update(extra_flags)
    return build_run_config(*_load_layers(args), flags)


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def cmd_simulate(args) -> int:
    cfg = _run_config(args)
    scene = load_scene(args.scene)
    traj = load_trajectory(args.trajectory)
    os.makedirs(args.out_dir, exist_ok=True)
    rows = []
    fused_frames = []
    for i, fr in enumerate(traj.frames):
        cap = simulate_frame(scene, cfg.rig, fr.pose, t=fr.t,
                             rng=_sample_rng(cfg.seed, i))
        cloud, _ = fuse_frame(cap, cfg.cfar, cfg.fusion, cfg.nms_radius)
        stem = f"frame_{i:04d}"
        save_heatmap(os.path.join(args.out_dir, stem + "_h.hm"),
                     cap.horizontal)
        save_heatmap(os.path.join(args.out_dir, stem + "_v.hm"),
                     cap.vertical)
        save_rfpc(os.path.join(args.out_dir, stem + ".rfpc"), cloud)
        fused_frames.append(TrajectoryFrame(t=fr.t, pose=fr.pose,
                                            cloud=cloud))
        q = fr.pose.quaternion()
        rows.append({
            "frame": i, "t": repr(float(fr.t)),
            "x": repr(float(fr.pose.translation[0])),
            "y": repr(float(fr.pose.translation[1])),
            "z": repr(float(fr.pose.translation[2])),
            "qw": repr(float(q[0])), "qx": repr(float(q[1])),
            "qy": repr(float(q[2])), "qz": repr(float(q[3])),
            "h_heatmap": stem + "_h.hm", "v_heatmap": stem + "_v.hm",
            "cloud": stem + ".rfpc", "n_points": len(cloud.points),
        })
    accumulated = accumulate(Trajectory(fused_frames),
                             max_frames=cfg.max_frames,
                             max_path_length=cfg.max_path_length)
    save_rfpc(os.path.join(args.out_dir, "accumulated.rfpc"), accumulated)
    atomic_write_text(os.path.join(args.out_dir, "manifest.csv"),
                      _csv_text(["frame", "t", "x", "y", "z", "qw", "qx",
                                 "qy", "qz", "h_heatmap", "v_heatmap",
                                 "cloud", "n_points"], rows))
    atomic_write_text(os.path.join(args.out_dir, "effective_config.txt"),
                      run_config_text(cfg))
    print(f"{len(rows)} frames -> {args.out_dir} "
          f"(accumulated {len(accumulated.points)} points)")
    return 0


def _meshes_from_dir(mesh_dir):
    """(class, object, mesh) triples from OBJ files; 'box_001.obj' is
    object box_001 of class box, a stem without a numeric tail is its own
    class."""
    names = sorted(n for n in os.listdir(mesh_dir) if n.endswith(".obj"))
    if not names:
        raise DatasetError(f"no .obj files under {mesh_dir}")
    meshes = []
    for name in names:
        stem = name[:-4]
        head, _, tail = stem.rpartition("_")
        class_name = head if head and tail.isdigit() else stem
        meshes.append((class_name, stem, load_obj(os.path.join(mesh_dir,
                                                               name))))
    return meshes


def cmd_gen_dataset(args) -> int:
    flags = _flag_map(args, {
        "per_object": "dataset.per_object",
        "n_partial": "dataset.n_partial",
        "n_complete": "dataset.n_complete",
        "recipes": "dataset.recipes",
    })
    cfg = _run_config(args, flags)
    meshes = _meshes_from_dir(args.mesh_dir) if args.mesh_dir else None
    written = []
    failed = []

    def progress(rel):
        written.append(rel)
        print(f"wrote {rel}")

    def on_error(rel, exc):
        failed.append(rel)
        print(f"failed {rel}: {exc}", file=sys.stderr)

    manifest = make_dataset(args.out_dir, meshes=meshes,
                            per_object=cfg.per_object, recipes=cfg.recipes,
                            n_partial=cfg.n_partial,
                            n_complete=cfg.n_complete, seed=cfg.seed,
                            progress=progress, on_error=on_error)
    atomic_write_text(os.path.join(args.out_dir, "effective_config.txt"),
                      run_config_text(cfg))
    n_listed = sum(1 for _ in open(manifest)) - 1
    print(f"{len(written)} new samples, {n_listed} in manifest, "
          f"{len(failed)} failed")
    if n_listed == 0:
        print("error: no samples were generated", file=sys.stderr)
        return 3
    return 0


def _write_checkpoint_and_logs(out_dir, result, cfg):
    save_checkpoint(os.path.join(out_dir, "checkpoint.rfck"), result.params,
                    result.model_config, result.norm_mode)
    atomic_write_text(
        os.path.join(out_dir, "history.csv"),
        _csv_text(["step", "loss", "emd", "cd", "cls", "alpha"],
                  [{k: repr(v) if isinstance(v, float) else v
                    for k, v in vars(r).items()} for r in result.steps]))
    atomic_write_text(
        os.path.join(out_dir, "epochs.csv"),
        _csv_text(["epoch", "loss", "emd", "cd", "cls", "accuracy"],
                  [{k: repr(v) if isinstance(v, float) else v
                    for k, v in vars(r).items()} for r in result.epochs]))
    atomic_write_text(os.path.join(out_dir, "effective_config.txt"),
                      run_config_text(cfg))


def cmd_train(args) -> int:
    flags = _flag_map(args, {
        "steps": "train.steps",
        "batch_size": "train.batch_size",
        "learning_rate": "train.learning_rate",
        "optimizer": "train.optimizer",
        "beta": "train.beta",
    })
    cfg = _run_config(args, flags)
    samples = load_dataset(args.dataset)
    train_set, val_set = split_samples(samples, args.val_fraction,
                                       seed=cfg.seed)
    if not train_set:
        raise DatasetError("empty training split")
    os.makedirs(args.out_dir, exist_ok=True)
    atomic_write_text(
        os.path.join(args.out_dir, "split.csv"),
        _csv_text(["sample_dir", "subset"],
                  [{"sample_dir": s.sample_dir, "subset": "train"}
                   for s in train_set] +
                  [{"sample_dir": s.sample_dir, "subset": "val"}
                   for s in val_set]))

    def on_step(rec):
        if rec.step % args.log_every == 0:
            print(f"step {rec.step} loss {rec.loss:.6f} emd {rec.emd:.6f} "
                  f"cd {rec.cd:.6f} cls {rec.cls:.6f}")

    try:
        result = train(train_set, cfg.model, cfg.train, on_step=on_step)
    except NonFiniteLoss as exc:
        save_checkpoint(os.path.join(args.out_dir, "checkpoint_last_good.rfck"),
                        exc.params, cfg.model, cfg.train.norm_mode)
        print(f"error: non-finite loss at step {exc.step}; last good "
              f"parameters saved", file=sys.stderr)
        return 4
    _write_checkpoint_and_logs(args.out_dir, result, cfg)
    last = result.epochs[-1]
    print(f"trained {cfg.train.steps} steps ({len(result.epochs)} epochs), "
          f"final loss {last.loss:.6f}, train accuracy {last.accuracy:.3f}")
    print(f"checkpoint -> {os.path.join(args.out_dir, 'checkpoint.rfck')}")
    return 0


def _emd_subsampled(pred, gt, n_max, rng):
    """EMD needs equal counts; shared index draws keep identical clouds at
    exactly zero."""
    n = min(n_max, len(pred), len(gt))
    idx_a = rng.choice(len(pred), size=n, replace=False)
    idx_b = idx_a if len(gt) == len(pred) else rng.choice(len(gt), size=n,
                                                          replace=False)
    return emd_approx(pred[np.sort(idx_a)], gt[np.sort(idx_b)])


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    samples = load_dataset(args.dataset)
    checkpoint = None
    if args.checkpoint:
        checkpoint = load_checkpoint(args.checkpoint)
    rows = []
    correct = 0
    for i, s in enumerate(samples):
        rng = _sample_rng(cfg.seed, i)
        pred_class = ""
        if checkpoint is not None:
            params, model_cfg, norm_mode = checkpoint
            _, pred, cls = infer_clouds(params, model_cfg, s.partial,
                                        norm_mode, rng)
            pred_class = cls
            correct += int(cls == s.class_id)
        else:
            path = os.path.join(args.predictions, s.sample_dir, "fine.rfpc")
            if not os.path.exists(path):
                path = os.path.join(args.predictions, s.sample_dir,
                                    "complete.rfpc")
            pred = load_rfpc(path).points
        rows.append({
            "sample": s.sample_dir, "class_name": s.class_name,
            "class_id": s.class_id, "recipe": s.recipe,
            "n_points": len(pred),
            "cd_sq_m2": repr(float(chamfer(pred, s.complete))),
            "cd_l2_m": repr(float(chamfer_l2(pred, s.complete))),
            "emd_l2_m": repr(float(_emd_subsampled(pred, s.complete,
                                                   args.emd_points, rng))),
            "pred_class": pred_class,
        })
    by_class = {}
    for r in rows:
        by_class.setdefault(r["class_name"], []).append(r)
    mean_rows = []
    for name in sorted(by_class) + ["all"]:
        group = rows if name == "all" else by_class[name]
        mean_rows.append({
            "sample": f"mean/{name}", "class_name": name, "class_id": "",
            "recipe": "", "n_points": "",
            "cd_sq_m2": repr(float(np.mean([float(r["cd_sq_m2"])
                                            for r in group]))),
            "cd_l2_m": repr(float(np.mean([float(r["cd_l2_m"])
                                           for r in group]))),
            "emd_l2_m": repr(float(np.mean([float(r["emd_l2_m"])
                                            for r in group]))),
            "pred_class": "",
        })
    fields = ["sample", "class_name", "class_id", "recipe", "n_points",
              "cd_sq_m2", "cd_l2_m", "emd_l2_m", "pred_class"]
    atomic_write_text(args.out, _csv_text(fields, rows + mean_rows))
    overall = mean_rows[-1]
    print(f"{len(rows)} samples: mean cd_l2 {overall['cd_l2_m']} m, "
          f"mean emd_l2 {overall['emd_l2_m']} m")
    if checkpoint is not None:
        print(f"classification accuracy {correct / len(rows):.3f}")
    print(f"report -> {args.out}")
    return 0


def cmd_reconstruct(args) -> int:
    cfg = _run_config(args)
    cloud = load_rfpc(args.partial)
    params, model_cfg, norm_mode = load_checkpoint(args.checkpoint)
    if args.norm_mode:
        norm_mode = args.norm_mode
    coarse, fine, cls = infer_clouds(params, model_cfg, cloud.points,
                                     norm_mode, _sample_rng(cfg.seed, 0))
    os.makedirs(args.out_dir, exist_ok=True)
    save_ply(os.path.join(args.out_dir, "coarse.ply"), PointCloud(coarse))
    save_ply(os.path.join(args.out_dir, "fine.ply"), PointCloud(fine))
    print(f"coarse {len(coarse)} points, fine {len(fine)} points, "
          f"predicted class {cls}")
    return 0


def cmd_experiment(args) -> int:
    cfg = _run_config(args)
    kwargs = {}
    if args.n_seeds is not None:
        kwargs["n_seeds"] = args.n_seeds
    if args.frame_counts is not None:
        kwargs["frame_counts"] = tuple(
            int(v) for v in args.frame_counts.split(",") if v)
    fields, rows = run_experiment(args.name, seed=cfg.seed, **kwargs)
    atomic_write_text(args.out, _csv_text(fields, rows))
    print(f"{len(rows)} rows -> {args.out}")
    return 0


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="root random seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rfc",
        description="Orthogonal-radar 3D reconstruction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate",
                       help="simulate a rig pass and fuse per-frame clouds")
    _add_common(p)
    p.add_argument("scene", help="scene file: x y z refl [nx ny nz] lines")
    p.add_argument("trajectory", help="trajectory file: t x y z qw qx qy qz")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gen-dataset",
                       help="generate a partial/complete training dataset")
    _add_common(p)
    p.add_argument("out_dir")
    p.add_argument("--mesh-dir", help="directory of OBJ meshes "
                   "(default: built-in primitive set)")
    p.add_argument("--per-object", type=int)
    p.add_argument("--n-partial", type=int)
    p.add_argument("--n-complete", type=int)
    p.add_argument("--recipes", help="comma list: depth,radar")
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="train the completion network")
    _add_common(p)
    p.add_argument("dataset", help="dataset root (gen-dataset output)")
    p.add_argument("out_dir")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--beta", type=float,
                   help="classification loss weight (0 disables)")
    p.add_argument("--norm-mode", choices=("centroid", "bbox"))
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score predictions against a dataset")
    _add_common(p)
    p.add_argument("dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="run the network from this file")
    src.add_argument("--predictions", help="directory mirroring the dataset "
                     "tree with fine.rfpc (or complete.rfpc) per sample")
    p.add_argument("-o", "--out", default="eval.csv")
    p.add_argument("--emd-points", type=int, default=1024,
                   help="subsample size for the EMD column")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct",
                       help="complete one partial cloud with a checkpoint")
    _add_common(p)
    p.add_argument("partial", help="partial cloud (.rfpc)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-o", "--out-dir", required=True)
    p.add_argument("--norm-mode", choices=("centroid", "bbox"),
                   help="override the checkpoint's normalization")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("experiment", help="run a built-in study, write CSV")
    _add_common(p)
    p.add_argument("name", help="frames_ablation or sar_vs_fusion")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--n-seeds", type=int,
                   help="Monte-Carlo seeds (sar_vs_fusion)")
    p.add_argument("--frame-counts",
                   help="comma list of counts (frames_ablation)")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UnknownExperiment, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
