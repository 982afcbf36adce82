"""Command-line entry point wiring all pipeline stages.

Stages read and write fixed file names inside a flat working directory so
they compose without flag plumbing:

    synth     -> pc1.xyz, pc2.xyz, scene_meta.json, scene_spec.json
    features  -> work_pc1.xyz, work_pc2.xyz, features_pc1.dcft,
                 features_pc2.dcft, feature_scaler.json
    train     -> ckpt/epoch_*.dcnp, model.dcnp(+.json), kmeans.dckm,
                 train_log.jsonl, ysim.txt (contrastive modes)
    infer     -> pred_pseudo.txt
    map       -> mapping.json
    eval      -> metrics.json, metrics.txt
    serve     -> blocking HTTP service for the labeling UI
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cluster as cl
from . import evalmap, similarity, synth, trainer
from .core import load_xyz, save_xyz
from .features import (FeatureParams, FeatureSet, Neighborhood,
                       read_feature_cache, read_scaler, write_feature_cache,
                       write_scaler)
from .net import BackboneConfig, load_checkpoint, save_checkpoint


class DependencyError(RuntimeError):
    """A stage ran before the stage that produces its inputs."""


@dataclass
class PipelineConfig:
    dl0: float = 1.0
    radius: float = 15.0
    k: int = 50
    feature_radius: float = None  # default 2.5 * dl0
    dtm_cell: float = 5.0
    classes: tuple = synth.CLASS_NAMES
    train: dict = field(default_factory=dict)
    backbone: dict = field(default_factory=dict)

    def feature_params(self) -> FeatureParams:
        r = self.feature_radius if self.feature_radius else 2.5 * self.dl0
        return FeatureParams(neighborhood=Neighborhood("radius", r),
                             dtm_cell=self.dtm_cell)

    @staticmethod
    def load(path) -> "PipelineConfig":
        doc = json.loads(Path(path).read_text())
        doc.pop("schema", None)
        if "classes" in doc:
            doc["classes"] = tuple(doc["classes"])
        return PipelineConfig(**doc)


def _require(workdir: Path, name: str, produced_by: str) -> Path:
    path = workdir / name
    if not path.exists():
        raise DependencyError(
            f"missing artifact {name!r} in {workdir}; run the {produced_by!r} stage first")
    return path


def cmd_synth(args, cfg: PipelineConfig) -> int:
    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    if args.spec:
        spec_path = Path(args.spec)
        if not spec_path.exists():
            print(f"error: scene spec {spec_path} does not exist", file=sys.stderr)
            return 2
        spec = synth.SceneSpec.from_json(spec_path.read_text())
    else:
        spec = synth.demo_spec(seed=args.seed or 0, extent=args.extent,
                               density=args.density)
    if args.seed is not None:
        spec.rng_seed = args.seed
    pair = synth.generate(spec)
    meta = synth.write_scene(pair, workdir)
    (workdir / "scene_spec.json").write_text(spec.to_json())
    print(f"wrote pc1.xyz ({meta['n_pc1']} pts), pc2.xyz ({meta['n_pc2']} pts), "
          f"scene_meta.json to {workdir}")
    return 0


def cmd_features(args, cfg: PipelineConfig) -> int:
    workdir = Path(args.workdir)
    pc1 = load_xyz(_require(workdir, "pc1.xyz", "synth"), epoch_tag=1)
    pc2 = load_xyz(_require(workdir, "pc2.xyz", "synth"), epoch_tag=2)
    ds = trainer.prepare_dataset(pc1, pc2, cfg.dl0, cfg.feature_params())
    save_xyz(ds.pc1, workdir / "work_pc1.xyz")
    save_xyz(ds.pc2, workdir / "work_pc2.xyz")
    write_feature_cache(workdir / "features_pc1.dcft", ds.features.raw1)
    write_feature_cache(workdir / "features_pc2.dcft", ds.features.raw2)
    write_scaler(workdir / "feature_scaler.json", ds.features)
    print(f"working clouds: {len(ds.pc1)} / {len(ds.pc2)} points at dl0={cfg.dl0}")
    return 0


def load_dataset(workdir: Path, cfg: PipelineConfig) -> trainer.ChangeDataset:
    pc1 = load_xyz(_require(workdir, "work_pc1.xyz", "features"), epoch_tag=1)
    pc2 = load_xyz(_require(workdir, "work_pc2.xyz", "features"), epoch_tag=2)
    raw1 = read_feature_cache(_require(workdir, "features_pc1.dcft", "features"))
    raw2 = read_feature_cache(_require(workdir, "features_pc2.dcft", "features"))
    mean, std = read_scaler(_require(workdir, "feature_scaler.json", "features"))
    fs = FeatureSet(raw1, raw2, mean, std)
    return trainer.ChangeDataset(pc1, pc2, fs)


def _train_config(args, cfg: PipelineConfig) -> trainer.TrainConfig:
    loss_mode = "pseudo_nll"
    if args.mode == "supervised":
        loss_mode = "supervised_nll"
    elif args.loss == "contrastive":
        loss_mode = "pseudo_nll_plus_contrastive"
    bb_opts = dict(cfg.backbone)
    bb_opts.setdefault("variant", args.variant)
    bb_opts.setdefault("dl0", cfg.dl0)
    bb_opts.setdefault("use_handcrafted", not args.no_input_features)
    n_out = len(cfg.classes) if loss_mode == "supervised_nll" else cfg.k
    bb_opts.setdefault("n_prototypes", n_out)
    tr_opts = dict(cfg.train)
    if args.epochs is not None:
        tr_opts["epochs"] = args.epochs
    tr_opts.setdefault("epochs", 30)
    tr_opts.setdefault("pairs_per_epoch", 300)
    tr_opts.setdefault("batch_size", 10)
    return trainer.TrainConfig(
        radius=cfg.radius, dl0=cfg.dl0, k=cfg.k, loss_mode=loss_mode,
        rng_seed=args.seed or 0, n_classes=len(cfg.classes),
        supervised_cylinders=args.cylinders or 0,
        backbone=BackboneConfig(**bb_opts), **tr_opts)


def _build_ysim(args, cfg, ds: trainer.ChangeDataset, workdir: Path):
    if args.ysim == "gt":
        if ds.gt_labels is None:
            raise DependencyError("--ysim gt requires labels in work_pc2.xyz")
        sim = similarity.estimate_ysim("ground_truth", gt_labels=ds.gt_labels)
    elif args.ysim == "c2c":
        dist = similarity.c2c_distance(ds.pc2, ds.pc1, ds.index1)
        sim = similarity.estimate_ysim("c2c_threshold", c2c=dist,
                                       c2c_threshold=2.0 * cfg.dl0)
    elif args.ysim == "m3c2":
        dist, sig, _ = similarity.m3c2_lite(ds.pc2, ds.pc1,
                                            normal_scale=2.5 * cfg.dl0,
                                            cyl_radius=1.5 * cfg.dl0,
                                            cyl_halfdepth=12.0 * cfg.dl0)
        sim = similarity.estimate_ysim("m3c2", m3c2_significant=sig)
    else:
        raise DependencyError(f"unknown y_sim source {args.ysim!r}")
    similarity.save_similarity(workdir / "ysim.txt", sim)
    return sim.y_sim


def cmd_train(args, cfg: PipelineConfig) -> int:
    workdir = Path(args.workdir)
    ds = load_dataset(workdir, cfg)
    tc = _train_config(args, cfg)
    if tc.loss_mode == "pseudo_nll_plus_contrastive":
        ds.y_sim = _build_ysim(args, cfg, ds, workdir)
    (workdir / "train_config.json").write_text(json.dumps({
        "schema": 1, "loss_mode": tc.loss_mode, "epochs": tc.epochs,
        "pairs_per_epoch": tc.pairs_per_epoch, "batch_size": tc.batch_size,
        "radius": tc.radius, "k": tc.k, "seed": tc.rng_seed,
        "backbone": tc.backbone.to_dict()}, indent=2))
    with open(workdir / "train_log.jsonl", "w") as log:
        result = trainer.train(ds, tc, workdir=workdir, log=log)
    save_checkpoint(workdir / "model.dcnp", result.params, tc.backbone)
    if result.cluster_model is not None:
        cl.save_cluster_model(workdir / "kmeans.dckm", result.cluster_model)
    final = result.diagnostics[-1]
    print(f"trained {tc.epochs} epochs; final loss {final.loss:.4f}"
          + (f", NMI vs gt {final.nmi_gt:.3f}" if final.nmi_gt is not None else ""))
    return 0


def cmd_infer(args, cfg: PipelineConfig) -> int:
    workdir = Path(args.workdir)
    ds = load_dataset(workdir, cfg)
    params, bb = load_checkpoint(_require(workdir, "model.dcnp", "train"))
    tc = trainer.TrainConfig(radius=cfg.radius, dl0=cfg.dl0, k=bb.n_prototypes,
                             n_classes=len(cfg.classes), rng_seed=args.seed or 0,
                             backbone=bb)
    pseudo = trainer.infer(params, ds, tc)
    np.savetxt(workdir / "pred_pseudo.txt", pseudo, fmt="%d")
    print(f"inferred pseudo-labels for {len(pseudo)} points "
          f"({len(np.unique(pseudo))} clusters in use)")
    return 0


def _load_pseudo(workdir: Path) -> np.ndarray:
    return np.loadtxt(_require(workdir, "pred_pseudo.txt", "infer"),
                      dtype=np.int64).ravel()


def cmd_map(args, cfg: PipelineConfig) -> int:
    workdir = Path(args.workdir)
    pseudo = _load_pseudo(workdir)
    _, bb = load_checkpoint(_require(workdir, "model.dcnp", "train"))
    if args.auto_majority:
        pc2 = load_xyz(_require(workdir, "work_pc2.xyz", "features"))
        if pc2.labels is None:
            raise DependencyError("--auto-majority requires labels in work_pc2.xyz")
        mapping = evalmap.majority_map(pseudo, pc2.labels, bb.n_prototypes,
                                       len(cfg.classes))
    else:
        if not args.mapping:
            print("error: map needs --auto-majority or --mapping FILE", file=sys.stderr)
            return 2
        mapping = evalmap.ClassMapping.from_json(Path(args.mapping).read_text())
        observed = np.unique(pseudo)
        missing = [int(c) for c in observed if int(c) not in mapping.entries]
        if missing:
            print(f"error: mapping file leaves clusters unmapped: {missing}",
                  file=sys.stderr)
            return 2
    (workdir / "mapping.json").write_text(mapping.to_json())
    print(f"mapping written ({len(mapping.entries)} entries)")
    return 0


def cmd_eval(args, cfg: PipelineConfig) -> int:
    workdir = Path(args.workdir)
    pseudo = _load_pseudo(workdir)
    mapping = evalmap.ClassMapping.from_json(
        _require(workdir, "mapping.json", "map").read_text())
    pc2 = load_xyz(_require(workdir, "work_pc2.xyz", "features"))
    if pc2.labels is None:
        raise DependencyError("eval requires labels in work_pc2.xyz")
    pred = evalmap.apply_mapping(pseudo, mapping)
    report = evalmap.metrics(pred, pc2.labels, len(cfg.classes),
                             change_class_ids=range(1, len(cfg.classes)))
    binary = evalmap.binary_collapse(pred, pc2.labels)
    (workdir / "metrics.json").write_text(json.dumps({
        "schema": 1,
        "multiclass": json.loads(report.to_json()),
        "binary": json.loads(binary.to_json()),
    }, indent=2))
    table = evalmap.format_table(report, cfg.classes)
    (workdir / "metrics.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_serve(args, cfg: PipelineConfig) -> int:
    from .server import LabelingServer

    workdir = Path(args.workdir)
    _require(workdir, "pred_pseudo.txt", "infer")
    server = LabelingServer(workdir, classes=cfg.classes, ui_dir=args.ui_dir)
    print(f"serving labeling UI on http://127.0.0.1:{args.port} (workdir {workdir})")
    server.serve_forever(args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deepchange",
        description="Unsupervised multiclass change segmentation for point cloud pairs")
    parser.add_argument("--config", help="pipeline config JSON")
    parser.add_argument("--seed", type=int, default=None, help="global RNG seed")
    parser.add_argument("--workdir", default="work", help="working directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled scene pair")
    p.add_argument("--spec", help="scene spec JSON (default: built-in demo scene)")
    p.add_argument("--extent", type=float, default=100.0)
    p.add_argument("--density", type=float, default=5.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="subsample and compute handcrafted features")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="run the alternating clustering/training loop")
    p.add_argument("--mode", choices=("unsupervised", "supervised"),
                   default="unsupervised")
    p.add_argument("--loss", choices=("nll", "contrastive"), default="nll")
    p.add_argument("--ysim", choices=("gt", "c2c", "m3c2"), default="gt",
                   help="similarity source for the contrastive loss")
    p.add_argument("--variant", choices=("siamese", "encoder_fusion"),
                   default="encoder_fusion")
    p.add_argument("--no-input-features", action="store_true",
                   help="feed only the constant channel (no handcrafted inputs)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--cylinders", type=int, default=None,
                   help="supervised mode: number of fixed class-centered cylinders")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="pseudo-label every point of the second epoch")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("map", help="map pseudo-clusters to real classes")
    p.add_argument("--auto-majority", action="store_true")
    p.add_argument("--mapping", help="ClassMapping JSON file")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("eval", help="score mapped predictions against labels")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="HTTP API + static assets for the labeling UI")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--ui-dir", default=None, help="static assets directory")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    try:
        return args.func(args, cfg)
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
