"""Training orchestration: per-epoch clustering of deep features, prototype
refresh, weighted cylinder sampling, augmentation and SGD; plus grid-tiled
inference and the supervised / contrastive modes of the same backbones."""

from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import cluster as cl
from . import net
from .core import PointCloud, SpatialIndex, grid_subsample
from .features import FeatureParams, FeatureSet, Neighborhood, compute_all
from .net import BackboneConfig, NetParams
from .net.optim import GradientNaNError

LOSS_MODES = ("pseudo_nll", "pseudo_nll_plus_contrastive", "supervised_nll")


class CoverageError(RuntimeError):
    """Cylinder sampling repeatedly drew empty pairs."""


class TrainingAbortedError(RuntimeError):
    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    epochs: int = 55
    pairs_per_epoch: int = 3000
    batch_size: int = 10
    radius: float = 50.0
    dl0: float = 1.0
    k: int = 1000
    loss_mode: str = "pseudo_nll"
    rng_seed: int = 0
    augment_rotation: bool = True
    augment_noise: bool = True
    noise_sigma: float = None  # default dl0 / 10
    lr0: float = 1e-3
    momentum: float = 0.98
    lr_decay: float = 0.95
    grad_clip: float = 5.0
    weight_clamp: float = 50.0
    use_weights: bool = True  # False: unweighted loss + count-proportional draws
    kmeans_batch: int = 1024
    kmeans_iters: int = 100
    supervised_cylinders: int = 0  # >0: fixed class-centered training cylinders
    n_classes: int = 7
    backbone: BackboneConfig = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.radius <= 0:
            raise ValueError("epochs >= 1, batch_size >= 1, radius > 0 required")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.noise_sigma is None:
            self.noise_sigma = self.dl0 / 10.0
        if self.backbone is None:
            k_out = self.n_classes if self.loss_mode == "supervised_nll" else self.k
            self.backbone = BackboneConfig(dl0=self.dl0, n_prototypes=k_out)

    @property
    def supervised(self) -> bool:
        return self.loss_mode == "supervised_nll"


@dataclass
class CylinderPair:
    """Co-located vertical-cylinder crops of both epochs."""

    center_xy: tuple
    radius: float
    ids1: np.ndarray
    ids2: np.ndarray
    pos1: np.ndarray
    pos2: np.ndarray
    raw1: np.ndarray = None  # handcrafted rows, pre-standardization
    raw2: np.ndarray = None
    pseudo_labels: np.ndarray = None
    y_sim: np.ndarray = None


class ChangeDataset:
    """Working-resolution clouds plus features and optional y_sim flags."""

    def __init__(self, pc1: PointCloud, pc2: PointCloud,
                 feature_set: FeatureSet = None, y_sim: np.ndarray = None):
        self.pc1 = pc1
        self.pc2 = pc2
        self.features = feature_set
        self.y_sim = None if y_sim is None else np.asarray(y_sim, dtype=np.uint8)
        self.index1 = SpatialIndex(pc1)
        self.index2 = SpatialIndex(pc2)

    @property
    def gt_labels(self):
        return self.pc2.labels


def prepare_dataset(pc1_raw: PointCloud, pc2_raw: PointCloud, dl0: float,
                    feature_params: FeatureParams = None,
                    with_features: bool = True) -> ChangeDataset:
    """Grid-subsample both epochs to the working resolution and attach the
    handcrafted features (majority labels survive subsampling)."""
    pc1 = grid_subsample(pc1_raw, dl0)
    pc2 = grid_subsample(pc2_raw, dl0)
    fs = None
    if with_features:
        feature_params = feature_params or FeatureParams(
            neighborhood=Neighborhood("radius", 2.5 * dl0), dtm_cell=5.0)
        fs = compute_all(pc1, pc2, feature_params)
    return ChangeDataset(pc1, pc2, fs)


def network_inputs(dataset: ChangeDataset, config: BackboneConfig,
                   raw: np.ndarray, n: int) -> np.ndarray:
    """Constant channel plus (standardized) handcrafted columns."""
    ones = np.ones((n, 1), dtype=np.float32)
    if not config.use_handcrafted:
        return ones
    if dataset.features is None:
        raise ValueError("backbone expects handcrafted features but none computed")
    return np.concatenate([ones, dataset.features.transform(raw)], axis=1)


def extract_pair(dataset: ChangeDataset, center_xy, radius: float) -> CylinderPair:
    """Crop both epochs around a center; None when either side is empty."""
    ids1 = np.asarray(dataset.index1.radius_query_2d(center_xy, radius), dtype=np.int64)
    ids2 = np.asarray(dataset.index2.radius_query_2d(center_xy, radius), dtype=np.int64)
    if len(ids1) == 0 or len(ids2) == 0:
        return None
    fs = dataset.features
    return CylinderPair(
        center_xy=tuple(center_xy), radius=radius, ids1=ids1, ids2=ids2,
        pos1=dataset.pc1.xyz[ids1].copy(), pos2=dataset.pc2.xyz[ids2].copy(),
        raw1=None if fs is None else fs.raw1[ids1].copy(),
        raw2=None if fs is None else fs.raw2[ids2].copy(),
    )


def augment(pair: CylinderPair, seed: int, rotation: bool = True,
            noise_sigma: float = 0.0) -> CylinderPair:
    """One shared rotation about the cylinder axis plus per-point jitter.

    Normal columns of the handcrafted features rotate with the points; the
    remaining columns are invariant to a vertical-axis rotation and stay put.
    """
    rng = np.random.default_rng(seed)
    out = replace(pair, pos1=pair.pos1.copy(), pos2=pair.pos2.copy(),
                  raw1=None if pair.raw1 is None else pair.raw1.copy(),
                  raw2=None if pair.raw2 is None else pair.raw2.copy())
    if rotation:
        theta = rng.uniform(0.0, 2.0 * np.pi)
        c, s = np.cos(theta), np.sin(theta)
        rot = np.array([[c, -s], [s, c]])
        cx, cy = pair.center_xy
        for pos, raw in ((out.pos1, out.raw1), (out.pos2, out.raw2)):
            xy = pos[:, :2] - (cx, cy)
            pos[:, :2] = xy @ rot.T + (cx, cy)
            if raw is not None:
                raw[:, 0:2] = raw[:, 0:2] @ rot.T.astype(raw.dtype)
    if noise_sigma > 0:
        out.pos1 += rng.normal(0.0, noise_sigma, out.pos1.shape)
        out.pos2 += rng.normal(0.0, noise_sigma, out.pos2.shape)
    return out


def tile_centers(xyz: np.ndarray, stride: float) -> np.ndarray:
    """Regular XY grid of cylinder centers covering the cloud's bounding box.

    With stride equal to the cylinder radius every point lies within the
    radius of at least one center (cell diagonal/2 = stride/sqrt(2) < radius).
    """
    x0, y0 = xyz[:, 0].min(), xyz[:, 1].min()
    x1, y1 = xyz[:, 0].max(), xyz[:, 1].max()
    nx = max(1, int(np.ceil((x1 - x0) / stride)))
    ny = max(1, int(np.ceil((y1 - y0) / stride)))
    centers = [
        (x0 + (i + 0.5) * stride, y0 + (j + 0.5) * stride)
        for i in range(nx) for j in range(ny)
    ]
    return np.array(centers)


@contextlib.contextmanager
def _inference_mode(params: NetParams):
    flags = {name: t.requires_grad for name, t in params.tensors.items()}
    for t in params.tensors.values():
        t.requires_grad = False
    try:
        yield
    finally:
        for name, t in params.tensors.items():
            t.requires_grad = flags[name]


def collect_embeddings(params: NetParams, dataset: ChangeDataset,
                       config: TrainConfig) -> np.ndarray:
    """Per-point pc2 embeddings from a full tiling pass (inference mode).

    Points covered by several tiles keep the feature of the last covering
    pass; the deterministic grid order makes the result reproducible.
    In contrastive mode clustering runs on the raw (pre-normalization)
    change features: the norm carries exactly the similarity signal the
    contrastive term shapes, which row normalization would erase.
    """
    bb = config.backbone
    raw_features = config.loss_mode == "pseudo_nll_plus_contrastive"
    feats = np.zeros((len(dataset.pc2), bb.embed_dim), dtype=np.float32)
    covered = np.zeros(len(dataset.pc2), dtype=bool)
    with _inference_mode(params):
        for cx, cy in tile_centers(dataset.pc2.xyz, config.radius):
            pair = extract_pair(dataset, (cx, cy), config.radius)
            if pair is None:
                continue
            out = _forward_pair(pair, dataset, bb, params)
            feats[pair.ids2] = (out.change_feature.data if raw_features
                                else out.embed.data)
            covered[pair.ids2] = True
    if not covered.all():
        raise CoverageError(f"{(~covered).sum()} points not covered by any cylinder")
    return feats


def _forward_pair(pair: CylinderPair, dataset: ChangeDataset,
                  bb: BackboneConfig, params: NetParams) -> net.ForwardOut:
    f1 = network_inputs(dataset, bb, pair.raw1, len(pair.pos1))
    f2 = network_inputs(dataset, bb, pair.raw2, len(pair.pos2))
    return net.forward(pair.pos1, f1, pair.pos2, f2, bb, params)


def cluster_step(params: NetParams, dataset: ChangeDataset, config: TrainConfig,
                 epoch: int) -> cl.ClusterModel:
    """Cluster current embeddings, repair empties, refresh the prototypes."""
    feats = collect_embeddings(params, dataset, config)
    seed = _stream(config.rng_seed, epoch, 1)
    model = cl.minibatch_kmeans(feats, config.k, batch_size=config.kmeans_batch,
                                n_iters=config.kmeans_iters, seed=seed)
    model = cl.split_empty(model, feats, seed=seed + 1)
    net.set_prototypes(params, model.centroids,
                       normalize=config.backbone.normalize_embed)
    return model


def sample_cylinders(dataset: ChangeDataset, weights: np.ndarray,
                     assignments: np.ndarray, counts: np.ndarray, n: int,
                     radius: float, seed: int, max_redraws: int = 20):
    """Weighted cylinder draws: cluster with probability ~ W_k * count_k
    (uniform over pseudo-labels for inverse-frequency weights), then a
    uniform member point as center."""
    rng = np.random.default_rng(seed)
    probs = weights * counts
    probs = probs / probs.sum()
    by_cluster = {c: np.flatnonzero(assignments == c) for c in range(len(counts))}
    pairs = []
    for _ in range(n):
        pair = None
        for _attempt in range(max_redraws):
            c = int(rng.choice(len(probs), p=probs))
            members = by_cluster[c]
            if len(members) == 0:
                continue
            pid = int(members[rng.integers(len(members))])
            center = dataset.pc2.xyz[pid, :2]
            pair = extract_pair(dataset, center, radius)
            if pair is not None:
                pair.pseudo_labels = assignments[pair.ids2]
                break
        if pair is None:
            raise CoverageError("could not draw a non-empty cylinder pair")
        pairs.append(pair)
    return pairs


def _supervised_cylinders(dataset: ChangeDataset, config: TrainConfig):
    """One fixed cylinder per class, centered on a random point of the class."""
    labels = dataset.gt_labels
    if labels is None:
        raise ValueError("supervised mode requires ground-truth labels")
    rng = np.random.default_rng(_stream(config.rng_seed, 0, 7))
    pairs = []
    classes = [c for c in range(config.n_classes) if (labels == c).any()]
    want = config.supervised_cylinders or len(classes)
    i = 0
    while len(pairs) < want and i < want * 25:
        cls = classes[len(pairs) % len(classes)]
        members = np.flatnonzero(labels == cls)
        pid = int(members[rng.integers(len(members))])
        pair = extract_pair(dataset, dataset.pc2.xyz[pid, :2], config.radius)
        i += 1
        if pair is None:
            continue
        pair.pseudo_labels = labels[pair.ids2]
        pairs.append(pair)
    if len(pairs) < want:
        raise CoverageError("could not place the supervised training cylinders")
    return pairs


def _stream(seed: int, epoch: int, purpose: int) -> int:
    return int(np.random.default_rng([seed & 0x7FFFFFFFFFFFFFFF, epoch, purpose])
               .integers(0, 2 ** 63 - 1))


@dataclass
class EpochDiagnostics:
    epoch: int
    loss: float
    nmi_gt: float = None
    nmi_prev: float = None
    mean_entropy: float = None

    def to_json(self) -> str:
        return json.dumps({
            "epoch": self.epoch, "loss": self.loss, "nmi_gt": self.nmi_gt,
            "nmi_prev": self.nmi_prev, "mean_entropy": self.mean_entropy,
        })


@dataclass
class TrainResult:
    params: NetParams
    config: TrainConfig
    diagnostics: list
    cluster_model: cl.ClusterModel = None
    epoch_assignments: list = field(default_factory=list)


def train(dataset: ChangeDataset, config: TrainConfig, workdir=None,
          log=None) -> TrainResult:
    """Run the full alternating loop (or the supervised baseline).

    Per epoch: cluster embeddings into pseudo-labels (skipped in supervised
    mode), compute inverse-frequency weights, draw weighted cylinders,
    then optimize the backbone on mini-batches with the configured loss.
    """
    bb = config.backbone
    if config.supervised and bb.n_prototypes != config.n_classes:
        raise ValueError("supervised mode requires n_prototypes == n_classes")
    if config.loss_mode == "pseudo_nll_plus_contrastive" and dataset.y_sim is None:
        raise ValueError("contrastive mode requires y_sim on the dataset")
    params = net.init_params(bb, seed=_stream(config.rng_seed, 0, 0))
    if config.supervised:
        params.set_frozen("proto", False)
    optimizer = net.SgdMomentum(params, lr0=config.lr0, momentum=config.momentum,
                                lr_decay=config.lr_decay,
                                grad_clip=config.grad_clip)
    ckpt_dir = None
    if workdir is not None:
        ckpt_dir = Path(workdir) / "ckpt"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    diagnostics = []
    prev_assign = None
    model = None
    fixed_pairs = None
    last_ckpt = None
    epoch_assignments = []
    for epoch in range(config.epochs):
        if config.supervised:
            labels = dataset.gt_labels
            counts = np.bincount(labels, minlength=config.n_classes)
            weights = cl.compute_weights(np.maximum(counts, 1), config.weight_clamp)
            if not config.use_weights:
                weights = np.ones_like(weights)
            if fixed_pairs is None:
                fixed_pairs = _supervised_cylinders(dataset, config)
            pairs = list(fixed_pairs)
            nmi_gt = nmi_prev = mean_entropy = None
        else:
            model = cluster_step(params, dataset, config, epoch)
            assign = model.assignments
            epoch_assignments.append(assign.copy())
            weights = cl.compute_weights(model.counts, config.weight_clamp)
            if not config.use_weights:
                weights = np.ones_like(weights)
            nmi_gt = nmi_prev = mean_entropy = None
            if dataset.gt_labels is not None:
                nmi_gt = cl.nmi(assign, dataset.gt_labels)
                _, _, _, mean_entropy = cl.cluster_entropy(assign, dataset.gt_labels)
            if prev_assign is not None:
                nmi_prev = cl.nmi(assign, prev_assign)
            prev_assign = assign
            pairs = sample_cylinders(dataset, weights, assign, model.counts,
                                     config.pairs_per_epoch, config.radius,
                                     seed=_stream(config.rng_seed, epoch, 2))
        if dataset.y_sim is not None:
            for pair in pairs:
                pair.y_sim = dataset.y_sim[pair.ids2]

        losses = []
        for start in range(0, len(pairs), config.batch_size):
            batch = pairs[start:start + config.batch_size]
            params.zero_grads()
            batch_vals = []
            for j, pair in enumerate(batch):
                aug = augment(pair, seed=_stream(config.rng_seed, epoch, 1000 + start + j),
                              rotation=config.augment_rotation,
                              noise_sigma=config.noise_sigma if config.augment_noise else 0.0)
                out = _forward_pair(aug, dataset, bb, params)
                loss = net.nll_loss(out.logits, pair.pseudo_labels, weights)
                if config.loss_mode == "pseudo_nll_plus_contrastive":
                    loss = net.combined_loss(
                        loss, net.contrastive_loss(out.change_feature, pair.y_sim))
                batch_vals.append(loss.item())
                net.autodiff.scale(loss, 1.0 / len(batch)).backward()
            mean_loss = float(np.mean(batch_vals))
            if not np.isfinite(mean_loss):
                _abort(diagnostics, workdir, last_ckpt)
            try:
                optimizer.step(epoch)
            except GradientNaNError as exc:
                _abort(diagnostics, workdir, last_ckpt, str(exc))
            losses.append(mean_loss)

        diag = EpochDiagnostics(epoch=epoch + 1, loss=float(np.mean(losses)),
                                nmi_gt=nmi_gt, nmi_prev=nmi_prev,
                                mean_entropy=mean_entropy)
        diagnostics.append(diag)
        if log is not None:
            log.write(diag.to_json() + "\n")
            log.flush()
        if ckpt_dir is not None:
            last_ckpt = ckpt_dir / f"epoch_{epoch + 1:03d}.dcnp"
            net.save_checkpoint(last_ckpt, params, bb)
    return TrainResult(params=params, config=config, diagnostics=diagnostics,
                       cluster_model=model, epoch_assignments=epoch_assignments)


def _abort(diagnostics, workdir, last_ckpt, detail="non-finite loss"):
    msg = f"training aborted: {detail}"
    if workdir is not None:
        Path(workdir, "abort.json").write_text(json.dumps({
            "reason": detail,
            "epochs_completed": len(diagnostics),
            "last_checkpoint": str(last_ckpt) if last_ckpt else None,
        }, indent=2))
    raise TrainingAbortedError(msg, last_checkpoint=last_ckpt)


def infer(params: NetParams, dataset: ChangeDataset, config: TrainConfig) -> np.ndarray:
    """Pseudo-label every pc2 point: grid tiling with stride = radius, per-point
    logits averaged over all covering cylinders, argmax at the end."""
    bb = config.backbone
    logit_sum = np.zeros((len(dataset.pc2), bb.n_prototypes), dtype=np.float64)
    cover = np.zeros(len(dataset.pc2), dtype=np.int64)
    with _inference_mode(params):
        for cx, cy in tile_centers(dataset.pc2.xyz, config.radius):
            pair = extract_pair(dataset, (cx, cy), config.radius)
            if pair is None:
                continue
            out = _forward_pair(pair, dataset, bb, params)
            logit_sum[pair.ids2] += out.logits.data
            cover[pair.ids2] += 1
    if (cover == 0).any():
        raise CoverageError(f"{(cover == 0).sum()} points not covered at inference")
    return np.argmax(logit_sum / cover[:, None], axis=1).astype(np.int32)


def baseline_kmeans(dataset: ChangeDataset, k: int, seed: int = 0,
                    batch_size: int = 1024, n_iters: int = 100) -> cl.ClusterModel:
    """k-means directly on the standardized handcrafted features of pc2."""
    if dataset.features is None:
        raise ValueError("baseline requires handcrafted features")
    feats = dataset.features.standardized(2)
    model = cl.minibatch_kmeans(feats, k, batch_size=batch_size,
                                n_iters=n_iters, seed=seed)
    return cl.split_empty(model, feats, seed=seed + 1)
