"""Staged multi-task training, teacher-student distillation and steering cross-validation."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import lossbank as lb
from .evalmetrics import depth_metrics
from .geomcore import CameraIntrinsics, DegenerateInputError, compose_flows, fit_ground_plane, rigid_flow, unproject, warp_synthesize
from .netzoo import (TASKS, DepthDecoder, Encoder, FlowDecoder, MaskDecoder, NetConfig, PairEncoderPose,
                     SegmentationHead, UniPerceptionNet, make_steering_head, load_checkpoint, save_checkpoint,
                     state_checksum)
from .synthdata import STUFF_CLASSES, SceneConfig, generate_scene, load_scene_arrays

COMPONENTS = UniPerceptionNet.COMPONENTS
DEFAULT_STAGES = (
    (("encoder", "depth", "pose", "seg"), 60_000),
    (("flow",), 40_000),
    (("pose", "flow", "mask"), 40_000),
    (COMPONENTS, 250_000),
)


class TrainingDiverged(RuntimeError):
    pass


# -- schedule -------------------------------------------------------------------

@dataclass
class StageSchedule:
    stages: list = field(default_factory=lambda: [(list(c), n) for c, n in DEFAULT_STAGES])
    scale: float = 0.01

    def __post_init__(self):
        self.stages = [(list(c), int(n)) for c, n in self.stages]
        if not self.stages:
            raise ValueError("a schedule needs at least one stage")
        for comps, n in self.stages:
            if n <= 0:
                raise ValueError(f"stage step counts must be positive, got {n}")
            unknown = set(comps) - set(COMPONENTS)
            if unknown:
                raise ValueError(f"unknown components {sorted(unknown)}; known: {COMPONENTS}")
        if self.scale <= 0:
            raise ValueError("scale factor must be positive")

    def steps(self, stage: int) -> int:
        """Scaled step count of 1-based ``stage``."""
        return max(1, int(round(self.stages[stage - 1][1] * self.scale)))

    def trainable(self, stage: int) -> tuple:
        return tuple(self.stages[stage - 1][0])

    def __len__(self):
        return len(self.stages)

    def to_dict(self) -> dict:
        return {"stages": [[list(c), n] for c, n in self.stages], "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "StageSchedule":
        return cls([(c, n) for c, n in d["stages"]], d["scale"])


@dataclass
class TrainConfig:
    """Everything a training run depends on; serialises to ``config.json``."""
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)
    weights: lb.LossWeights = field(default_factory=lb.LossWeights)
    schedule: StageSchedule = field(default_factory=StageSchedule)
    stages: list = field(default_factory=lambda: [1, 2, 3, 4])
    batch_k: int = 3
    lr: float = 1e-4
    clip_norm: float = 10.0
    distill: bool = True
    ssup_scales: int = 4
    log_every: int = 1

    def __post_init__(self):
        if isinstance(self.net, dict):
            self.net = NetConfig.from_dict(self.net)
        if isinstance(self.weights, dict):
            self.weights = lb.LossWeights.from_dict(self.weights)
        if isinstance(self.schedule, dict):
            self.schedule = StageSchedule.from_dict(self.schedule)
        self.stages = sorted(int(s) for s in self.stages)
        if not self.stages or any(s < 1 or s > len(self.schedule) for s in self.stages):
            raise ValueError(f"stages must be a subset of 1..{len(self.schedule)}, got {self.stages}")
        if self.batch_k < 1:
            raise ValueError("batch_k must be at least 1")
        if not 1 <= self.ssup_scales <= 4:
            raise ValueError("ssup_scales must lie in 1..4")

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("net", "weights", "schedule")}
        d.update(net=self.net.to_dict(), weights=self.weights.to_dict(), schedule=self.schedule.to_dict())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def desk_config(**overrides) -> TrainConfig:
    """Defaults tuned for minutes-long CPU runs: a 3x learning rate and 10x disparity smoothness."""
    weights = {**lb.LossWeights().to_dict(), "smooth_disp": 1e-2, **overrides.pop("weights", {})}
    return TrainConfig(**{"lr": 3e-4, "weights": weights, **overrides})


# -- data ---------------------------------------------------------------------------

@dataclass
class SceneDataset:
    """Three-frame clips with labels on the middle frame.

    ``images`` is ``(N, 3, 3, H, W)``; frames 0 and 2 are the sources of the
    triple centred on frame 1, which also carries the segmentation labels.
    """
    images: np.ndarray
    depth: np.ndarray       # (N, H, W) of the middle frame
    semantic: np.ndarray
    instance: np.ndarray
    motion: np.ndarray
    intrinsics: CameraIntrinsics

    def __len__(self):
        return len(self.images)

    @classmethod
    def from_scenes(cls, scenes) -> "SceneDataset":
        scenes = list(scenes)
        if not scenes:
            raise ValueError("empty dataset")
        if any(s.images.shape[0] < 3 for s in scenes):
            raise ValueError("every scene needs at least 3 frames")
        return cls(np.stack([s.images[:3] for s in scenes]).astype(np.float32),
                   np.stack([s.depths[1] for s in scenes]), np.stack([s.semantic[1] for s in scenes]),
                   np.stack([s.instance[1] for s in scenes]), np.stack([s.motion[1] for s in scenes]),
                   scenes[0].intrinsics)

    @classmethod
    def synthetic(cls, seed: int, n: int, config: SceneConfig | None = None) -> "SceneDataset":
        seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, n)
        return cls.from_scenes(generate_scene(int(s), config) for s in seeds)

    @classmethod
    def from_dir(cls, root: str, split: str = "train") -> "SceneDataset":
        with open(os.path.join(root, "manifest.json")) as f:
            manifest = json.load(f)
        ids = manifest["splits"].get(split)
        if not ids:
            raise ValueError(f"split {split!r} is empty or missing in {root}")
        arrs = [load_scene_arrays(os.path.join(root, "scenes", i)) for i in ids]
        return cls(np.stack([a["images"][:3] for a in arrs]).astype(np.float32),
                   np.stack([a["depth"][1] for a in arrs]), np.stack([a["semantic"][1] for a in arrs]),
                   np.stack([a["instance"][1] for a in arrs]), np.stack([a["motion"][1] for a in arrs]),
                   arrs[0]["intrinsics"])


def batch_composer(n_sup: int, n_triples: int, k: int = 3, seed: int = 0):
    """Yield ``(sup_indices, triple_indices)`` with ``k`` of each per step.

    Each index stream walks a seeded permutation and reshuffles when exhausted,
    so every sample appears once per epoch of its stream.
    """
    if n_sup <= 0 or n_triples <= 0:
        raise ValueError("both supervised frames and triples are required")
    if k < 1:
        raise ValueError("k must be at least 1")
    rng = np.random.default_rng(seed)

    def stream(n):
        while True:
            yield from rng.permutation(n).tolist()

    sup, tri = stream(n_sup), stream(n_triples)
    while True:
        yield np.array([next(sup) for _ in range(k)]), np.array([next(tri) for _ in range(k)])


# -- segmentation targets ----------------------------------------------------------------

def seg_targets(semantic: np.ndarray, instance: np.ndarray, task: str, max_segments: int = 8):
    """``(classes (T,), masks (T, h, w))`` for one label map under a task.

    Semantic: one segment per class. Instance: one per thing instance.
    Panoptic: stuff classes plus thing instances. Segments beyond
    ``max_segments`` are dropped smallest-first.
    """
    if task not in TASKS:
        raise ValueError(f"unknown segmentation task {task!r}")
    segs = []
    for c in np.unique(semantic):
        sel = semantic == c
        if task == "semantic" or (task == "panoptic" and c in STUFF_CLASSES):
            segs.append((int(c), sel))
        elif c not in STUFF_CLASSES:
            for i in np.unique(instance[sel]):
                segs.append((int(c), sel & (instance == i)))
    segs.sort(key=lambda s: -s[1].sum())
    segs = segs[:max_segments]
    h, w = semantic.shape
    if not segs:
        return torch.zeros(0, dtype=torch.long), torch.zeros(0, h, w)
    return (torch.tensor([c for c, _ in segs], dtype=torch.long),
            torch.from_numpy(np.stack([m for _, m in segs]).astype(np.float32)))


def _quarter(labels: np.ndarray) -> np.ndarray:
    """Nearest-neighbour downsampling by 4 (centre sample of each 4x4 cell)."""
    return labels[..., 2::4, 2::4]


def supervised_loss(seg, feats, semantic, instance, task: str, weights: lb.LossWeights) -> lb.LossReport:
    out = seg(feats, task)
    parts = {k: [] for k in lb.SUP_KEYS}
    for b in range(out.class_logits.shape[0]):
        classes, masks = seg_targets(_quarter(semantic[b]), _quarter(instance[b]), task, seg.num_queries)
        qi, ti = lb.hungarian_match(out.class_logits[b], out.mask_logits[b], classes, masks, weights)
        parts["cls"].append(lb.seg_classification_loss(out.class_logits[b], classes, qi, ti, weights.no_object))
        bce, dice = lb.seg_mask_losses(out.mask_logits[b][qi], masks[ti])
        parts["bce"].append(bce)
        parts["dice"].append(dice)
        matched = classes[ti]
        uniq = torch.unique(matched)
        if len(uniq):
            emb = torch.stack([out.query_embeddings[b][qi][matched == c].mean(0) for c in uniq])
            parts["contrast"].append(lb.seg_contrastive_loss(emb, out.text_embeddings[uniq], weights.temperature))
        else:
            parts["contrast"].append(out.query_embeddings.sum() * 0)
    return lb.sup_total({k: torch.stack(v).mean() for k, v in parts.items()}, weights)


# -- self-supervised objective -------------------------------------------------------------

@dataclass
class MotionOutputs:
    disparities: list            # per scale, (B, 1, H, W) sigmoid disparity at full resolution
    depths: list
    poses: list                  # per source
    flows: list | None = None    # per source, per scale complete flow
    masks: list | None = None    # per source, per scale motion mask


def _ground_loss(points: torch.Tensor, seed: int) -> torch.Tensor:
    """Above-ground penalty against a RANSAC plane fitted to the lower half of each predicted cloud."""
    losses = []
    h = points.shape[-2]
    for b in range(points.shape[0]):
        lower = points[b, :, h // 2:].detach().reshape(3, -1).T.double().numpy()
        sample = lower[np.random.default_rng(seed + b).choice(len(lower), min(512, len(lower)), replace=False)]
        try:
            plane = fit_ground_plane(sample, rng=seed + b)
        except DegenerateInputError:
            continue
        losses.append(lb.above_ground_loss(points[b:b + 1], plane))
    return torch.stack(losses).mean() if losses else points.sum() * 0


def self_supervised_loss(out: MotionOutputs, target, sources, K: CameraIntrinsics, stage_kind: str,
                         weights: lb.LossWeights, seed: int = 0) -> lb.LossReport:
    """Minimum reprojection over sources, averaged over scales.

    ``stage_kind`` picks the warping flow: ``rigid`` (depth and pose only),
    ``complete`` (the flow decoder alone) or ``final`` (mask-gated composition).
    """
    recon, smooth, consist, sparse = [], [], [], []
    n_scales = len(out.depths)
    for s in range(n_scales):
        depth = out.depths[s]
        errs, valids = [], []
        mask_s = None
        for j, src in enumerate(sources):
            fr = rigid_flow(depth, out.poses[j], K)
            if stage_kind == "rigid":
                flow = fr
            else:
                fc, m = out.flows[j][s], out.masks[j][s]
                flow = fc if stage_kind == "complete" else compose_flows(fr, fc, m)[1]
                consist.append(lb.motion_consistency_loss(fc, fr, m))
                sparse.append(lb.motion_sparsity_loss(m, lb.flow_discrepancy(fc, fr)))
                if j == 0:
                    mask_s = m
            warped, valid = warp_synthesize(src, depth, flow, K)
            errs.append(lb.photometric_map(warped, target, weights.alpha))
            valids.append(valid)
        err = torch.cat(errs, 1)
        valid = torch.cat(valids, 1)
        err = torch.where(valid, err, torch.full_like(err, 1e3)).min(1, keepdim=True).values
        any_valid = valid.any(1, keepdim=True).to(err.dtype)
        recon.append((err * any_valid).sum() / any_valid.sum().clamp(min=1))
        flow0 = out.flows[0][s] if out.flows is not None else None
        smooth.append(lb.smoothness_loss(target, out.disparities[s], flow0, mask_s, weights))
    zero = target.new_zeros(())
    points = unproject(out.depths[0], K)
    parts = {
        "recon": torch.stack(recon).mean(),
        "smooth": torch.stack(smooth).mean(),
        "consistency": torch.stack(consist).mean() if consist else zero,
        "sparsity": torch.stack(sparse).mean() if sparse else zero,
        "ground": _ground_loss(points, seed),
    }
    return lb.ssup_total(parts, weights)


def student_motion(net: UniPerceptionNet, feats_t, feats_src: list, size, motion: bool, n_scales: int) -> MotionOutputs:
    disps = [F.interpolate(d, size=tuple(size), mode="bilinear", align_corners=False) if d.shape[-2:] != tuple(size) else d
             for d in net.depth(feats_t)[:n_scales]]
    depths = [net.depth.disparity_to_depth(d) for d in disps]
    poses = [net.pose(fs, feats_t) for fs in feats_src]
    out = MotionOutputs(disps, depths, poses)
    if motion:
        out.flows = [net.flow(fs, feats_t, p.detach(), size)[:n_scales] for fs, p in zip(feats_src, poses)]
        out.masks = [net.mask(fs, feats_t, p.detach(), size)[:n_scales] for fs, p in zip(feats_src, poses)]
    return out


# -- teacher ---------------------------------------------------------------------------------

TEACHER_COMPONENTS = ("encoder_ds", "depth", "seg", "pose", "encoder_fm", "flow", "mask")
TEACHER_STAGES = (
    ("encoder_ds", "depth", "seg", "pose"),
    ("encoder_fm", "flow"),
    ("pose", "encoder_fm", "flow", "mask"),
)


class TeacherBundle(nn.Module):
    """Three encoders (depth+segmentation, pose, flow+mask) and five decoders."""

    COMPONENTS = TEACHER_COMPONENTS

    def __init__(self, config: NetConfig | None = None):
        super().__init__()
        self.config = cfg = config or NetConfig()
        torch.manual_seed(cfg.seed + 1000)
        self.encoder_ds = Encoder(cfg.widths)
        self.depth = DepthDecoder(cfg.widths, cfg.depth_min, cfg.depth_max, disparity_bias=cfg.disparity_bias)
        self.seg = SegmentationHead(cfg.widths, cfg.num_queries, cfg.num_classes, cfg.seg_dim, cfg.seg_layers)
        self.pose = PairEncoderPose(cfg.widths, cfg.pose_width)
        self.encoder_fm = Encoder(cfg.widths)
        self.flow = FlowDecoder(cfg.widths, cfg.flow_width)
        self.mask = MaskDecoder(cfg.widths, cfg.flow_width)

    def motion(self, target, sources, motion: bool, n_scales: int) -> MotionOutputs:
        size = target.shape[-2:]
        disps = [F.interpolate(d, size=tuple(size), mode="bilinear", align_corners=False) if d.shape[-2:] != size else d
                 for d in self.depth(self.encoder_ds(target))[:n_scales]]
        out = MotionOutputs(disps, [self.depth.disparity_to_depth(d) for d in disps],
                            [self.pose(src, target) for src in sources])
        if motion:
            n = len(sources)
            feats = self.encoder_fm(torch.cat([target, *sources]))
            f_t = feats.select(slice(0, target.shape[0]))
            b = target.shape[0]
            f_src = [feats.select(slice(b * (j + 1), b * (j + 2))) for j in range(n)]
            out.flows = [self.flow(fs, f_t, p.detach(), size)[:n_scales] for fs, p in zip(f_src, out.poses)]
            out.masks = [self.mask(fs, f_t, p.detach(), size)[:n_scales] for fs, p in zip(f_src, out.poses)]
        return out

    @torch.no_grad()
    def flow_and_mask(self, target, source):
        """Finest complete flow and motion mask for ``target`` against one source."""
        out = self.motion(target, [source], True, 1)
        return out.flows[0][0], out.masks[0][0]


# -- freezing ----------------------------------------------------------------------------------

def set_trainable(model: nn.Module, components, trainable) -> list:
    """Enable gradients and train mode for ``trainable``; freeze weights and BN statistics elsewhere."""
    params = []
    for name in components:
        module = getattr(model, name)
        on = name in trainable
        module.train(on)
        for p in module.parameters():
            p.requires_grad_(on)
        if on:
            params.extend(module.parameters())
    return params


def component_checksums(model: nn.Module, components) -> dict:
    return {name: state_checksum(getattr(model, name)) for name in components}


# -- training loops -----------------------------------------------------------------------------

class RunLogger:
    def __init__(self, run_dir: str | None):
        self.path = None
        if run_dir is not None:
            os.makedirs(os.path.join(run_dir, "logs"), exist_ok=True)
            self.path = os.path.join(run_dir, "logs", "steps.jsonl")
            open(self.path, "w").close()

    def log(self, record: dict):
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


def _to_tensor(x):
    return torch.from_numpy(np.ascontiguousarray(x))


def _diverged(run_dir, record):
    if run_dir is not None:
        os.makedirs(os.path.join(run_dir, "logs"), exist_ok=True)
        with open(os.path.join(run_dir, "logs", "divergence.json"), "w") as f:
            json.dump(record, f, indent=2, sort_keys=True)
    raise TrainingDiverged(f"non-finite loss at stage {record['stage']} step {record['step']}: {record['error']}")


def _stage_kind(stage_components, has_motion_heads: bool) -> tuple:
    """(warp flow kind, whether the flow/mask heads run) for a stage's trainable set."""
    comps = set(stage_components)
    if not has_motion_heads or not comps & {"flow", "mask"}:
        return "rigid", False
    if "mask" not in comps and comps <= {"flow", "encoder_fm"}:
        return "complete", True
    return "final", True


def _optimizer(params, lr):
    return torch.optim.Adam(params, lr=lr)


def _lr_at(cfg: TrainConfig, stage: int, step: int, n_steps: int) -> float:
    if stage == 4 and step >= int(0.75 * n_steps):
        return cfg.lr / 2
    return cfg.lr


def train_teacher(data: SceneDataset, cfg: TrainConfig, run_dir: str | None = None,
                  stage_steps: list | None = None) -> TeacherBundle:
    """Train the multi-network teacher with supervised and self-supervised losses only."""
    torch.manual_seed(cfg.seed)
    teacher = TeacherBundle(cfg.net)
    K = data.intrinsics
    logger = RunLogger(None)
    steps = stage_steps or [cfg.schedule.steps(i) for i in (1, 2, 3)]
    batches = batch_composer(len(data), len(data), cfg.batch_k, cfg.seed + 17)
    rng = np.random.default_rng(cfg.seed + 23)
    history = []
    for stage, (trainable, n_steps) in enumerate(zip(TEACHER_STAGES, steps), start=1):
        params = set_trainable(teacher, TEACHER_COMPONENTS, trainable)
        opt = _optimizer(params, cfg.lr)
        kind, motion = _stage_kind(trainable, True)
        for step in range(n_steps):
            sup_idx, tri_idx = next(batches)
            clip = _to_tensor(data.images[tri_idx])
            target, sources = clip[:, 1], [clip[:, 0], clip[:, 2]]
            out = teacher.motion(target, sources, motion, cfg.ssup_scales)
            ssup = self_supervised_loss(out, target, sources, K, kind, cfg.weights, seed=cfg.seed + step)
            sup = None
            if "seg" in trainable:
                task = TASKS[rng.integers(len(TASKS))]
                feats = teacher.encoder_ds(_to_tensor(data.images[sup_idx, 1]))
                sup = supervised_loss(teacher.seg, feats, data.semantic[sup_idx], data.instance[sup_idx], task, cfg.weights)
            try:
                report = lb.total_loss(sup, ssup, None, cfg.weights)
            except FloatingPointError as e:
                _diverged(run_dir, {"stage": stage, "step": step, "error": str(e), "model": "teacher"})
            opt.zero_grad()
            report.total.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)
            opt.step()
            history.append({"stage": stage, "step": step, **report.to_dict()})
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.history = history
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        save_checkpoint(os.path.join(run_dir, "teacher.ckpt"), teacher.state_dict(),
                        {"kind": "teacher", "net": cfg.net.to_dict()})
    return teacher


def load_teacher(path: str) -> TeacherBundle:
    state, header = load_checkpoint(path)
    teacher = TeacherBundle(NetConfig.from_dict(header["net"]))
    teacher.load_state_dict(state)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


@dataclass
class StageResult:
    stage: int
    steps: int
    trainable: tuple
    frozen_before: dict
    frozen_after: dict
    first: dict
    last: dict

    @property
    def frozen_unchanged(self) -> bool:
        return self.frozen_before == self.frozen_after


def student_step(net: UniPerceptionNet, data: SceneDataset, sup_idx, tri_idx, trainable, cfg: TrainConfig,
                 teacher: TeacherBundle | None, task: str, seed: int) -> lb.LossReport:
    K = data.intrinsics
    k = len(tri_idx)
    clip = _to_tensor(data.images[tri_idx])
    target, sources = clip[:, 1], [clip[:, 0], clip[:, 2]]
    run_sup = "seg" in trainable or "encoder" in trainable
    images = [target, *sources]
    if run_sup:
        images.append(_to_tensor(data.images[sup_idx, 1]))
    feats = net.encode(torch.cat(images))
    f_t = feats.select(slice(0, k))
    f_src = [feats.select(slice(k * (j + 1), k * (j + 2))) for j in range(2)]
    kind, motion = _stage_kind(trainable, True)
    out = student_motion(net, f_t, f_src, target.shape[-2:], motion, cfg.ssup_scales)
    ssup = self_supervised_loss(out, target, sources, K, kind, cfg.weights, seed=seed)
    sup = None
    if run_sup:
        f_sup = feats.select(slice(3 * k, None))
        sup = supervised_loss(net.seg, f_sup, data.semantic[sup_idx], data.instance[sup_idx], task, cfg.weights)
    distil = None
    if teacher is not None and motion and cfg.weights.distil != 0:
        terms = []
        for j, src in enumerate(sources):
            t_flow, t_mask = teacher.flow_and_mask(target, src)
            terms.append(lb.distill_loss(out.flows[j][0], t_flow, out.masks[j][0], t_mask,
                                         cfg.weights.beta_flow, cfg.weights.beta_mask))
        distil = torch.stack(terms).mean()
    return lb.total_loss(sup, ssup, distil, cfg.weights)


def train_student(data: SceneDataset, cfg: TrainConfig, teacher: TeacherBundle | None = None,
                  run_dir: str | None = None, net: UniPerceptionNet | None = None, callback=None):
    """Run the configured stages in order; returns ``(net, [StageResult])``.

    The distillation term needs student flow and mask outputs, so it is zero
    whenever the flow/mask heads are inactive (stage 1).
    """
    if teacher is not None:
        t_check = state_checksum(teacher)
    torch.manual_seed(cfg.seed)
    net = net or UniPerceptionNet(cfg.net)
    logger = RunLogger(run_dir)
    if run_dir is not None:
        os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
    batches = batch_composer(len(data), len(data), cfg.batch_k, cfg.seed + 17)
    rng = np.random.default_rng(cfg.seed + 29)
    results = []
    for stage in cfg.stages:
        trainable = cfg.schedule.trainable(stage)
        n_steps = cfg.schedule.steps(stage)
        params = set_trainable(net, COMPONENTS, trainable)
        frozen = [c for c in COMPONENTS if c not in trainable]
        before = component_checksums(net, frozen)
        opt = _optimizer(params, cfg.lr)
        first = last = None
        for step in range(n_steps):
            for g in opt.param_groups:
                g["lr"] = _lr_at(cfg, stage, step, n_steps)
            sup_idx, tri_idx = next(batches)
            task = TASKS[rng.integers(len(TASKS))]
            try:
                report = student_step(net, data, sup_idx, tri_idx, trainable, cfg, teacher, task, cfg.seed + step)
            except FloatingPointError as e:
                _diverged(run_dir, {"stage": stage, "step": step, "error": str(e), "model": "student"})
            opt.zero_grad()
            report.total.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)
            opt.step()
            record = {"stage": stage, "step": step, **report.to_dict()}
            if step % cfg.log_every == 0 or step == n_steps - 1:
                logger.log(record)
            if callback is not None:
                callback(record)
            first = first or record
            last = record
        after = component_checksums(net, frozen)
        results.append(StageResult(stage, n_steps, trainable, before, after, first, last))
        if run_dir is not None:
            save_checkpoint(os.path.join(run_dir, "checkpoints", f"stage{stage}.ckpt"), net.state_dict(),
                            {"kind": "student", "stage": stage, "net": cfg.net.to_dict()})
    if teacher is not None and state_checksum(teacher) != t_check:
        raise RuntimeError("teacher parameters changed during student training")
    net.eval()
    return net, results


def load_student(path: str) -> UniPerceptionNet:
    state, header = load_checkpoint(path)
    net = UniPerceptionNet(NetConfig.from_dict(header["net"]))
    net.load_state_dict(state)
    net.eval()
    return net


# -- evaluation helpers ---------------------------------------------------------------------------

@torch.no_grad()
def predict_depth(encoder, depth_decoder, images: torch.Tensor, batch: int = 16) -> np.ndarray:
    encoder.eval()
    depth_decoder.eval()
    out = []
    for i in range(0, len(images), batch):
        d = depth_decoder(encoder(images[i:i + batch]))[0]
        out.append(depth_decoder.disparity_to_depth(d)[:, 0])
    return torch.cat(out).numpy()


def evaluate_depth(model, data: SceneDataset):
    """Median-scaled depth metrics on the middle frames, pooled over all pixels."""
    if isinstance(model, TeacherBundle):
        enc = model.encoder_ds
    else:
        enc = model.encoder
    pred = predict_depth(enc, model.depth, _to_tensor(data.images[:, 1]))
    scaled = np.stack([p * np.median(g) / np.median(p) for p, g in zip(pred, data.depth)])
    return depth_metrics(scaled, data.depth, median_scale=False)


# -- steering --------------------------------------------------------------------------------------

@dataclass
class FoldPlan:
    folds: list  # (train indices, test indices)

    @classmethod
    def make(cls, n: int, n_folds: int = 10, seed: int = 0) -> "FoldPlan":
        if n < n_folds:
            raise ValueError(f"need at least {n_folds} sequences for {n_folds}-fold validation, got {n}")
        perm = np.random.default_rng(seed).permutation(n)
        chunks = np.array_split(perm, n_folds)
        return cls([(np.sort(np.concatenate([c for j, c in enumerate(chunks) if j != i])), np.sort(chunks[i]))
                    for i in range(n_folds)])

    def __len__(self):
        return len(self.folds)


@dataclass
class FoldResult:
    fold: int
    train_mse: float
    test_mse: float
    baseline_test_mse: float


def finetune_steering(encoder: Encoder, sequences, folds: FoldPlan, frozen: bool = True, steps: int = 300,
                      lr: float = 1e-3, seed: int = 0, net_config: NetConfig | None = None,
                      positional: bool = True, lam: float = 0.1, on_fold=None):
    """Train a fresh attentive-pooling head per fold; returns ``[FoldResult]``.

    With ``frozen`` the encoder runs in eval mode without gradients and its
    coarsest features are computed once for all sequences. ``on_fold`` is
    called as ``on_fold(result, encoder)`` after every fold.
    """
    from .netzoo import steering_forward
    cfg = net_config or NetConfig()
    frames = torch.from_numpy(np.stack([s.frames for s in sequences]).astype(np.float32))
    targets = torch.tensor([s.target for s in sequences], dtype=torch.float32)
    if len(sequences) < len(folds.folds) or max(int(i.max()) for _, i in folds.folds) >= len(sequences):
        raise ValueError("fold plan does not fit the sequence count")
    size = frames.shape[-2:]
    coarse = None
    if frozen:
        encoder.eval()
        with torch.no_grad():
            c = torch.cat([encoder(frames[i].contiguous())[4][None] for i in range(len(frames))])
        coarse = c
    results = []
    for f, (tr, te) in enumerate(folds.folds):
        torch.manual_seed(seed * 1000 + f)
        head = make_steering_head(cfg, tuple(size), positional)
        enc = encoder if frozen else copy.deepcopy(encoder)
        params = list(head.parameters()) + ([] if frozen else list(enc.parameters()))
        opt = torch.optim.Adam(params, lr=lr)
        tr_t, te_t = torch.as_tensor(tr), torch.as_tensor(te)
        if frozen:
            head.set_input_stats(coarse[tr_t])
        else:
            enc.eval()
            with torch.no_grad():
                head.set_input_stats(torch.stack([enc(frames[i])[4] for i in tr]))

        def predict(idx, train=False):
            if frozen:
                return head(coarse[idx])
            enc.train(train)
            return steering_forward(enc, head, frames[idx])

        for _ in range(steps):
            loss = lb.steering_loss(predict(tr_t, True), targets[tr_t], lam)
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            head.eval()
            train_mse = float(((predict(tr_t) - targets[tr_t]) ** 2).mean())
            test_mse = float(((predict(te_t) - targets[te_t]) ** 2).mean())
        baseline = float(((targets[te_t] - targets[tr_t].mean()) ** 2).mean())
        results.append(FoldResult(f, train_mse, test_mse, baseline))
        if on_fold is not None:
            on_fold(results[-1], encoder)
    return results


# -- segmentation inference ---------------------------------------------------------------------------

@torch.no_grad()
def predict_segmentation(encoder, seg, images: torch.Tensor, task: str, thing_classes=(2, 3)):
    """Per-pixel ``(semantic, instance)`` maps at image resolution.

    Every pixel takes the query maximising ``class probability x mask
    probability``; the query's best real class becomes the semantic label and
    thing-class queries yield instance ids ``query + 1``.
    """
    encoder.eval()
    seg.eval()
    out = seg(encoder(images), task)
    prob = out.class_logits.softmax(-1)[..., :-1]                  # (B, Q, C)
    score, cls = prob.max(-1)                                        # (B, Q)
    masks = F.interpolate(out.mask_logits, size=images.shape[-2:], mode="bilinear", align_corners=False).sigmoid()
    winner = (score[..., None, None] * masks).argmax(1)              # (B, H, W)
    semantic = torch.gather(cls, 1, winner.flatten(1)).reshape(winner.shape)
    things = torch.zeros_like(semantic, dtype=torch.bool)
    for c in thing_classes:
        things |= semantic == c
    instance = torch.where(things, winner + 1, torch.zeros_like(winner))
    return semantic.numpy(), instance.numpy()
