"""Toy-scale shared encoder and task heads.

Every head consumes :class:`FeaturePyramid` objects from one encoder. The
encoder is a 5-stage strided CNN standing in for a transformer backbone; any
module producing the same pyramid contract can replace it.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geomcore import RigidPose, ShapeError

TASKS = ("panoptic", "instance", "semantic")
N_FRAMES_STEERING = 16


@dataclass
class NetConfig:
    widths: tuple = (16, 24, 32, 48, 64)
    in_channels: int = 3
    depth_min: float = 0.1
    depth_max: float = 100.0
    disparity_bias: float = 0.0
    pose_decoder: str = "multiscale"
    pose_width: int = 32
    flow_width: int = 24
    num_queries: int = 8
    num_classes: int = 4
    seg_dim: int = 32
    seg_layers: int = 2
    steer_dim: int = 32
    steer_heads: int = 4
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 5:
            raise ValueError(f"encoder needs exactly 5 widths, got {self.widths}")
        if self.pose_decoder not in ("multiscale", "naive"):
            raise ValueError(f"unknown pose decoder {self.pose_decoder!r}")
        if not 0 < self.depth_min < self.depth_max:
            raise ValueError("need 0 < depth_min < depth_max")
        if self.num_classes > 8 or self.num_classes < 1:
            raise ValueError("class count must lie in 1..8")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


@dataclass
class FeaturePyramid:
    """Five feature maps, finest first; level ``i`` is at ``1 / 2**(i + 1)`` resolution."""
    levels: list

    def __post_init__(self):
        if len(self.levels) != 5:
            raise ShapeError(f"a pyramid has exactly 5 levels, got {len(self.levels)}")
        sizes = [f.shape[-2] * f.shape[-1] for f in self.levels]
        if any(a <= b for a, b in zip(sizes, sizes[1:])):
            raise ShapeError("pyramid levels must shrink strictly from finest to coarsest")

    def __getitem__(self, i):
        return self.levels[i]

    def __len__(self):
        return 5

    def select(self, index) -> "FeaturePyramid":
        return FeaturePyramid([f[index] for f in self.levels])

    def shapes(self):
        return [tuple(f.shape) for f in self.levels]


def conv_bn_relu(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class Encoder(nn.Module):
    def __init__(self, widths=(16, 24, 32, 48, 64), in_channels=3):
        super().__init__()
        self.widths = tuple(widths)
        stages, cin = [], in_channels
        for w in self.widths:
            stages.append(nn.Sequential(conv_bn_relu(cin, w, stride=2), conv_bn_relu(w, w)))
            cin = w
        self.stages = nn.ModuleList(stages)

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"image size {h}x{w} must be divisible by 32")
        x = (image - 0.45) / 0.225
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return FeaturePyramid(levels)


def upsample_to(x, ref_or_size):
    size = ref_or_size if isinstance(ref_or_size, (tuple, list, torch.Size)) else ref_or_size.shape[-2:]
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


class DepthDecoder(nn.Module):
    """U-Net style disparity decoder emitting sigmoid disparities at four scales."""

    def __init__(self, widths, depth_min=0.1, depth_max=100.0, dec_widths=(16, 16, 24, 32, 48), disparity_bias=0.0):
        super().__init__()
        self.depth_min, self.depth_max = depth_min, depth_max
        self.up, self.fuse, self.heads = nn.ModuleList(), nn.ModuleList(), nn.ModuleDict()
        cin = widths[-1]
        for i in range(4, -1, -1):
            self.up.append(nn.Sequential(nn.Conv2d(cin, dec_widths[i], 3, padding=1), nn.ELU()))
            skip = widths[i - 1] if i > 0 else 0
            self.fuse.append(nn.Sequential(nn.Conv2d(dec_widths[i] + skip, dec_widths[i], 3, padding=1), nn.ELU()))
            cin = dec_widths[i]
            if i < 4:
                self.heads[str(i)] = nn.Conv2d(dec_widths[i], 1, 3, padding=1)
                nn.init.constant_(self.heads[str(i)].bias, disparity_bias)

    def disparity_to_depth(self, sigma):
        lo, hi = 1 / self.depth_max, 1 / self.depth_min
        return 1 / (sigma * (hi - lo) + lo)

    def forward(self, feats: FeaturePyramid) -> list:
        """Sigmoid disparities, finest first: scale ``s`` is at ``1 / 2**s`` of the image."""
        x = feats[4]
        out = {}
        for step, i in enumerate(range(4, -1, -1)):
            x = self.up[step](x)
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            if i > 0:
                x = torch.cat([x, feats[i - 1]], 1)
            x = self.fuse[step](x)
            if i < 4:
                out[i] = torch.sigmoid(self.heads[str(i)](x))
        return [out[s] for s in range(4)]


class ResidualBlock(nn.Module):
    """``ReLU(ConvBNReLU(ConvBN(x)) + Shortcut(x))`` with a 1x1 shortcut when widths differ."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv_bn = nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout))
        self.conv_bn_relu = conv_bn_relu(cout, cout)
        self.shortcut = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1, bias=False)

    def forward(self, x):
        return F.relu(self.conv_bn_relu(self.conv_bn(x)) + self.shortcut(x))


class PoseHead(nn.Module):
    """1x1 convolutions plus a global average; outputs are scaled by 0.01 to start near identity."""

    def __init__(self, cin, hidden=64):
        super().__init__()
        self.net = nn.Sequential(nn.Conv2d(cin, hidden, 1), nn.ReLU(inplace=True),
                                 nn.Conv2d(hidden, hidden, 1), nn.ReLU(inplace=True), nn.Conv2d(hidden, 6, 1))

    def forward(self, x) -> RigidPose:
        return RigidPose.from_vector(0.01 * self.net(x).mean((2, 3)))


class MultiScalePoseDecoder(nn.Module):
    """Residual-block cascade over concatenated source/target features, finest to coarsest."""

    def __init__(self, widths, width=32):
        super().__init__()
        self.blocks = nn.ModuleList()
        carry = 0
        for w in widths:
            self.blocks.append(nn.Sequential(ResidualBlock(2 * w + carry, width), ResidualBlock(width, width)))
            carry = width
        self.head = PoseHead(width)

    def forward(self, f_s: FeaturePyramid, f_t: FeaturePyramid) -> RigidPose:
        if f_s.shapes() != f_t.shapes():
            raise ShapeError(f"pyramid shapes differ: {f_s.shapes()} vs {f_t.shapes()}")
        x = None
        for i, block in enumerate(self.blocks):
            inp = torch.cat([f_s[i], f_t[i]], 1)
            if x is not None:
                inp = torch.cat([inp, F.avg_pool2d(x, 2)], 1)
            x = block(inp)
        return self.head(x)


class NaivePoseDecoder(nn.Module):
    """Pose from the concatenated coarsest features only."""

    def __init__(self, widths, width=32):
        super().__init__()
        self.squeeze = nn.Sequential(nn.Conv2d(2 * widths[-1], width, 1), nn.ReLU(inplace=True))
        self.head = PoseHead(width)

    def forward(self, f_s: FeaturePyramid, f_t: FeaturePyramid) -> RigidPose:
        if f_s.shapes() != f_t.shapes():
            raise ShapeError(f"pyramid shapes differ: {f_s.shapes()} vs {f_t.shapes()}")
        return self.head(self.squeeze(torch.cat([f_s[4], f_t[4]], 1)))


class PairEncoderPose(nn.Module):
    """Separate pose network on the stacked image pair (teacher-style)."""

    def __init__(self, widths, width=32):
        super().__init__()
        self.encoder = Encoder(widths, in_channels=6)
        self.head = NaivePoseDecoder(widths, width)

    def forward(self, image_s, image_t) -> RigidPose:
        feats = self.encoder(torch.cat([image_s, image_t], 1))
        return self.head(feats, feats)


class RecurrentFieldDecoder(nn.Module):
    """Coarse-to-fine field refinement seeded by the relative pose.

    ``F_i = U(F_{i+1}) + Proj(ELU(Conv([a_i, Conv(a_i)])))`` with
    ``a_i = Conv([U(F_{i+1}), f_i])``; ``f_i`` stacks source and target features
    and the seed is a linear map of the 6-vector pose broadcast over the
    coarsest grid. Returns fields at full, 1/2, 1/4, 1/8 resolution.
    """

    def __init__(self, widths, out_channels=3, width=24, seed_bias=0.0, init_scale=1e-2):
        super().__init__()
        self.out_channels = out_channels
        self.seed = nn.Linear(6, out_channels)
        nn.init.normal_(self.seed.weight, std=init_scale)
        nn.init.constant_(self.seed.bias, seed_bias)
        self.mix, self.inner, self.elu_conv, self.proj = (nn.ModuleList() for _ in range(4))
        for w in widths:
            self.mix.append(nn.Conv2d(out_channels + 2 * w, width, 3, padding=1))
            self.inner.append(nn.Conv2d(width, width, 3, padding=1))
            self.elu_conv.append(nn.Conv2d(2 * width, width, 3, padding=1))
            proj = nn.Conv2d(width, out_channels, 3, padding=1)
            nn.init.normal_(proj.weight, std=init_scale)
            nn.init.zeros_(proj.bias)
            self.proj.append(proj)

    def forward(self, f_s: FeaturePyramid, f_t: FeaturePyramid, pose: RigidPose, image_size) -> list:
        if f_s.shapes() != f_t.shapes():
            raise ShapeError(f"pyramid shapes differ: {f_s.shapes()} vs {f_t.shapes()}")
        vec = pose.as_vector().to(f_t[4].dtype)
        b = f_t[4].shape[0]
        if vec.shape[0] != b:
            raise ShapeError(f"pose batch {vec.shape[0]} differs from feature batch {b}")
        field = self.seed(vec)[:, :, None, None].expand(-1, -1, *f_t[4].shape[-2:])
        fields = {}
        for i in range(4, -1, -1):
            up = upsample_to(field, f_t[i])
            a = self.mix[i](torch.cat([up, f_s[i], f_t[i]], 1))
            res = F.elu(self.elu_conv[i](torch.cat([a, self.inner[i](a)], 1)))
            field = up + self.proj[i](res)
            fields[i] = field
        # level 0 sits at half resolution; outputs are upsampled to image size per scale
        return [upsample_to(fields[s], tuple(image_size)) for s in range(4)]


class FlowDecoder(RecurrentFieldDecoder):
    def __init__(self, widths, width=24):
        super().__init__(widths, out_channels=3, width=width)


class MaskDecoder(RecurrentFieldDecoder):
    """Same recurrence on mask logits; a final sigmoid gives the motion probability."""

    def __init__(self, widths, width=24):
        super().__init__(widths, out_channels=1, width=width, seed_bias=-2.0)

    def forward(self, f_s, f_t, pose, image_size) -> list:
        return [torch.sigmoid(x) for x in super().forward(f_s, f_t, pose, image_size)]


@dataclass
class SegOutput:
    class_logits: torch.Tensor    # (B, Q, C + 1), last class is "no object"
    mask_logits: torch.Tensor     # (B, Q, H/4, W/4)
    query_embeddings: torch.Tensor  # (B, Q, D)
    text_embeddings: torch.Tensor   # (C, D) class prompts for the task
    task: str


class SegmentationHead(nn.Module):
    """Query decoder conditioned on a learned per-task embedding."""

    def __init__(self, widths, num_queries=8, num_classes=4, dim=32, layers=2, heads=4):
        super().__init__()
        self.num_queries, self.num_classes = num_queries, num_classes
        self.pixel_proj = nn.ModuleList([nn.Conv2d(w, dim, 1) for w in widths])
        self.queries = nn.Parameter(torch.randn(num_queries, dim) * 0.5)
        self.task_embed = nn.Parameter(torch.randn(len(TASKS), dim) * 0.5)
        self.text_embed = nn.Parameter(torch.randn(len(TASKS), num_classes, dim) * 0.5)
        self.level_embed = nn.Parameter(torch.zeros(3, dim))
        layer = nn.TransformerDecoderLayer(dim, heads, dim_feedforward=2 * dim, dropout=0.0, batch_first=True)
        self.decoder = nn.TransformerDecoder(layer, layers)
        self.class_head = nn.Linear(dim, num_classes + 1)
        self.mask_embed = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(inplace=True), nn.Linear(dim, dim))
        self.contrast_proj = nn.Linear(dim, dim)

    def forward(self, feats: FeaturePyramid, task) -> SegOutput:
        if task not in TASKS:
            raise ValueError(f"unknown segmentation task {task!r}; expected one of {TASKS}")
        t = TASKS.index(task)
        quarter = feats[1].shape[-2:]
        mask_feats = sum(upsample_to(self.pixel_proj[i](feats[i]), quarter) for i in range(5))
        memory = torch.cat([(self.pixel_proj[i](feats[i]).flatten(2).transpose(1, 2) + self.level_embed[i - 2])
                            for i in (2, 3, 4)], 1)
        b = feats[0].shape[0]
        q = (self.queries + self.task_embed[t]).expand(b, -1, -1)
        q = self.decoder(q, memory)
        masks = torch.einsum("bqd,bdhw->bqhw", self.mask_embed(q), mask_feats)
        return SegOutput(self.class_head(q), masks, self.contrast_proj(q), self.text_embed[t], task)


class SteeringHead(nn.Module):
    """Attentive pooling of coarsest per-frame features over a 16-frame window."""

    def __init__(self, channels, spatial_tokens, dim=32, heads=4, frames=N_FRAMES_STEERING, positional=True):
        super().__init__()
        self.frames, self.positional = frames, positional
        self.proj = nn.Linear(channels, dim)
        self.token_norm = nn.LayerNorm(dim)
        self.frame_pos = nn.Parameter(torch.randn(frames, 1, dim) * 0.1)
        self.space_pos = nn.Parameter(torch.randn(1, spatial_tokens, dim) * 0.1)
        self.query = nn.Parameter(torch.randn(1, 1, dim) * 0.5)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm = nn.LayerNorm(dim)
        self.out = nn.Linear(dim, 1)
        self.register_buffer("in_mean", torch.zeros(channels))
        self.register_buffer("in_std", torch.ones(channels))

    @torch.no_grad()
    def set_input_stats(self, coarse: torch.Tensor):
        """Fix per-channel standardisation from ``(B, 16, C, h, w)`` training features."""
        flat = coarse.transpose(0, 2).reshape(coarse.shape[2], -1)
        self.in_mean.copy_(flat.mean(1))
        self.in_std.copy_(flat.std(1).clamp(min=1e-12))

    def forward(self, coarse: torch.Tensor) -> torch.Tensor:
        """``coarse``: ``(B, 16, C, h, w)`` coarsest features; returns ``(B,)`` angles."""
        if coarse.dim() != 5 or coarse.shape[1] != self.frames:
            raise ShapeError(f"steering head expects (B, {self.frames}, C, h, w), got {tuple(coarse.shape)}")
        b, n, c, h, w = coarse.shape
        x = (coarse - self.in_mean[:, None, None]) / self.in_std[:, None, None]
        tokens = self.token_norm(self.proj(x.flatten(3).transpose(2, 3)))  # (B, 16, hw, D)
        if self.positional:
            tokens = tokens + self.frame_pos + self.space_pos
        tokens = tokens.reshape(b, n * h * w, -1)
        pooled, _ = self.attn(self.query.expand(b, -1, -1), tokens, tokens, need_weights=False)
        return self.out(self.norm(pooled[:, 0]))[:, 0]


class UniPerceptionNet(nn.Module):
    """Shared encoder plus depth, pose, flow, mask and segmentation heads."""

    COMPONENTS = ("encoder", "depth", "pose", "flow", "mask", "seg")

    def __init__(self, config: NetConfig | None = None):
        super().__init__()
        self.config = cfg = config or NetConfig()
        torch.manual_seed(cfg.seed)
        self.encoder = Encoder(cfg.widths, cfg.in_channels)
        self.depth = DepthDecoder(cfg.widths, cfg.depth_min, cfg.depth_max, disparity_bias=cfg.disparity_bias)
        pose_cls = MultiScalePoseDecoder if cfg.pose_decoder == "multiscale" else NaivePoseDecoder
        self.pose = pose_cls(cfg.widths, cfg.pose_width)
        self.flow = FlowDecoder(cfg.widths, cfg.flow_width)
        self.mask = MaskDecoder(cfg.widths, cfg.flow_width)
        self.seg = SegmentationHead(cfg.widths, cfg.num_queries, cfg.num_classes, cfg.seg_dim, cfg.seg_layers)

    def encode(self, images) -> FeaturePyramid:
        return self.encoder(images)

    def depth_maps(self, feats: FeaturePyramid) -> list:
        return [self.depth.disparity_to_depth(d) for d in self.depth(feats)]


def make_steering_head(config: NetConfig, image_size=(64, 96), positional=True) -> SteeringHead:
    h, w = image_size[0] // 32, image_size[1] // 32
    return SteeringHead(config.widths[-1], h * w, config.steer_dim, config.steer_heads, positional=positional)


def steering_forward(encoder: Encoder, head: SteeringHead, frames: torch.Tensor) -> torch.Tensor:
    """Angles for ``(B, 16, 3, H, W)`` frame stacks."""
    if frames.dim() != 5 or frames.shape[1] != N_FRAMES_STEERING:
        raise ShapeError(f"expected (B, 16, 3, H, W) frames, got {tuple(frames.shape)}")
    b, n = frames.shape[:2]
    coarse = encoder(frames.flatten(0, 1))[4]
    return head(coarse.reshape(b, n, *coarse.shape[1:]))


# -- checkpoints ---------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, state: dict, config: dict):
    """Write parameter arrays and a JSON header into one zip archive with fixed timestamps."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("config.json", _ZIP_DATE)
        zf.writestr(info, json.dumps(config, sort_keys=True, indent=2))
        for name in sorted(state):
            arr = state[name].detach().cpu().numpy() if isinstance(state[name], torch.Tensor) else np.asarray(state[name])
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.array(arr, order="C"), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"params/{name}.npy", _ZIP_DATE), buf.getvalue())


def load_checkpoint(path):
    """Return ``(state, config)``; ``state`` maps parameter names to tensors."""
    state = {}
    with zipfile.ZipFile(path) as zf:
        config = json.loads(zf.read("config.json"))
        for name in zf.namelist():
            if name.startswith("params/"):
                arr = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
                state[name[len("params/"):-len(".npy")]] = torch.from_numpy(arr.copy())
    return state, config


def state_checksum(module_or_state, prefix: str | tuple = "") -> str:
    """SHA-256 over names, dtypes, shapes and bytes of (a prefix-filtered part of) a state dict."""
    state = module_or_state.state_dict() if isinstance(module_or_state, nn.Module) else module_or_state
    prefixes = (prefix,) if isinstance(prefix, str) else tuple(prefix)
    h = hashlib.sha256()
    for name in sorted(state):
        if not name.startswith(prefixes):
            continue
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()
