"""Finite-difference gradient checks for every loss and the differentiable warp.

Each registered check builds small random float64 inputs, evaluates a scalar
function, and compares autograd gradients against central differences. The
error reported per input is the norm-wise relative error
``||g_auto - g_fd|| / max(||g_auto||, ||g_fd||)``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from . import lossbank as lb
from .geomcore import CameraIntrinsics, Plane, RigidPose, rigid_flow, warp_synthesize

REL_TOL = 1e-3
FD_STEP = 1e-6

CHECKS = {}


def register(name):
    def deco(fn):
        CHECKS[name] = fn
        return fn
    return deco


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    per_input: dict
    passed: bool
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28} max_rel_err={self.max_rel_error:.3e} ({self.seconds:.2f}s)"


class _SignFlip(torch.autograd.Function):
    """Identity forward, negated backward; used to plant a gradient bug."""

    @staticmethod
    def forward(ctx, x):
        return x.clone()

    @staticmethod
    def backward(ctx, grad):
        return -grad


def numeric_grad(fn, inputs: dict, name: str, step: float = FD_STEP) -> torch.Tensor:
    x = inputs[name]
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            plus = float(fn(**inputs))
            flat[i] = orig - step
            minus = float(fn(**inputs))
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * step)
    return grad


def relative_error(auto: torch.Tensor, num: torch.Tensor) -> float:
    scale = max(auto.norm().item(), num.norm().item())
    if scale < 1e-10:
        return 0.0
    return (auto - num).norm().item() / scale


def check_function(name: str, fn, inputs: dict, wrt, flip: bool = False, tol: float = REL_TOL) -> CheckResult:
    start = time.perf_counter()
    inputs = {k: (v.detach().clone() if isinstance(v, torch.Tensor) else v) for k, v in inputs.items()}
    for k in wrt:
        inputs[k].requires_grad_(True)
    out = fn(**inputs)
    if flip:
        out = _SignFlip.apply(out)
    grads = torch.autograd.grad(out, [inputs[k] for k in wrt], allow_unused=True)
    per_input = {}
    for k, g in zip(wrt, grads):
        g = torch.zeros_like(inputs[k]) if g is None else g
        per_input[k] = relative_error(g, numeric_grad(fn, inputs, k))
    worst = max(per_input.values())
    return CheckResult(name, worst, per_input, worst <= tol, time.perf_counter() - start)


def _rand(g, *shape, low=0.0, high=1.0):
    return torch.rand(*shape, generator=g, dtype=torch.float64) * (high - low) + low


def _randn(g, *shape, scale=1.0):
    return torch.randn(*shape, generator=g, dtype=torch.float64) * scale


@register("photometric_loss")
def _photometric(g):
    valid = _rand(g, 1, 1, 8, 8) > 0.2
    fn = lambda pred, target: lb.photometric_loss(pred, target, valid, alpha=0.85)
    return fn, {"pred": _rand(g, 1, 3, 8, 8), "target": _rand(g, 1, 3, 8, 8)}, ["pred", "target"]


@register("smoothness_loss")
def _smoothness(g):
    weights = lb.LossWeights(smooth_disp=0.3, smooth_flow=0.5, smooth_mask=0.7)
    fn = lambda inv_depth, flow, mask, guide: lb.smoothness_loss(guide, inv_depth, flow, mask, weights)
    inputs = {"inv_depth": _rand(g, 1, 1, 8, 8, low=0.1), "flow": _randn(g, 1, 3, 8, 8),
              "mask": _rand(g, 1, 1, 8, 8), "guide": _rand(g, 1, 3, 8, 8)}
    return fn, inputs, list(inputs)


@register("motion_consistency_loss")
def _consistency(g):
    inputs = {"flow_complete": _randn(g, 1, 3, 8, 8), "flow_rigid": _randn(g, 1, 3, 8, 8),
              "mask": _rand(g, 1, 1, 8, 8)}
    return lb.motion_consistency_loss, inputs, list(inputs)


@register("motion_sparsity_loss")
def _sparsity(g):
    disc = _rand(g, 1, 1, 8, 8, high=2.0)
    fn = lambda mask: lb.motion_sparsity_loss(mask, disc)
    return fn, {"mask": _rand(g, 1, 1, 8, 8, low=0.05, high=0.95)}, ["mask"]


@register("above_ground_loss")
def _ground(g):
    plane = Plane(np.array([0.0, -1.0, 0.0]), -1.0)
    return (lambda points: lb.above_ground_loss(points, plane)), {"points": _randn(g, 1, 3, 8, 8)}, ["points"]


@register("ssup_total")
def _ssup(g):
    keys = lb.SSUP_KEYS
    fn = lambda **parts: lb.ssup_total(parts).total
    return fn, {k: _rand(g, ()) for k in keys}, list(keys)


@register("seg_classification_loss")
def _cls(g):
    targets = torch.tensor([1, 3, 0])
    fn = lambda logits: lb.seg_classification_loss(logits, targets, np.array([0, 2, 5]), np.array([2, 0, 1]))
    return fn, {"logits": _randn(g, 6, 5)}, ["logits"]


@register("seg_mask_bce")
def _bce(g):
    target = _rand(g, 3, 8, 8) > 0.5
    return (lambda logits: lb.seg_mask_losses(logits, target)[0]), {"logits": _randn(g, 3, 8, 8)}, ["logits"]


@register("seg_mask_dice")
def _dice(g):
    target = _rand(g, 3, 8, 8) > 0.5
    return (lambda logits: lb.seg_mask_losses(logits, target)[1]), {"logits": _randn(g, 3, 8, 8)}, ["logits"]


@register("seg_contrastive_loss")
def _contrast(g):
    fn = lambda obj, txt: lb.seg_contrastive_loss(obj, txt, temperature=0.5)
    return fn, {"obj": _randn(g, 4, 8), "txt": _randn(g, 4, 8)}, ["obj", "txt"]


@register("sup_total")
def _sup(g):
    keys = lb.SUP_KEYS
    fn = lambda **parts: lb.sup_total(parts).total
    return fn, {k: _rand(g, ()) for k in keys}, list(keys)


@register("distill_loss")
def _distill(g):
    flow_t, mask_t = _randn(g, 1, 3, 8, 8), _rand(g, 1, 1, 8, 8)
    fn = lambda flow, mask: lb.distill_loss(flow, flow_t, mask, mask_t, 0.1, 1e-3)
    return fn, {"flow": _randn(g, 1, 3, 8, 8), "mask": _rand(g, 1, 1, 8, 8)}, ["flow", "mask"]


@register("total_loss")
def _total(g):
    def fn(sup, ssup, distil):
        a = lb.LossReport.weighted({"x": sup}, {"x": 1.0})
        b = lb.LossReport.weighted({"x": ssup}, {"x": 1.0})
        return lb.total_loss(a, b, distil, lb.LossWeights(sup=0.7, ssup=1.3, distil=0.4)).total
    return fn, {"sup": _rand(g, ()), "ssup": _rand(g, ()), "distil": _rand(g, ())}, ["sup", "ssup", "distil"]


@register("steering_loss")
def _steer(g):
    fn = lambda pred, target: lb.steering_loss(pred, target, lam=0.3)
    return fn, {"pred": _randn(g, 8, scale=3), "target": _randn(g, 8, scale=3)}, ["pred", "target"]


@register("warp_synthesize")
def _warp(g):
    K = CameraIntrinsics(8.0, 8.0, 3.5, 3.5, 8, 8)
    weights = _rand(g, 1, 3, 8, 8)
    fn = lambda image, depth, flow: (warp_synthesize(image, depth, flow, K)[0] * weights).sum()
    inputs = {"image": _rand(g, 1, 3, 8, 8), "depth": _rand(g, 1, 1, 8, 8, low=2.0, high=4.0),
              "flow": _randn(g, 1, 3, 8, 8, scale=0.1)}
    return fn, inputs, list(inputs)


@register("rigid_flow")
def _rigid(g):
    K = CameraIntrinsics(8.0, 8.0, 3.5, 3.5, 8, 8)
    weights = _randn(g, 1, 3, 8, 8)
    fn = lambda depth, pose: (rigid_flow(depth, RigidPose.from_vector(pose), K) * weights).sum()
    return fn, {"depth": _rand(g, 1, 1, 8, 8, low=1.0, high=5.0), "pose": _randn(g, 1, 6, scale=0.2)}, ["depth", "pose"]


def run_checks(names=None, seed: int = 0, faults=(), tol: float = REL_TOL):
    """Run the selected checks (all by default); ``faults`` names checks whose gradient is sign-flipped."""
    names = list(CHECKS) if not names else list(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown gradient checks: {unknown}; available: {sorted(CHECKS)}")
    results = []
    for i, name in enumerate(names):
        g = torch.Generator().manual_seed(seed * 1000 + i)
        fn, inputs, wrt = CHECKS[name](g)
        results.append(check_function(name, fn, inputs, wrt, flip=name in faults, tol=tol))
    return results
