"""Brute-force reference implementations, written per pixel in plain numpy/python.

These deliberately avoid the vectorised code paths they check.
"""
import math

import numpy as np

C1, C2 = 0.01 ** 2, 0.03 ** 2


def _reflect(i, n):
    if i < 0:
        return -i
    if i >= n:
        return 2 * (n - 1) - i
    return i


def ssim_pixel(x, y, r, c):
    """SSIM of single-channel images at (r, c) with a reflected 3x3 window."""
    h, w = x.shape
    xs, ys = [], []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            rr, cc = _reflect(r + dr, h), _reflect(c + dc, w)
            xs.append(x[rr, cc])
            ys.append(y[rr, cc])
    mx, my = sum(xs) / 9, sum(ys) / 9
    vx = sum(a * a for a in xs) / 9 - mx * mx
    vy = sum(b * b for b in ys) / 9 - my * my
    cxy = sum(a * b for a, b in zip(xs, ys)) / 9 - mx * my
    return ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))


def ssim_map(x, y):
    """x, y: (C, H, W) -> (C, H, W)."""
    out = np.zeros_like(x)
    for ch in range(x.shape[0]):
        for r in range(x.shape[1]):
            for c in range(x.shape[2]):
                out[ch, r, c] = ssim_pixel(x[ch], y[ch], r, c)
    return out


def photometric(pred, target, valid, alpha):
    """pred, target: (C, H, W); valid: (H, W) bool."""
    s = ssim_map(pred, target)
    total, n = 0.0, 0
    for r in range(pred.shape[1]):
        for c in range(pred.shape[2]):
            if not valid[r, c]:
                continue
            dssim = sum((1 - s[ch, r, c]) / 2 for ch in range(pred.shape[0])) / pred.shape[0]
            l1 = sum(abs(pred[ch, r, c] - target[ch, r, c]) for ch in range(pred.shape[0])) / pred.shape[0]
            total += alpha * dssim + (1 - alpha) * l1
            n += 1
    return total / n


def smoothness(field, guide):
    """field: (C, H, W), guide: (G, H, W)."""
    cf, h, w = field.shape
    g = guide.shape[0]
    sx = sy = 0.0
    for r in range(h):
        for c in range(w - 1):
            gx = sum(abs(guide[k, r, c] - guide[k, r, c + 1]) for k in range(g)) / g
            for k in range(cf):
                sx += abs(field[k, r, c] - field[k, r, c + 1]) * math.exp(-gx)
    for r in range(h - 1):
        for c in range(w):
            gy = sum(abs(guide[k, r, c] - guide[k, r + 1, c]) for k in range(g)) / g
            for k in range(cf):
                sy += abs(field[k, r, c] - field[k, r + 1, c]) * math.exp(-gy)
    return sx / (cf * h * (w - 1)) + sy / (cf * (h - 1) * w)


def sigmoid(x):
    return 1 / (1 + math.exp(-x))


def mask_losses(logits, targets):
    """logits, targets: (N, H, W) -> (bce, dice)."""
    bce_sum, count, dice_sum = 0.0, 0, 0.0
    for n in range(logits.shape[0]):
        inter = psum = tsum = 0.0
        for v, t in zip(logits[n].ravel(), targets[n].ravel()):
            p = sigmoid(v)
            bce_sum += -(t * math.log(p) + (1 - t) * math.log(1 - p))
            count += 1
            inter += p * t
            psum += p
            tsum += t
        dice_sum += 1 - (2 * inter + 1e-7) / (psum + tsum + 1e-7)
    return bce_sum / count, dice_sum / logits.shape[0]


def cross_entropy(logits, label):
    m = max(logits)
    lse = m + math.log(sum(math.exp(v - m) for v in logits))
    return lse - logits[label]


def contrastive(obj, txt, temperature):
    def unit(v):
        n = math.sqrt(sum(a * a for a in v))
        return [a / n for a in v]
    o = [unit(v) for v in obj]
    t = [unit(v) for v in txt]
    n = len(o)
    sim = [[sum(a * b for a, b in zip(o[i], t[j])) / temperature for j in range(n)] for i in range(n)]
    forward = sum(cross_entropy(sim[i], i) for i in range(n)) / n
    backward = sum(cross_entropy([sim[j][i] for j in range(n)], i) for i in range(n)) / n
    return (forward + backward) / 2


def steering(pred, target, lam):
    num = den = 0.0
    for p, y in zip(pred, target):
        w = math.exp(lam * abs(y))
        num += w * (p - y) ** 2
        den += w
    return num / den


def depth_metrics(pred, gt):
    n = len(pred)
    abs_rel = sum(abs(p - g) / g for p, g in zip(pred, gt)) / n
    sq_rel = sum((p - g) ** 2 / g for p, g in zip(pred, gt)) / n
    rmse = math.sqrt(sum((p - g) ** 2 for p, g in zip(pred, gt)) / n)
    rmse_log = math.sqrt(sum((math.log(p) - math.log(g)) ** 2 for p, g in zip(pred, gt)) / n)
    deltas = []
    for k in (1, 2, 3):
        deltas.append(sum(1 for p, g in zip(pred, gt) if max(p / g, g / p) < 1.25 ** k) / n)
    return [abs_rel, sq_rel, rmse, rmse_log] + deltas


def class_iou(pred, gt, num_classes):
    """Mean IoU over classes present in prediction or ground truth."""
    ious = []
    for k in range(num_classes):
        inter = union = 0
        for p, g in zip(pred.ravel(), gt.ravel()):
            inter += (p == k) and (g == k)
            union += (p == k) or (g == k)
        if union:
            ious.append(inter / union)
    return sum(ious) / len(ious)


def panoptic_quality(pred_segments, gt_segments):
    """Segments: list of (class, frozenset of pixel ids). Enumerates every matching."""
    import itertools

    def iou(a, b):
        return len(a & b) / len(a | b)

    best = None
    n_p, n_g = len(pred_segments), len(gt_segments)
    # Search every partial injective pairing; keep the one maximising matched count, then IoU sum.
    for k in range(min(n_p, n_g), -1, -1):
        for ps in itertools.combinations(range(n_p), k):
            for gs in itertools.permutations(range(n_g), k):
                pairs = list(zip(ps, gs))
                if all(pred_segments[p][0] == gt_segments[g][0]
                       and iou(pred_segments[p][1], gt_segments[g][1]) > 0.5 for p, g in pairs):
                    score = (k, sum(iou(pred_segments[p][1], gt_segments[g][1]) for p, g in pairs))
                    if best is None or score > best:
                        best = score
    tp, iou_sum = best
    fp, fn = n_p - tp, n_g - tp
    denom = tp + fp / 2 + fn / 2
    return iou_sum / denom if denom else 1.0
