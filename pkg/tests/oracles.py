"""Independent reference implementations (plain loops / numpy) used as test oracles."""

import numpy as np
import torch

EPS = 1e-8


def centers_loop(x, y, eps=EPS):
    """x: (C, H, W), y: (K, H, W) → (K, C) weighted means by explicit summation."""
    C, H, W = x.shape
    K = y.shape[0]
    c = np.zeros((K, C))
    for k in range(K):
        den = 0.0
        num = np.zeros(C)
        for i in range(H):
            for j in range(W):
                den += y[k, i, j]
                num += x[:, i, j] * y[k, i, j]
        c[k] = num / (den + eps)
    return c


def kmeans_loop(x, y, alpha_rec=1.0, alpha_reg=1.0):
    C, H, W = x.shape
    K = y.shape[0]
    c = centers_loop(x, y)
    rec = 0.0
    reg = 0.0
    for i in range(H):
        for j in range(W):
            xc = sum(c[k] * y[k, i, j] for k in range(K))
            rec += np.abs(x[:, i, j] - xc).sum()
            reg += sum(y[k, i, j] * (1 - y[k, i, j]) for k in range(K))
    return alpha_rec * rec / (C * H * W) + alpha_reg * reg


def mumford_shah_loop(x, y, alpha_reg=1.0):
    C, H, W = x.shape
    K = y.shape[0]
    c = centers_loop(x, y)
    data = 0.0
    tv = 0.0
    for k in range(K):
        for i in range(H):
            for j in range(W):
                data += ((x[:, i, j] - c[k]) ** 2).sum() * y[k, i, j]
                if i + 1 < H:
                    tv += abs(y[k, i + 1, j] - y[k, i, j])
                if j + 1 < W:
                    tv += abs(y[k, i, j + 1] - y[k, i, j])
    return data + alpha_reg * tv


def confusion_loop(pred, gt, void_ids, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if int(g) in void_ids:
            continue
        cm[int(g), int(p)] += 1
    return cm


def metrics_loop(pred, gt, void_ids, num_classes):
    """OA and present-class mIoU by per-pixel counting, as exact fractions."""
    from fractions import Fraction

    correct = total = 0
    tp = [0] * num_classes
    fp = [0] * num_classes
    fn = [0] * num_classes
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        p, g = int(p), int(g)
        if g in void_ids:
            continue
        total += 1
        if p == g:
            correct += 1
            tp[g] += 1
        else:
            fp[p] += 1
            fn[g] += 1
    ious = [Fraction(tp[k], tp[k] + fp[k] + fn[k]) for k in range(num_classes) if tp[k] + fp[k] + fn[k] > 0]
    oa = Fraction(correct, total) if total else Fraction(0)
    miou = sum(ious) / len(ious) if ious else Fraction(0)
    return oa, miou


def central_difference(fn, t, h=1e-6):
    """Gradient of scalar ``fn`` at float64 tensor ``t`` by central differences."""
    base = t.detach().clone()
    grad = torch.zeros_like(base)
    flat, gflat = base.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = fn(base).item()
            flat[i] = orig - h
            down = fn(base).item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def analytic_gradient(fn, t):
    t = t.detach().clone().requires_grad_(True)
    fn(t).backward()
    return t.grad


def relative_error(analytic, numeric):
    """max |a - n| / max |n| (infinity-norm relative error)."""
    scale = max(numeric.abs().max().item(), 1e-12)
    return (analytic - numeric).abs().max().item() / scale
