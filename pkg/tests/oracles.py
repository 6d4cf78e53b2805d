"""Independent slow reference implementations used by the tests."""

import itertools
import math

import numpy as np

from precarious.autodiff import forward_backward


def raster_iou(a, b):
    """IoU of integer boxes by counting covered unit pixels on a grid."""
    ax, ay, aw, ah = (int(v) for v in a)
    bx, by, bw, bh = (int(v) for v in b)
    x0, y0 = min(ax, bx), min(ay, by)
    x1, y1 = max(ax + aw, bx + bw), max(ay + ah, by + bh)
    ga = np.zeros((y1 - y0, x1 - x0), dtype=bool)
    gb = np.zeros_like(ga)
    ga[ay - y0:ay - y0 + ah, ax - x0:ax - x0 + aw] = True
    gb[by - y0:by - y0 + bh, bx - x0:bx - x0 + bw] = True
    inter = int((ga & gb).sum())
    union = int((ga | gb).sum())
    return inter / union


def scalar_iou(a, b):
    ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def brute_assign(anchors, gts, pos=0.5, neg=0.2):
    """Nested-loop anchor labelling: 1 positive, 0 negative, -1 ignore."""
    n, m = len(anchors), len(gts)
    ious = [[scalar_iou(anchors[i], gts[j]) for j in range(m)] for i in range(n)]
    labels, matched = [], []
    for i in range(n):
        best_j, best = -1, -1.0
        for j in range(m):
            if ious[i][j] > best:
                best_j, best = j, ious[i][j]
        if m == 0 or best < neg:
            labels.append(0)
            matched.append(-1)
        elif best > pos:
            labels.append(1)
            matched.append(best_j)
        else:
            labels.append(-1)
            matched.append(-1)
    owner = {}
    for j in range(m):
        best_i, best = -1, -1.0
        for i in range(n):
            if ious[i][j] > best:
                best_i, best = i, ious[i][j]
        owner.setdefault(best_i, []).append(j)
    for i, js in owner.items():
        top = js[0]
        for j in js:
            if ious[i][j] > ious[i][top]:
                top = j
        labels[i] = 1
        matched[i] = top
    return labels, matched


def greedy_trace(dets, gts, overlap):
    """Caltech greedy matching written as an explicit loop over plain tuples.

    ``dets`` is a list of (score, box); ties in score keep input order, ties
    in IoU go to the lower ground-truth index.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][0], i))
    used = [False] * len(gts)
    tp = [False] * len(dets)
    for d in order:
        best_j, best = -1, -1.0
        for j, g in enumerate(gts):
            if used[j]:
                continue
            v = scalar_iou(dets[d][1], g)
            if v > best:
                best_j, best = j, v
        if best_j >= 0 and best >= overlap:
            used[best_j] = True
            tp[d] = True
    return tp, used


def greedy_nms(boxes, scores, thr):
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(scalar_iou(boxes[i], boxes[k]) <= thr for k in keep):
            keep.append(i)
    return keep


def numeric_grad(f, x, eps=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def all_subsets(n):
    return itertools.chain.from_iterable(itertools.combinations(range(n), r) for r in range(n + 1))


def log_linear(f0, m0, f1, m1, t):
    return m0 + (m1 - m0) * (math.log(t) - math.log(f0)) / (math.log(f1) - math.log(f0))


def grad_check(net, x, seed=0):
    params = net.init_params(seed)
    rng = np.random.default_rng(seed + 1)
    for k in params.tensors:
        params.tensors[k] = params.tensors[k] + 0.1 * rng.standard_normal(params[k].shape)
    proj = {o: None for o in net.outputs}

    def loss(outputs):
        total, grads = 0.0, {}
        for name, y in outputs.items():
            if proj[name] is None:
                proj[name] = np.random.default_rng(7).standard_normal(y.shape)
            total += float((proj[name] * y).sum())
            grads[name] = proj[name]
        return total, grads

    _, grads = forward_backward(net, params, x, loss, input_grad=True)

    def f():
        return loss(net.forward(params, x))[0]

    worst = rel_error(grads["input"], numeric_grad(f, x))
    for name in params.tensors:
        worst = max(worst, rel_error(grads[name], numeric_grad(f, params.tensors[name])))
    return worst
