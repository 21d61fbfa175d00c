"""Independent reference implementations used as test oracles.

These deliberately avoid torch convolution/attention kernels and the package's
own helpers: plain Python loops over explicit index arithmetic.
"""

import math

import numpy as np


def conv2d_loops(x, weight, bias=None, stride=1, padding=0, dilation=1, groups=1):
    """Dilated cross-correlation by explicit loop nest.

    Returns ``(output, multiplications)``. Every kernel tap is multiplied,
    including taps that fall on zero padding.
    """
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    b, cin, h, w = x.shape
    cout, cin_g, k, _ = weight.shape
    ext = k + (k - 1) * (dilation - 1)
    ho = (h + 2 * padding - ext) // stride + 1
    wo = (w + 2 * padding - ext) // stride + 1
    cout_g = cout // groups
    out = np.zeros((b, cout, ho, wo))
    mults = 0
    for n in range(b):
        for oc in range(cout):
            g = oc // cout_g
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if bias is None else float(bias[oc])
                    for ic in range(cin_g):
                        c = g * cin_g + ic
                        for ki in range(k):
                            for kj in range(k):
                                yi = i * stride - padding + ki * dilation
                                xj = j * stride - padding + kj * dilation
                                v = x[n, c, yi, xj] if 0 <= yi < h and 0 <= xj < w else 0.0
                                acc += v * weight[oc, ic, ki, kj]
                                mults += 1
                    out[n, oc, i, j] = acc
    return out, mults


def linear_loops(x, weight, bias=None):
    """``x[..., in] @ weight.T`` by loops; returns (output, multiplications)."""
    x = np.asarray(x, dtype=np.float64)
    rows = x.reshape(-1, x.shape[-1])
    out_f, in_f = weight.shape
    out = np.zeros((rows.shape[0], out_f))
    mults = 0
    for r in range(rows.shape[0]):
        for o in range(out_f):
            acc = 0.0 if bias is None else float(bias[o])
            for i in range(in_f):
                acc += rows[r, i] * weight[o, i]
                mults += 1
            out[r, o] = acc
    return out.reshape(*x.shape[:-1], out_f), mults


def iou_enumeration(pred, gt, num_classes):
    """Per-class IoU by counting pixel pairs one at a time; NaN for absent classes."""
    pred = list(np.asarray(pred).ravel())
    gt = list(np.asarray(gt).ravel())
    per_class = []
    for c in range(num_classes):
        tp = fp = fn = 0
        for p, g in zip(pred, gt):
            if p == c and g == c:
                tp += 1
            elif p == c:
                fp += 1
            elif g == c:
                fn += 1
        per_class.append(tp / (tp + fp + fn) if tp + fp + fn else math.nan)
    valid = [v for v in per_class if not math.isnan(v)]
    return per_class, sum(valid) / len(valid)


def attention_direct(tokens, qkv_w, qkv_b, proj_w, proj_b, num_heads):
    """Multi-head self-attention on a flat token list, one query at a time."""
    x = np.asarray(tokens, dtype=np.float64)
    n, c = x.shape
    hd = c // num_heads
    qkv = x @ qkv_w.T + qkv_b
    q, k, v = qkv[:, :c], qkv[:, c:2 * c], qkv[:, 2 * c:]
    out = np.zeros((n, c))
    for h in range(num_heads):
        sl = slice(h * hd, (h + 1) * hd)
        for i in range(n):
            scores = np.array([q[i, sl] @ k[j, sl] / math.sqrt(hd) for j in range(n)])
            e = np.exp(scores - scores.max())
            p = e / e.sum()
            out[i, sl] = sum(p[j] * v[j, sl] for j in range(n))
    return out @ proj_w.T + proj_b
