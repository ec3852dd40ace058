"""Brute-force reference implementations of the evaluation metrics.

Deliberately naive (python loops, BFS flood fill) and independent of the
package's production code paths; shared by the unit and acceptance tests.
"""

import numpy as np


def naive_sad(pred, gt, mask):
    total = 0.0
    h, w = pred.shape
    for i in range(h):
        for j in range(w):
            if mask[i, j]:
                total += abs(float(pred[i, j]) - float(gt[i, j]))
    return total / 1000.0


def naive_mse(pred, gt, mask):
    total, count = 0.0, 0
    h, w = pred.shape
    for i in range(h):
        for j in range(w):
            if mask[i, j]:
                total += (float(pred[i, j]) - float(gt[i, j])) ** 2
                count += 1
    return 0.0 if count == 0 else total / count * 1000.0


def naive_grad_kernel(sigma=1.4, eps=1e-2):
    import math
    halfsize = int(sigma * math.sqrt(-2.0 * math.log(math.sqrt(2.0 * math.pi)
                                                     * sigma * eps)))
    size = 2 * halfsize + 1
    hx = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            u, v = i - halfsize, j - halfsize
            g_u = math.exp(-u * u / (2 * sigma * sigma)) / (sigma * math.sqrt(2 * math.pi))
            g_v = math.exp(-v * v / (2 * sigma * sigma)) / (sigma * math.sqrt(2 * math.pi))
            hx[i, j] = g_u * (-v * g_v / sigma ** 2)
    return hx / math.sqrt((hx ** 2).sum())


def naive_convolve_nearest(img, kernel):
    """out[i,j] = sum_{a,b} img[i+hs-a, j+hs-b] * kernel[a,b], edges clamped."""
    h, w = img.shape
    size = kernel.shape[0]
    hs = size // 2
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for a in range(size):
                for b in range(size):
                    y = min(max(i + hs - a, 0), h - 1)
                    x = min(max(j + hs - b, 0), w - 1)
                    acc += img[y, x] * kernel[a, b]
            out[i, j] = acc
    return out


def naive_grad_error(pred, gt, mask):
    hx = naive_grad_kernel()
    hy = hx.T

    def magnitude(img):
        gx = naive_convolve_nearest(img, hx)
        gy = naive_convolve_nearest(img, hy)
        return np.sqrt(gx ** 2 + gy ** 2)

    pm, gm = magnitude(np.asarray(pred, float)), magnitude(np.asarray(gt, float))
    total = 0.0
    h, w = pred.shape
    for i in range(h):
        for j in range(w):
            if mask[i, j]:
                total += (pm[i, j] - gm[i, j]) ** 2
    return total / 1000.0


def largest_component_bfs(mask):
    """Largest 4-connected True region; first-found wins ties (row-major)."""
    h, w = mask.shape
    seen = np.zeros((h, w), dtype=bool)
    best = []
    for si in range(h):
        for sj in range(w):
            if mask[si, sj] and not seen[si, sj]:
                comp = [(si, sj)]
                seen[si, sj] = True
                stack = [(si, sj)]
                while stack:
                    y, x = stack.pop()
                    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] \
                                and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
                            comp.append((ny, nx))
                if len(comp) > len(best):
                    best = comp
    omega = np.zeros((h, w), dtype=bool)
    for y, x in best:
        omega[y, x] = True
    return omega


def naive_conn_error(pred, gt, mask, step=0.1):
    pred = np.asarray(pred, float)
    gt = np.asarray(gt, float)
    h, w = pred.shape
    thresholds = np.arange(0.0, 1.0 + step, step)
    l_map = np.full((h, w), -1.0)
    for ii in range(1, thresholds.size):
        t = thresholds[ii]
        joint = (pred >= t) & (gt >= t)
        if not joint.any():
            continue
        omega = largest_component_bfs(joint)
        for i in range(h):
            for j in range(w):
                if l_map[i, j] == -1.0 and not omega[i, j]:
                    l_map[i, j] = thresholds[ii - 1]
    l_map[l_map == -1.0] = 1.0
    total = 0.0
    for i in range(h):
        for j in range(w):
            if mask[i, j]:
                dp = pred[i, j] - l_map[i, j]
                dg = gt[i, j] - l_map[i, j]
                phi_p = 1.0 - (dp if dp >= 0.15 else 0.0)
                phi_g = 1.0 - (dg if dg >= 0.15 else 0.0)
                total += abs(phi_p - phi_g)
    return total / 1000.0
