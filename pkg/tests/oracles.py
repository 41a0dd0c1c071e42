"""Slow, explicit-loop reference implementations used as independent oracles.

Nothing here imports from the package under test.
"""

import math

import numpy as np


def gram_loop(x):
    n, p = x.shape
    k = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            s = 0.0
            for f in range(p):
                s += x[i, f] * x[j, f]
            k[i, j] = s
    return k


def hsic1_loop(k, l):
    n = len(k)
    kt = [[0.0 if i == j else float(k[i][j]) for j in range(n)] for i in range(n)]
    lt = [[0.0 if i == j else float(l[i][j]) for j in range(n)] for i in range(n)]
    trace = 0.0
    for i in range(n):
        for j in range(n):
            trace += kt[i][j] * lt[j][i]
    sum_k = sum(kt[i][j] for i in range(n) for j in range(n))
    sum_l = sum(lt[i][j] for i in range(n) for j in range(n))
    cross = 0.0
    for i in range(n):
        for j in range(n):
            for m in range(n):
                cross += kt[i][m] * lt[m][j]
    term = trace + sum_k * sum_l / ((n - 1) * (n - 2)) - 2.0 / (n - 2) * cross
    return term / (n * (n - 3))


def cka_loop(xs, ys):
    kxy = kxx = kyy = 0.0
    for x, y in zip(xs, ys):
        kx, ky = gram_loop(np.asarray(x, float)), gram_loop(np.asarray(y, float))
        kxy += hsic1_loop(kx, ky)
        kxx += hsic1_loop(kx, kx)
        kyy += hsic1_loop(ky, ky)
    k = len(xs)
    return (kxy / k) / math.sqrt(kxx / k) / math.sqrt(kyy / k)


def cosine_loop(x, y):
    total = 0.0
    for a, b in zip(x, y):
        na = math.sqrt(sum(v * v for v in a))
        nb = math.sqrt(sum(v * v for v in b))
        total += 0.0 if na == 0 or nb == 0 else sum(p * q for p, q in zip(a, b)) / (na * nb)
    return total / len(x)


def kl_loop(student, teacher, tau):
    total = 0.0
    for zs, zt in zip(student, teacher):
        es = [math.exp(v / tau) for v in zs]
        et = [math.exp(v / tau) for v in zt]
        ps = [v / sum(es) for v in es]
        pt = [v / sum(et) for v in et]
        total += sum(t * (math.log(t) - math.log(s)) for s, t in zip(ps, pt))
    return total / len(student)


def fgd_loop(ft, fh, m, a_s, a_c, w_f, w_b):
    b, c, h, w = ft.shape
    fg = bg = 0.0
    for i in range(b):
        for ch in range(c):
            for y in range(h):
                for x in range(w):
                    d = (ft[i, ch, y, x] - fh[i, ch, y, x]) ** 2
                    weight = a_s[i, 0, y, x] * a_c[i, ch, 0, 0]
                    if m[i, 0, y, x]:
                        fg += weight * d
                    else:
                        bg += weight * d
    return w_f * fg + w_b * bg


def masked_mse_loop(pred, target, token_mask, patch):
    """MSE over elements whose enclosing patch is unmasked."""
    b, c, h, w = pred.shape
    total, count = 0.0, 0
    for i in range(b):
        for y in range(h):
            for x in range(w):
                if token_mask[i, y // patch, x // patch]:
                    continue
                for ch in range(c):
                    total += (pred[i, ch, y, x] - target[i, ch, y, x]) ** 2
                    count += 1
    return total / count


def topk_loop(logits, labels, k):
    hits = 0
    for row, y in zip(logits, labels):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        hits += y in order[:k]
    return 100.0 * hits / len(labels)


def flood_fill_components(grid):
    rows, cols = grid.shape
    seen = np.zeros_like(grid, dtype=bool)
    comps = []
    for r in range(rows):
        for c in range(cols):
            if grid[r, c] and not seen[r, c]:
                stack, comp = [(r, c)], []
                seen[r, c] = True
                while stack:
                    y, x = stack.pop()
                    comp.append((y, x))
                    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < rows and 0 <= nx < cols and grid[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
                comps.append(comp)
    return comps
