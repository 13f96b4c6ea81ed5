"""Independent reference implementations used as test oracles.

Nothing here imports the package's numerical code: operators are built as
4x4 homogeneous matrices straight from their definitions, ranks by full
sorting, and fusion with plain Python loops.
"""

from __future__ import annotations

import math

import numpy as np


# -- homogeneous operators -----------------------------------------------------


def hom_translation(v):
    m = np.eye(4)
    m[:3, 3] = v
    return m


def hom_scaling(s):
    return np.diag([s[0], s[1], s[2], 1.0])


def hom_rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0, 0], [s, c, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1.0]])


def hom_ry(b):
    # right-handed pitch; this is the convention that reproduces g = -sin(beta)
    c, s = math.cos(b), math.sin(b)
    return np.array([[c, 0, s, 0], [0, 1, 0, 0], [-s, 0, c, 0], [0, 0, 0, 1.0]])


def hom_rx(g):
    c, s = math.cos(g), math.sin(g)
    return np.array([[1, 0, 0, 0], [0, c, -s, 0], [0, s, c, 0], [0, 0, 0, 1.0]])


def hom_rotation(angles):
    a, b, g = angles
    return hom_rz(a) @ hom_ry(b) @ hom_rx(g)


def hom_reflection(raw):
    n = np.asarray(raw, dtype=float) / np.linalg.norm(raw)
    m = np.eye(4)
    for i in range(3):
        for j in range(3):
            m[i, j] = (1.0 if i == j else 0.0) - 2.0 * n[i] * n[j]
    return m


def hom_shear(sh):
    """``(Sh^y_x, Sh^z_x, Sh^x_y, Sh^z_y, Sh^x_z, Sh^y_z)`` as H_yz H_xz H_xy."""
    yx, zx, xy, zy, xz, yz = sh
    h_yz = np.eye(4)
    h_yz[1, 0], h_yz[2, 0] = xy, xz
    h_xz = np.eye(4)
    h_xz[0, 1], h_xz[2, 1] = yx, yz
    h_xy = np.eye(4)
    h_xy[0, 2], h_xy[1, 2] = zx, zy
    return h_yz @ h_xz @ h_xy


HOMOGENEOUS = {
    "T": hom_translation,
    "S": hom_scaling,
    "R": hom_rotation,
    "F": hom_reflection,
    "H": hom_shear,
}


def hom_chain(kinds, values):
    m = np.eye(4)
    for k, v in zip(kinds, values):
        m = m @ HOMOGENEOUS[k](v)
    return m


def hom_apply(m, x):
    return (m @ np.append(np.asarray(x, dtype=float), 1.0))[:3]


# -- scores and ranks ----------------------------------------------------------


def brute_score(entity, kinds_h, params_h, kinds_t, params_t, h, r, t, order=2):
    """Score one triple by looping over blocks with homogeneous matrices."""
    d = entity.shape[1]
    diff = []
    for b in range(d // 3):
        hb = entity[h, 3 * b:3 * b + 3]
        tb = entity[t, 3 * b:3 * b + 3]
        mh = hom_chain(kinds_h, [p[r, b] for p in params_h])
        mt = hom_chain(kinds_t, [p[r, b] for p in params_t])
        diff.extend(hom_apply(mh, hb) - hom_apply(mt, tb))
    diff = np.array(diff)
    return float(np.abs(diff).sum()) if order == 1 else float(np.sqrt((diff * diff).sum()))


def brute_filtered_rank(scores, truth, known):
    """Sort-based rank with the half-ties rule, dropping known non-target candidates."""
    cands = [(s, e) for e, s in enumerate(scores) if e == truth or e not in known]
    target = scores[truth]
    ordered = sorted(cands)
    first = next(i for i, (s, _) in enumerate(ordered) if s == target)
    ties = sum(1 for s, e in cands if s == target and e != truth)
    return first + 1 + ties // 2


# -- rank fusion -----------------------------------------------------------------


def brute_fusion_value(member_ranks, method, size, k=60.0, phi=0.98):
    # canonical summation order so mathematically equal values compare equal
    member_ranks = sorted(member_ranks)
    n = len(member_ranks)
    if method == "CombMAX":
        return max(member_ranks)
    if method == "CombMIN":
        return min(member_ranks)
    if method == "CombMEDIAN":
        s = sorted(member_ranks)
        return s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2
    if method == "CombSUM":
        return sum(member_ranks)
    if method == "Euclidean":
        return math.sqrt(sum(r * r for r in member_ranks))
    if method == "Borda":
        return sum((size - r + 1) / size for r in member_ranks)
    if method == "RRF":
        return sum(1 / (k + r) for r in member_ranks)
    if method == "RBC":
        return sum((1 - phi) * phi ** (r - 1) for r in member_ranks)
    raise ValueError(method)


HIGHER_BETTER = {"Borda", "RRF", "RBC"}


def brute_fuse(rank_lists, method, k=60.0, phi=0.98):
    """Ordering of candidates (best first) and the value per candidate."""
    n_cands = len(rank_lists[0])
    keyed = []
    for c in range(n_cands):
        ranks = [float(rl[c]) for rl in rank_lists]
        value = brute_fusion_value(ranks, method, n_cands, k, phi)
        primary = -value if method in HIGHER_BETTER else value
        keyed.append((primary, sum(ranks) / len(ranks), c))
    keyed.sort()
    return [c for _, _, c in keyed], keyed


def brute_fused_rank(rank_lists, truth, method, k=60.0, phi=0.98):
    _, keyed = brute_fuse(rank_lists, method, k, phi)
    key = next((p, m) for p, m, c in keyed if c == truth)
    better = sum(1 for p, m, c in keyed if (p, m) < key)
    ties = sum(1 for p, m, c in keyed if (p, m) == key and c != truth)
    return 1 + better + ties // 2


def average_ranks(scores):
    """1-based ranks by ascending score; tied scores share the mean position."""
    order = sorted(range(len(scores)), key=lambda i: scores[i])
    ranks = [0.0] * len(scores)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        mean = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = mean
        i = j + 1
    return ranks


# -- finite differences ----------------------------------------------------------


def central_diff(f, x, step=1e-5):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = f(x)
        x[idx] = orig - step
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * step)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1e-8, float(np.max(np.abs(b)))))
