"""Independent reference implementations used by the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np

METHODS = ("frequentist", "manski", "pearl")


def brute_force_day(point, lower, observed, cap_im, cap_s, busy_im, busy_s, rho):
    """Enumerate every 0/1 vector; return the feasible ones with their welfare.

    Patient 0 is the most significant bit of the mask. Welfare uses the
    table column at the vector's internal-medicine headcount.
    """
    P = len(observed)
    budget = P if rho is None else math.floor(rho * P + 1e-9)
    rows = []
    for bits in itertools.product((0, 1), repeat=P):
        j = sum(bits)
        if busy_im + j > cap_im or busy_s + (P - j) > cap_s:
            continue
        moves = sum(b != o for b, o in zip(bits, observed))
        if moves > budget:
            continue
        mask = int("".join(map(str, bits)), 2) if P else 0
        vals = {"point": sum(point[i][j] for i in range(P) if bits[i])}
        for m in METHODS:
            vals[m] = sum(lower[m][i][j] for i in range(P) if bits[i])
        rows.append((bits, mask, moves, vals))
    return rows


def brute_force_choices(rows, tol=1e-12):
    """Welfare-max and minimax choices over enumerated rows, same tie rule as the solver."""
    if not rows:
        return None
    best = {k: max(r[3][k] for r in rows) for k in ("point",) + METHODS}

    def regret(r, m):
        gap = best["point"] - r[3]["point"]
        return gap if m == "point" else max(gap, best[m] - r[3][m])

    def argmin(obj):
        lo = min(obj(r) for r in rows)
        cand = [r for r in rows if obj(r) <= lo + tol]
        return min(cand, key=lambda r: (r[2], r[1]))

    out = {"welfare_max": argmin(lambda r: -r[3]["point"])}
    for crit, m in (("minimax_freq", "frequentist"), ("minimax_manski", "manski"), ("minimax_pearl", "pearl")):
        out[crit] = argmin(lambda r, m=m: regret(r, m))
    return out, best, regret


def random_instance(rng, max_p=12, constant_in_j=False):
    P = int(rng.integers(1, max_p + 1))
    if constant_in_j:
        base = rng.uniform(-0.3, 0.3, P)
        point = np.repeat(base[:, None], P + 1, axis=1)
        lower = {m: np.repeat((base - rng.uniform(0, 0.4, P))[:, None], P + 1, axis=1) for m in METHODS}
    else:
        point = rng.uniform(-0.3, 0.3, (P, P + 1))
        lower = {m: point - rng.uniform(0, 0.4, (P, P + 1)) for m in METHODS}
    observed = rng.integers(0, 2, P)
    busy = rng.integers(0, 6, 2)
    cap_im = int(busy[0] + rng.integers(max(1, P // 3), P + 2))
    cap_s = int(busy[1] + rng.integers(max(1, P // 3), P + 2))
    rho = [None, 0.0, 0.1, 0.2, 0.3, 0.5][int(rng.integers(0, 6))]
    return P, point, lower, observed, cap_im, cap_s, int(busy[0]), int(busy[1]), rho
