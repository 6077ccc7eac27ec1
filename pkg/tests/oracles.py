"""Independent reference implementations. They deliberately share no code
with the package beyond the plain data types."""

from __future__ import annotations

import itertools

import numpy as np

from privneg.policy import FormFactorSet, Retention

RETENTION_ORDER = [Retention.NONE, Retention.ONE_MONTH, Retention.THREE_MONTH,
                   Retention.ONE_YEAR, Retention.INDEFINITE]
RANK = {r: k for k, r in enumerate(RETENTION_ORDER)}

# default scoring tables, written out again on purpose
PE_TYPE = {"temperature": 1, "image": 4, "video": 8, "audio": 8}
PE_TYPE_DEFAULT = 2
PE_RET = {Retention.NONE: 0.5, Retention.ONE_MONTH: 1, Retention.THREE_MONTH: 2,
          Retention.ONE_YEAR: 4, Retention.INDEFINITE: 8}
PE_SHARED = {False: 1, True: 3}
PE_INFERRED = {False: 1, True: 2}


def rule_pe(f: FormFactorSet) -> float:
    return PE_TYPE.get(f.data_type, PE_TYPE_DEFAULT) * PE_RET[f.retention] * PE_SHARED[f.shared] * PE_INFERRED[f.inferred]


def rule_b(f: FormFactorSet) -> float:
    return PE_TYPE.get(f.data_type, PE_TYPE_DEFAULT) + PE_RET[f.retention] + PE_SHARED[f.shared] + PE_INFERRED[f.inferred]


def meet_oracle(column):
    """Componentwise strictest value of a column of factor sets."""
    ranks = [RANK[f.retention] for f in column]
    return FormFactorSet(
        column[0].data_type,
        RETENTION_ORDER[min(ranks)],
        all(f.shared for f in column),
        all(f.inferred for f in column),
    )


def permits(a: FormFactorSet, b: FormFactorSet) -> bool:
    """True when ``a`` asks for no more than ``b`` on every factor."""
    return (a.data_type == b.data_type and RANK[a.retention] <= RANK[b.retention]
            and (b.shared or not a.shared) and (b.inferred or not a.inferred))


def brute_force(boundary, w_b=1.0, w_pe=1.0):
    """Exhaustive scan of every candidate under ``boundary`` (a list of factor
    sets). Returns (frontier keys as a set, chosen key, candidate count).

    A key is a tuple of (retention, shared, inferred, include) per sensor.
    """
    per_sensor = []
    for b in boundary:
        opts = []
        for r in RETENTION_ORDER[: RANK[b.retention] + 1]:
            for s in [False, True][: 2 if b.shared else 1]:
                for i in [False, True][: 2 if b.inferred else 1]:
                    for x in (False, True):
                        f = FormFactorSet(b.data_type, r, s, i)
                        opts.append((f, x))
        per_sensor.append(opts)

    keys, pe, ben = [], [], []
    for combo in itertools.product(*per_sensor):
        keys.append(tuple((f.retention, f.shared, f.inferred, x) for f, x in combo))
        pe.append(sum(rule_pe(f) for f, x in combo if x))
        ben.append(sum(rule_b(f) for f, x in combo if x))
    pe = np.array(pe, dtype=float)
    ben = np.array(ben, dtype=float)

    # dominance over the distinct score points
    points, inverse = np.unique(np.stack([pe, ben], axis=1), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    p_pe, p_b = points[:, 0][:, None], points[:, 1][:, None]
    dominated = ((points[:, 0][None, :] <= p_pe) & (points[:, 1][None, :] >= p_b)
                 & ((points[:, 0][None, :] < p_pe) | (points[:, 1][None, :] > p_b))).any(axis=1)
    on_front = ~dominated[inverse]
    frontier = {keys[k] for k in np.flatnonzero(on_front)}

    best = None
    for k in np.flatnonzero(on_front):
        rank = (-(w_b * ben[k] - w_pe * pe[k]), pe[k], k)
        if best is None or rank < best:
            best = rank
    return frontier, keys[best[2]], len(keys)


def mean_fill(pixels: np.ndarray, regions) -> np.ndarray:
    """Replace each (x, y, w, h) region by its mean, rounded half up."""
    out = pixels.astype(np.int64).copy()
    for x, y, w, h in regions:
        block = out[y:y + h, x:x + w]
        n = block.size
        total = int(block.sum())
        block[...] = (2 * total + n) // (2 * n)
    return out.astype(np.uint8)
