"""Pure-numpy fallback for the compiled nearest-neighbor kernels.

Same contract as ``_kernels``: exact squared distances computed as summed
coordinate differences (no (a-b)^2 expansion tricks, so results agree with
the compiled path bit for bit), ties broken by lower reference index.
"""

import numpy as np

COMPILED = False


def _pairwise_d2(query, ref):
    # (n, m) squared distances; summation order x,y,z matches the C loop
    diff = query[:, None, :] - ref[None, :, :]
    return np.einsum("nmd,nmd->nm", diff, diff)


def nn1(query, ref):
    d2 = _pairwise_d2(query, ref)
    idx = np.argmin(d2, axis=1)  # argmin returns the first (lowest) index
    return idx.astype(np.int64), d2[np.arange(len(query)), idx]


def knn(query, ref, k):
    if k > ref.shape[0]:
        raise ValueError(f"k={k} exceeds reference size {ref.shape[0]}")
    d2 = _pairwise_d2(query, ref)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    rows = np.arange(len(query))[:, None]
    return order.astype(np.int64), d2[rows, order]


def chamfer_sums(a, b):
    d2 = _pairwise_d2(a, b)
    return float(np.sum(np.min(d2, axis=1))), float(np.sum(np.min(d2, axis=0)))
