"""Numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable, or when
``CDCL_PURE_PYTHON=1`` is set. Signatures match ``_ckernels`` exactly.
"""
import numpy as np


def contrastive_rows(sim, anchor_labels, cand_labels, mask, tau):
    """Per-anchor supervised contrastive loss and its gradient w.r.t. ``sim``.

    Row i of ``sim`` holds the similarities of anchor i to every candidate.
    Only candidates with ``mask[i, j]`` enter the softmax denominator;
    positives are masked candidates whose label equals the anchor's. Rows
    without any positive contribute zero loss and zero gradient.

    Returns ``(losses[A], dsim[A, C])`` where ``dsim`` is the gradient of
    ``losses.sum()``.
    """
    sim = np.asarray(sim, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    A, C = sim.shape
    losses = np.zeros(A)
    grad = np.zeros((A, C))
    if A == 0 or C == 0:
        return losses, grad
    pos = mask & (np.asarray(anchor_labels)[:, None] == np.asarray(cand_labels)[None, :])
    npos = pos.sum(axis=1)
    rows = npos > 0
    if not rows.any():
        return losses, grad
    logits = np.where(mask[rows], sim[rows] / tau, -np.inf)
    m = logits.max(axis=1)
    e = np.exp(logits - m[:, None])
    s = e.sum(axis=1)
    lse = m + np.log(s)
    p = e / s[:, None]
    posr = pos[rows]
    k = npos[rows].astype(np.float64)
    mean_pos = np.where(posr, logits, 0.0).sum(axis=1) / k
    losses[rows] = lse - mean_pos
    grad[rows] = (p - posr / k[:, None]) / tau
    return losses, grad


def _assign(Z, centers):
    sims = Z @ centers.T
    labels = np.argmax(sims, axis=1)
    conf = sims[np.arange(Z.shape[0]), labels]
    return labels.astype(np.int64), conf


def _update(Z, labels, centers):
    new = centers.copy()
    M = centers.shape[0]
    sums = np.zeros_like(centers)
    np.add.at(sums, labels, Z)
    counts = np.bincount(labels, minlength=M)
    for m in range(M):
        if counts[m] == 0:
            continue
        n = np.sqrt(sums[m] @ sums[m])
        if n > 1e-12:
            new[m] = sums[m] / n
    return new


def spherical_kmeans(Z, init_centers, max_iters, tol):
    """Cosine k-means with fixed number of clusters.

    Returns ``(labels, confidences, centers, trace, iterations)``.
    """
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    centers = np.array(init_centers, dtype=np.float64, copy=True)
    labels, conf = _assign(Z, centers)
    obj = float(conf.sum())
    trace = [obj]
    it = 0
    while it < max_iters:
        centers = _update(Z, labels, centers)
        new_labels, conf = _assign(Z, centers)
        new_obj = float(conf.sum())
        it += 1
        done = bool(np.array_equal(new_labels, labels)) or (new_obj - obj) < tol
        labels, obj = new_labels, new_obj
        trace.append(obj)
        if done:
            break
    return labels, conf, centers, np.array(trace), it
