import numpy as np

from ..errors import ArgumentError

PROB_FLOOR = 1e-12


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, max-subtracted so large logits cannot overflow."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    # summing in sorted order makes the result exactly permutation-equivariant
    return e / np.sort(e, axis=-1).sum(axis=-1, keepdims=True)


def nll_loss(probs: np.ndarray, label: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= int(label) < probs.shape[-1]:
        raise ArgumentError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-np.log(max(probs[int(label)], PROB_FLOOR)))


def batch_nll(probs: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None):
    """Weighted mean NLL over rows of ``probs`` and its gradient w.r.t. the logits.

    Rows with label < 0 carry no loss. The gradient is zero for rows whose
    target probability sits below the floor (the floored log is flat there).
    Returns ``(loss, dlogits, weight_total)``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = probs.shape
    if labels.shape != (n,):
        raise ArgumentError(f"labels shape {labels.shape} != ({n},)")
    if np.any(labels >= c):
        raise ArgumentError(f"label out of range for {c} classes")
    valid = labels >= 0
    w = np.zeros(n)
    if weights is None:
        w[valid] = 1.0
    else:
        w[valid] = np.asarray(weights, dtype=np.float64)[labels[valid]]
    total = w.sum()
    dlogits = np.zeros_like(probs)
    if total <= 0:
        return 0.0, dlogits, 0.0
    idx = np.flatnonzero(valid)
    p_target = probs[idx, labels[idx]]
    losses = -np.log(np.maximum(p_target, PROB_FLOOR))
    loss = float(np.dot(w[idx], losses) / total)
    live = p_target >= PROB_FLOOR
    rows = idx[live]
    dlogits[rows] = probs[rows]
    dlogits[rows, labels[rows]] -= 1.0
    dlogits[rows] *= (w[rows] / total)[:, None]
    return loss, dlogits, float(total)
