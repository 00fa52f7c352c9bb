"""Independent oracles shared by the test suite.

The finite-difference checker never reuses the autodiff reverse pass:
it re-evaluates the forward function at perturbed inputs only.
"""

from __future__ import annotations

import numpy as np


def finite_diff_grad(fn, arrays, eps: float = 1e-5):
    """Central finite differences of scalar fn() wrt each array, in place."""
    grads = [np.zeros_like(a) for a in arrays]
    for arr, grad in zip(arrays, grads):
        flat = arr.reshape(-1)
        flat_grad = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn()
            flat[i] = orig - eps
            down = fn()
            flat[i] = orig
            flat_grad[i] = (up - down) / (2.0 * eps)
    return grads


def max_rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Worst elementwise |a - n| / max(|a|, |n|, floor) over all arrays.

    The floor keeps central-difference roundoff on near-zero gradients
    from dominating: below it the check is effectively absolute
    (|a - n| < tol * floor), which is far tighter than any real defect.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def brute_force_contaminated(doc_text: str, test_texts: list[str], n: int) -> bool:
    """Materialize every n-gram on both sides and intersect."""
    def grams(text: str) -> set[tuple[str, ...]]:
        toks = text.split()
        return {tuple(toks[i : i + n]) for i in range(len(toks) - n + 1)}

    doc_grams = grams(doc_text)
    test_grams = set()
    for t in test_texts:
        test_grams |= grams(t)
    return bool(doc_grams & test_grams)
