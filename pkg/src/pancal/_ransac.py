"""Shared RANSAC iteration bound."""

import math


def iterations_needed(confidence: float, inlier_ratio: float, sample_size: int, cap: int) -> int:
    """Standard adaptive bound: ceil(log(1-conf) / log(1 - w^k)), capped."""
    w = min(max(inlier_ratio, 1e-9), 1.0)
    if w >= 1.0:
        return 1
    denom = math.log1p(-(w**sample_size))  # log(1 - w^k) without cancellation
    if denom >= 0.0 or not math.isfinite(denom):
        return cap
    return min(cap, int(math.log(1.0 - confidence) / denom) + 1)
