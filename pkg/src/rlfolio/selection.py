"""Top/bottom asset selection shared by the policy head and the experts."""

from __future__ import annotations

import numpy as np


def select_sets(scores: np.ndarray, m: int, want_short: bool) -> tuple[np.ndarray, np.ndarray]:
    """Long set = top-m scores, short set = bottom-m of the remainder.

    Ties break toward the lowest asset index; drawing the short set from the
    complement of the long set keeps the supports disjoint even under ties.
    Both returned index arrays are sorted ascending.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    order = np.lexsort((np.arange(n), -scores))  # score desc, index asc on ties
    long_set = np.sort(order[:m])
    if not want_short:
        return long_set, np.empty(0, dtype=np.int64)
    rest = order[m:]
    short_set = np.sort(rest[np.lexsort((rest, scores[rest]))[:m]])
    return long_set, short_set
