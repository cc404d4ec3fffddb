"""Hot numeric kernels.

Every kernel has two implementations: a loop version compiled with numba
``@njit`` and a vectorised numpy version. Setting ``ILREC_DISABLE_NUMBA=1``
(or running without numba installed) selects the numpy path. Both paths are
importable directly as ``nb_<name>`` / ``np_<name>`` for benchmarking and
cross-checking.
"""

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

_DISABLED = os.environ.get("ILREC_DISABLE_NUMBA", "0").strip().lower() in ("1", "true", "yes", "on")
USE_NUMBA = _HAVE_NUMBA and not _DISABLED

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------

def np_window_counts(cat_trace, lengths, window, n_categories):
    """Per-row category counts over the last ``window`` entries of each trace."""
    n_rows, width = cat_trace.shape
    out = np.zeros((n_rows, n_categories), dtype=np.float64)
    if width == 0:
        return out
    pos = np.arange(width)[None, :]
    lo = np.maximum(lengths - window, 0)[:, None]
    mask = (pos >= lo) & (pos < lengths[:, None])
    rows = np.broadcast_to(np.arange(n_rows)[:, None], cat_trace.shape)
    np.add.at(out, (rows[mask], cat_trace[mask]), 1.0)
    return out


def np_diversity_hits(cat_trace, lengths, window, max_same):
    n_cat = int(cat_trace.max()) + 1 if cat_trace.size else 1
    counts = np_window_counts(cat_trace, lengths, window, n_cat)
    return (counts >= max_same).any(axis=1)


def np_discounted_returns(rewards, gamma):
    out = np.empty(rewards.shape[0], dtype=np.float64)
    acc = 0.0
    for t in range(rewards.shape[0] - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def np_ewma_encode(hist, hist_len, emb, decay):
    n_rows, k = hist.shape
    out = np.zeros((n_rows, emb.shape[1]), dtype=np.float64)
    norm = np.zeros(n_rows, dtype=np.float64)
    w = 1.0
    for j in range(k):
        live = hist_len > j
        idx = hist[:, k - 1 - j]
        out[live] += w * emb[idx[live]]
        norm[live] += w
        w *= decay
    has = norm > 0
    out[has] /= norm[has, None]
    return out


def np_cosine_argmax(queries, emb):
    qn = np.sqrt((queries * queries).sum(axis=1))
    en = np.sqrt((emb * emb).sum(axis=1))
    sims = (queries @ emb.T) / (qn[:, None] * en[None, :])
    return np.argmax(sims, axis=1).astype(np.int64)


def np_hash_uniform(seed, a, b):
    with np.errstate(over="ignore"):
        x = np.uint64(seed) * _GOLDEN
        x = x ^ (a.astype(np.uint64) * _M1)
        x = x ^ (b.astype(np.uint64) * _M2)
        x = x ^ (x >> np.uint64(30))
        x = x * _M1
        x = x ^ (x >> np.uint64(27))
        x = x * _M2
        x = x ^ (x >> np.uint64(31))
    return (x >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


# --------------------------------------------------------------------------
# numba implementations (same arithmetic order as the numpy versions)
# --------------------------------------------------------------------------

def _loop_window_counts(cat_trace, lengths, window, n_categories):
    n_rows = cat_trace.shape[0]
    out = np.zeros((n_rows, n_categories), dtype=np.float64)
    for r in range(n_rows):
        lo = lengths[r] - window
        if lo < 0:
            lo = 0
        for t in range(lo, lengths[r]):
            out[r, cat_trace[r, t]] += 1.0
    return out


def _loop_diversity_hits(cat_trace, lengths, window, max_same):
    n_rows = cat_trace.shape[0]
    n_cat = 1
    for r in range(n_rows):
        for t in range(cat_trace.shape[1]):
            if cat_trace[r, t] + 1 > n_cat:
                n_cat = cat_trace[r, t] + 1
    hits = np.zeros(n_rows, dtype=np.bool_)
    counts = np.zeros(n_cat, dtype=np.int64)
    for r in range(n_rows):
        counts[:] = 0
        lo = lengths[r] - window
        if lo < 0:
            lo = 0
        for t in range(lo, lengths[r]):
            c = cat_trace[r, t]
            counts[c] += 1
            if counts[c] >= max_same:
                hits[r] = True
                break
    return hits


def _loop_discounted_returns(rewards, gamma):
    n = rewards.shape[0]
    out = np.empty(n, dtype=np.float64)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def _loop_ewma_encode(hist, hist_len, emb, decay):
    n_rows, k = hist.shape
    d = emb.shape[1]
    out = np.zeros((n_rows, d), dtype=np.float64)
    for r in range(n_rows):
        w = 1.0
        norm = 0.0
        for j in range(k):
            if hist_len[r] > j:
                idx = hist[r, k - 1 - j]
                for c in range(d):
                    out[r, c] += w * emb[idx, c]
                norm += w
            w *= decay
        if norm > 0:
            for c in range(d):
                out[r, c] /= norm
    return out


def _loop_cosine_argmax(queries, emb):
    n_q, d = queries.shape
    n_items = emb.shape[0]
    en = np.empty(n_items, dtype=np.float64)
    for i in range(n_items):
        s = 0.0
        for c in range(d):
            s += emb[i, c] * emb[i, c]
        en[i] = np.sqrt(s)
    out = np.empty(n_q, dtype=np.int64)
    for q in range(n_q):
        s = 0.0
        for c in range(d):
            s += queries[q, c] * queries[q, c]
        qn = np.sqrt(s)
        best = -np.inf
        arg = 0
        for i in range(n_items):
            dot = 0.0
            for c in range(d):
                dot += queries[q, c] * emb[i, c]
            sim = dot / (qn * en[i])
            if sim > best:
                best = sim
                arg = i
        out[q] = arg
    return out


def _loop_hash_uniform(seed, a, b):
    n = a.shape[0]
    out = np.empty(n, dtype=np.float64)
    s = np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15)
    for i in range(n):
        x = s ^ (np.uint64(a[i]) * np.uint64(0xBF58476D1CE4E5B9))
        x = x ^ (np.uint64(b[i]) * np.uint64(0x94D049BB133111EB))
        x = x ^ (x >> np.uint64(30))
        x = x * np.uint64(0xBF58476D1CE4E5B9)
        x = x ^ (x >> np.uint64(27))
        x = x * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
        out[i] = np.float64(x >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    return out


if _HAVE_NUMBA:
    nb_window_counts = njit(cache=True)(_loop_window_counts)
    nb_diversity_hits = njit(cache=True)(_loop_diversity_hits)
    nb_discounted_returns = njit(cache=True)(_loop_discounted_returns)
    nb_ewma_encode = njit(cache=True)(_loop_ewma_encode)
    nb_cosine_argmax = njit(cache=True)(_loop_cosine_argmax)
    nb_hash_uniform = njit(cache=True)(_loop_hash_uniform)
else:  # pragma: no cover
    nb_window_counts = _loop_window_counts
    nb_diversity_hits = _loop_diversity_hits
    nb_discounted_returns = _loop_discounted_returns
    nb_ewma_encode = _loop_ewma_encode
    nb_cosine_argmax = _loop_cosine_argmax
    nb_hash_uniform = _loop_hash_uniform


# --------------------------------------------------------------------------
# public dispatch (argument coercion happens here, once)
# --------------------------------------------------------------------------

def window_counts(cat_trace, lengths, window, n_categories):
    cat_trace = np.ascontiguousarray(cat_trace, dtype=np.int64)
    lengths = np.ascontiguousarray(lengths, dtype=np.int64)
    fn = nb_window_counts if USE_NUMBA else np_window_counts
    return fn(cat_trace, lengths, int(window), int(n_categories))


def diversity_hits(cat_trace, lengths, window, max_same):
    """True for rows whose last ``window`` entries hold ``max_same`` of one category."""
    cat_trace = np.ascontiguousarray(cat_trace, dtype=np.int64)
    lengths = np.ascontiguousarray(lengths, dtype=np.int64)
    fn = nb_diversity_hits if USE_NUMBA else np_diversity_hits
    return fn(cat_trace, lengths, int(window), int(max_same))


def discounted_returns(rewards, gamma):
    rewards = np.ascontiguousarray(rewards, dtype=np.float64)
    fn = nb_discounted_returns if USE_NUMBA else np_discounted_returns
    return fn(rewards, float(gamma))


def ewma_encode(hist, hist_len, emb, decay):
    hist = np.ascontiguousarray(hist, dtype=np.int64)
    hist_len = np.ascontiguousarray(hist_len, dtype=np.int64)
    emb = np.ascontiguousarray(emb, dtype=np.float64)
    fn = nb_ewma_encode if USE_NUMBA else np_ewma_encode
    return fn(hist, hist_len, emb, float(decay))


def cosine_argmax(queries, emb):
    queries = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
    emb = np.ascontiguousarray(emb, dtype=np.float64)
    fn = nb_cosine_argmax if USE_NUMBA else np_cosine_argmax
    return fn(queries, emb)


def hash_uniform(seed, a, b):
    """Counter-based uniform draws in [0, 1) keyed by (seed, a, b)."""
    a = np.ascontiguousarray(np.atleast_1d(a), dtype=np.int64)
    b = np.ascontiguousarray(np.atleast_1d(b), dtype=np.int64)
    fn = nb_hash_uniform if USE_NUMBA else np_hash_uniform
    return fn(int(seed) & 0x7FFFFFFFFFFFFFFF, a, b)
