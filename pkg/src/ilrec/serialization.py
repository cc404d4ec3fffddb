"""Line-delimited JSON artifacts with a versioned header, plus tab-separated log ingestion.

Every file starts with ``{"format": "ilrec/<kind>", "version": N, ...}``.
States are not stored; they are rebuilt from item histories by the
(deterministic) state tracker when a file is read back.
"""

from __future__ import annotations

import csv
import json
import zlib
from pathlib import Path

import numpy as np

from .env import Catalog, StateVector, Trajectory, Transition, UserProfile
from .errors import DataError

VERSION = 1


def _header(kind, **extra):
    return {"format": f"ilrec/{kind}", "version": VERSION, **extra}


def _write(path, kind, records, **extra):
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(json.dumps(_header(kind, **extra), sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return path


def _read(path, kind):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing artifact {path}")
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise DataError(f"{path} is empty")
    try:
        header = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON line ({exc})") from exc
    if header.get("format") != f"ilrec/{kind}":
        raise DataError(f"{path}: expected format ilrec/{kind}, found {header.get('format')}")
    if header.get("version") != VERSION:
        raise DataError(f"{path}: unsupported version {header.get('version')}")
    return header, records


# -- catalog and users -----------------------------------------------------------------

def write_catalog(path, catalog, users):
    recs = [{"kind": "item", "id": i, "embedding": catalog.embeddings[i].tolist(),
             "category": int(catalog.categories[i])} for i in range(len(catalog))]
    recs += [{"kind": "user", "id": int(u.id), "preference": np.asarray(u.preference).tolist(),
              "side_features": np.asarray(u.side_features).tolist()} for u in users]
    return _write(path, "catalog", recs, n_categories=int(catalog.n_categories),
                  pref_map=np.asarray(catalog.pref_map).tolist(), pref_noise=float(catalog.pref_noise))


def read_catalog(path):
    header, recs = _read(path, "catalog")
    items = sorted((r for r in recs if r["kind"] == "item"), key=lambda r: r["id"])
    if [r["id"] for r in items] != list(range(len(items))):
        raise DataError(f"{path}: item ids must be dense 0..n-1")
    emb = np.array([r["embedding"] for r in items], dtype=np.float64)
    cats = np.array([r["category"] for r in items], dtype=np.int64)
    catalog = Catalog(emb, cats, header["n_categories"], np.array(header["pref_map"], dtype=np.float64),
                      header["pref_noise"])
    users = [UserProfile(r["id"], np.array(r["preference"], dtype=np.float64),
                         np.array(r["side_features"], dtype=np.float64)) for r in recs if r["kind"] == "user"]
    return catalog, users


# -- trajectories -------------------------------------------------------------------------

def rebuild_trajectory(user, items, rewards, tracker, terminated_by=None):
    """Transitions of one session, with states re-encoded from the item history."""
    items = np.asarray(items, dtype=np.int64)
    n = len(items)
    if n == 0:
        raise DataError("empty trajectory")
    if np.any(items < 0) or np.any(items >= len(tracker.categories)):
        raise DataError(f"unknown item id in trajectory of user {user.id}")
    trace = np.tile(items, (n + 1, 1))
    side = np.tile(np.asarray(user.side_features, dtype=np.float64), (n + 1, 1))
    enc = tracker.encode_batch(trace, np.arange(n + 1), side)
    cats = tracker.categories[items]

    def state(t, terminal=False):
        hist = tuple(int(i) for i in items[:t])
        return StateVector(enc[t], hist[-tracker.k:], t, int(user.id), np.asarray(user.side_features), hist,
                           tuple(int(c) for c in cats[:t]), terminal)

    states = [state(t, terminal=(t == n)) for t in range(n + 1)]
    trs = [Transition(states[t], int(items[t]), float(rewards[t]), states[t + 1], t == n - 1) for t in range(n)]
    return Trajectory(user, trs, terminated_by)


def _traj_record(episode, tr):
    return {"episode": episode, "user_id": int(tr.user.id), "items": [t.action for t in tr.transitions],
            "rewards": [t.reward for t in tr.transitions], "terminated_by": tr.terminated_by}


def write_trajectories(path, kind, trajectories, **extra):
    return _write(path, kind, [_traj_record(k, tr) for k, tr in enumerate(trajectories)], **extra)


def read_trajectories(path, kind, users, tracker):
    header, recs = _read(path, kind)
    by_id = {u.id: u for u in users}
    out = []
    for r in recs:
        if r["user_id"] not in by_id:
            raise DataError(f"{path}: unknown user {r['user_id']}")
        out.append(rebuild_trajectory(by_id[r["user_id"]], r["items"], r["rewards"], tracker, r["terminated_by"]))
    return header, out


def log_trajectories(log, users):
    """Group a flat transition log back into trajectories (users looked up by id)."""
    by_id = {u.id: u for u in users}
    out, cur = [], []
    for t in log:
        cur.append(t)
        if t.done:
            out.append(Trajectory(by_id[t.state.user_id], cur))
            cur = []
    if cur:
        out.append(Trajectory(by_id[cur[0].state.user_id], cur))
    return out


def write_log(path, log, users):
    return write_trajectories(path, "log", log_trajectories(log, users))


def read_log(path, users, tracker):
    _, trajs = read_trajectories(path, "log", users, tracker)
    return [t for tr in trajs for t in tr.transitions]


def write_demos(path, demo):
    return write_trajectories(path, "demos", demo.trajectories,
                              expert_advantages=np.asarray(demo.expert_advantages).tolist())


def read_demos(path, users, tracker):
    from .expert import DemoSet, demo_embeddings

    header, trajs = read_trajectories(path, "demos", users, tracker)
    if not trajs:
        raise DataError(f"{path}: no demonstrations")
    return DemoSet(trajs, demo_embeddings(trajs, tracker), np.asarray(header.get("expert_advantages", [])))


# -- tables -------------------------------------------------------------------------------

def write_records(path, kind, rows, **extra):
    return _write(path, kind, rows, **extra)


def read_records(path, kind):
    return _read(path, kind)


def write_weights(path, weighted):
    return _write(path, "weights", weighted.table(), beta=weighted.config.beta, alpha=weighted.config.alpha,
                  gamma_irl=weighted.config.gamma_irl, clip_range=list(weighted.config.clip_range))


def write_metrics_log(path, rows):
    return _write(path, "metrics", rows)


def read_metrics_log(path):
    return _read(path, "metrics")[1]


# -- ingestion ----------------------------------------------------------------------------

INGEST_COLUMNS = ("user_id", "item_id", "rating", "timestamp", "category", "title")


def _title_vector(title, dim):
    """Hashed bag-of-words embedding of an item title."""
    v = np.zeros(dim)
    for tok in str(title).lower().split():
        h = zlib.crc32(tok.encode())
        v[h % dim] += 1.0 if (h >> 16) & 1 else -1.0
    return v


def ingest_interactions(path, d_item=8, length_cap=100, d_side=1):
    """Read a tab-separated interaction file into (catalog, users, log).

    Columns: user_id, item_id, rating, timestamp, category, title (header row
    required). Item embeddings mix a category direction with hashed title
    words; users get a constant side feature; sessions follow timestamp order
    and are cut every ``length_cap`` interactions. Ratings are clipped to [1, 5].
    """
    from .env import TrackerParams

    path = Path(path)
    if not path.exists():
        raise DataError(f"missing interaction file {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        missing = [c for c in INGEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no interactions")
    item_keys = sorted({r["item_id"] for r in rows})
    cat_keys = sorted({r["category"] for r in rows})
    item_idx = {k: i for i, k in enumerate(item_keys)}
    cat_idx = {k: i for i, k in enumerate(cat_keys)}
    item_cat = {}
    item_title = {}
    for line, r in enumerate(rows, start=2):
        c = cat_idx[r["category"]]
        if item_cat.setdefault(r["item_id"], c) != c:
            raise DataError(f"{path}:{line}: item {r['item_id']} listed under two categories")
        item_title.setdefault(r["item_id"], r["title"])
    rng = np.random.default_rng(0)
    centroids = rng.normal(size=(len(cat_keys), d_item))
    emb = np.stack([centroids[item_cat[k]] + 0.5 * _title_vector(item_title[k], d_item) for k in item_keys])
    emb /= np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    cats = np.array([item_cat[k] for k in item_keys], dtype=np.int64)
    catalog = Catalog(emb, cats, len(cat_keys), np.zeros((d_item, d_side)), 0.0)

    by_user = {}
    for line, r in enumerate(rows, start=2):
        try:
            rating = float(r["rating"])
            ts = float(r["timestamp"])
        except ValueError as exc:
            raise DataError(f"{path}:{line}: non-numeric rating or timestamp") from exc
        if not (np.isfinite(rating) and np.isfinite(ts)):
            raise DataError(f"{path}:{line}: non-finite rating or timestamp")
        by_user.setdefault(r["user_id"], []).append((ts, item_idx[r["item_id"]], min(max(rating, 1.0), 5.0)))
    users = []
    log = []
    tracker = TrackerParams(catalog.embeddings, catalog.categories, catalog.n_categories, d_side,
                            horizon=length_cap)
    for uid, (key, events) in enumerate(sorted(by_user.items())):
        user = UserProfile(uid, np.zeros(d_item), np.ones(d_side))
        users.append(user)
        events.sort()
        for start in range(0, len(events), length_cap):
            chunk = events[start:start + length_cap]
            tr = rebuild_trajectory(user, [e[1] for e in chunk], [e[2] for e in chunk], tracker)
            log.extend(tr.transitions)
    return catalog, users, log
