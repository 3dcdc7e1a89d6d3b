"""JSON Lines readers and writers for embeddings, scores, pools, training
tuples, selections and loss history.

Every writer emits canonical JSON (sorted keys, ``repr`` floats) so equal
inputs give byte-identical files.
"""

import csv
import hashlib
import json

import numpy as np

from .errors import BadFormat, DimensionMismatch, InputError
from .objective import TrainingExample
from .pipeline import CandidatePool


def dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def read_jsonl(path):
    """Parsed objects of a JSON Lines file; blank lines are skipped."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise BadFormat(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise BadFormat(f"{path}:{lineno}: expected a JSON object")
            rows.append(obj)
    return rows


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(dumps(row) + "\n")


def _require(obj, keys, where):
    missing = [k for k in keys if k not in obj]
    if missing:
        raise BadFormat(f"{where}: missing keys {missing}")


def _vector(value, where):
    try:
        v = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise BadFormat(f"{where}: vector is not numeric") from exc
    if v.ndim != 1 or v.size == 0:
        raise BadFormat(f"{where}: vector must be a nonempty list of numbers")
    if not np.all(np.isfinite(v)):
        raise BadFormat(f"{where}: vector has non-finite entries")
    return v


# --------------------------------------------------------------------------
# embeddings and scores


def load_embeddings(path):
    """``{id: vector}`` in file order; all vectors share one dimension."""
    table, d = {}, None
    for n, obj in enumerate(read_jsonl(path), 1):
        where = f"{path}:item {n}"
        _require(obj, ("id", "vector"), where)
        v = _vector(obj["vector"], where)
        if d is None:
            d = v.size
        elif v.size != d:
            raise DimensionMismatch(f"{where}: dimension {v.size}, expected {d}")
        key = str(obj["id"])
        if key in table:
            raise InputError(f"{where}: duplicate id {key!r}")
        table[key] = v
    if not table:
        raise InputError(f"{path}: no embeddings")
    return table


def write_embeddings(path, table):
    write_jsonl(path, ({"id": k, "vector": v.tolist()} for k, v in table.items()))


def load_scores(path):
    table = {}
    for n, obj in enumerate(read_jsonl(path), 1):
        _require(obj, ("id", "score"), f"{path}:item {n}")
        try:
            table[str(obj["id"])] = float(obj["score"])
        except (TypeError, ValueError) as exc:
            raise BadFormat(f"{path}:item {n}: score is not a number") from exc
    return table


# --------------------------------------------------------------------------
# pools


def pool_from_dict(obj, where="pool"):
    _require(obj, ("query_id", "candidates", "gold_ids"), where)
    cands = obj["candidates"]
    if not isinstance(cands, list) or not cands:
        raise BadFormat(f"{where}: candidates must be a nonempty list")
    ids, vecs, scores = [], [], []
    for c in cands:
        _require(c, ("id", "vector"), where)
        ids.append(str(c["id"]))
        vecs.append(_vector(c["vector"], f"{where}:{c['id']}"))
        scores.append(c.get("score"))
    if len({v.size for v in vecs}) != 1:
        raise DimensionMismatch(f"{where}: candidate vectors differ in dimension")
    pos = {cid: i for i, cid in enumerate(ids)}
    unknown = [g for g in obj["gold_ids"] if str(g) not in pos]
    if unknown:
        raise InputError(f"{where}: gold ids not among candidates: {unknown}")
    has_scores = [s is not None for s in scores]
    if any(has_scores) and not all(has_scores):
        raise BadFormat(f"{where}: scores must be given for all candidates or none")
    return CandidatePool(
        str(obj["query_id"]),
        ids,
        np.vstack(vecs),
        [pos[str(g)] for g in obj["gold_ids"]],
        np.asarray(scores, dtype=np.float64) if all(has_scores) else None,
        obj.get("hop_count"),
    )


def pool_to_dict(pool):
    cands = []
    for i, cid in enumerate(pool.ids):
        c = {"id": cid, "vector": pool.embeddings[i].tolist()}
        if pool.scores is not None:
            c["score"] = float(pool.scores[i])
        cands.append(c)
    out = {"query_id": pool.query_id, "candidates": cands, "gold_ids": pool.gold_ids}
    if pool.hop_count is not None:
        out["hop_count"] = int(pool.hop_count)
    return out


def load_pools(path):
    pools = [pool_from_dict(obj, f"{path}:query {n}") for n, obj in enumerate(read_jsonl(path), 1)]
    if not pools:
        raise InputError(f"{path}: no pools")
    return pools


def write_pools(path, pools):
    write_jsonl(path, (pool_to_dict(p) for p in pools))


# --------------------------------------------------------------------------
# training tuples


def tuple_from_pool(pool):
    gold = set(pool.gold)
    out = {
        "query_id": pool.query_id,
        "pool_ids": list(pool.ids),
        "positive_ids": pool.gold_ids,
        "negative_ids": [cid for i, cid in enumerate(pool.ids) if i not in gold],
    }
    if pool.hop_count is not None:
        out["hop_count"] = int(pool.hop_count)
    return out


def example_from_tuple(obj, embeddings, where="tuple"):
    """Resolve a tuple row against ``embeddings``.

    ``hop_count`` is optional and defaults to the number of positives.
    """
    _require(obj, ("query_id", "pool_ids", "positive_ids", "negative_ids"), where)
    pool_ids = [str(i) for i in obj["pool_ids"]]
    missing = [i for i in pool_ids if i not in embeddings]
    if missing:
        raise InputError(f"{where}: ids without embeddings: {missing[:5]}")
    pos = {cid: n for n, cid in enumerate(pool_ids)}
    if len(pos) != len(pool_ids):
        raise InputError(f"{where}: pool_ids are not unique")
    stray = [i for i in list(obj["positive_ids"]) + list(obj["negative_ids"]) if str(i) not in pos]
    if stray:
        raise InputError(f"{where}: ids outside pool_ids: {stray[:5]}")
    hop = obj.get("hop_count", len(obj["positive_ids"]))
    return TrainingExample(
        str(obj["query_id"]),
        np.vstack([embeddings[i] for i in pool_ids]),
        [pos[str(i)] for i in obj["positive_ids"]],
        [pos[str(i)] for i in obj["negative_ids"]],
        hop,
    )


def load_examples(path, embeddings):
    rows = read_jsonl(path)
    if not rows:
        raise InputError(f"{path}: no training tuples")
    return [example_from_tuple(obj, embeddings, f"{path}:tuple {n}") for n, obj in enumerate(rows, 1)]


# --------------------------------------------------------------------------
# history


HISTORY_FIELDS = ("epoch", "mean_loss", "skipped_examples")


def write_history(path, history):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for st in history:
            w.writerow([st.epoch, repr(float(st.mean_loss)), st.skipped_examples])


def read_history(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["epoch"]), float(r["mean_loss"]), int(r["skipped_examples"])) for r in rows]
