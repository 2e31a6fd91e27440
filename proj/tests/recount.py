#!/usr/bin/env python3
"""Recount cycle metrics from a persisted state directory.

Reads only the per-cycle row files, never cycles.jsonl, and prints one JSON
object: {"cycles": [...], "stats": {query_id: {...}}}.
"""
import argparse
import json
import pathlib


def rows(path):
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def bad_rate(path):
    r = rows(path)
    return sum(1 for x in r if x["predicted"] != x["reference"]) / len(r)


def mining(crawled):
    key = lambda x: (x["query_id"], x["product_id"])
    reference = {key(x) for x in crawled if x["online"] != x["oracle"]}
    if not reference:
        return {"precision": None, "recall": 0.0}
    emitted = {key(x) for x in crawled if x["route"] == "model_error_case"}
    tp = len(emitted & reference)
    return {"precision": tp / len(emitted) if emitted else None, "recall": tp / len(reference)}


def consistency(logs, min_support):
    latest = {}
    for x in logs:
        latest[(x["query_id"], x["product_id"])] = x
    per_query = {}
    for (q, _), x in latest.items():
        n, a = per_query.get(q, (0, 0))
        per_query[q] = (n + 1, a + (x["coarse_bin"] == x["fine_bin"]))
    return {q: {"support": n, "agreement": a, "c": a / n} for q, (n, a) in per_query.items() if n >= min_support}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("state")
    args = ap.parse_args()
    root = pathlib.Path(args.state)
    state = json.loads((root / "state.json").read_text())
    config = json.loads((root / "config.json").read_text())
    cycles = []
    for t in range(1, state["cycle"] + 1):
        tag = f"cycle-{t:03d}"
        crawled = rows(root / "crawled" / f"{tag}.jsonl")
        flagged = [x for x in crawled if x["route"]]
        discovered = sum(1 for x in crawled if x["route"] == "model_error_case")
        res = rows(root / "resolution" / f"{tag}.jsonl")
        resolved = sum(1 for x in res if x["predicted"] == x["reference"])
        cycles.append({
            "cycle_id": t,
            "bad_case_rate_before": bad_rate(root / "heldout" / f"{tag}-before.jsonl"),
            "bad_case_rate_after": bad_rate(root / "heldout" / f"{tag}.jsonl"),
            "crawled": len(crawled),
            "flagged": len(flagged),
            "discovered": discovered,
            "discovery_rate": discovered / len(crawled) if crawled else 0.0,
            "resolved": resolved,
            "resolution_rate": resolved / len(res) if res else None,
            "mining": mining(crawled),
        })
    stats = {}
    if state["cycle"] > 0:
        logs = rows(root / "logs" / f"cycle-{state['cycle']:03d}.jsonl")
        stats = consistency(logs, config["serving"]["min_support"])
    print(json.dumps({"cycles": cycles, "stats": stats}))


if __name__ == "__main__":
    main()
