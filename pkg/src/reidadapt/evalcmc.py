"""Cross-camera CMC evaluation."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .metriclearn import pairwise_dmli, pairwise_euclidean
from .synthgen import ImageSample, ground_truth, stack_pixels


class EvaluationError(ValueError):
    pass


@dataclass
class CmcCurve:
    accuracy_at_rank: np.ndarray
    num_queries: int

    def rank(self, r: int) -> float:
        """Accuracy at 1-based rank ``r`` (saturates past the curve end)."""
        acc = self.accuracy_at_rank
        return float(acc[min(r, len(acc)) - 1])

    def percent(self, ranks=(1, 5, 10)) -> dict[int, float]:
        return {r: 100.0 * self.rank(r) for r in ranks}


def first_hit_ranks(dist: np.ndarray, q_ids, g_ids, q_cams, g_cams) -> np.ndarray:
    """0-based rank of the first correct cross-camera match for each query.

    Gallery entries of the query's own identity seen by the query's own
    camera are removed before ranking; ties keep gallery order.
    """
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    ranks = np.empty(len(q_ids), dtype=np.int64)
    for q in range(len(q_ids)):
        order = np.argsort(dist[q], kind="stable")
        keep = ~((g_ids[order] == q_ids[q]) & (g_cams[order] == q_cams[q]))
        hits = np.flatnonzero(g_ids[order][keep] == q_ids[q])
        if len(hits) == 0:
            raise EvaluationError(f"query {q} (identity {q_ids[q]}) has no cross-camera gallery match")
        ranks[q] = hits[0]
    return ranks


def cmc_from_distances(dist: np.ndarray, q_ids, g_ids, q_cams, g_cams,
                       max_rank: int | None = None) -> CmcCurve:
    ranks = first_hit_ranks(dist, q_ids, g_ids, q_cams, g_cams)
    length = max_rank or dist.shape[1]
    acc = np.array([(ranks <= r).mean() for r in range(length)])
    return CmcCurve(acc, len(ranks))


def distance_matrix(q_feats, g_feats, distance: str = "global") -> np.ndarray:
    """``q_feats``/``g_feats`` are ``(global, stripes)`` pairs."""
    d = pairwise_euclidean(q_feats[0], g_feats[0])
    if distance == "global":
        return d
    if distance == "global+dmli":
        return d + pairwise_dmli(q_feats[1], g_feats[1])
    raise ValueError(f"unknown evaluation distance {distance!r}")


def cmc_evaluate(model, query: Sequence[ImageSample], gallery: Sequence[ImageSample],
                 distance: str = "global") -> CmcCurve:
    qf = model.embed(stack_pixels(query))
    gf = model.embed(stack_pixels(gallery))
    dist = distance_matrix(qf, gf, distance)
    return cmc_from_distances(dist, ground_truth(query), ground_truth(gallery),
                              [s.camera_id for s in query], [s.camera_id for s in gallery])


def result_record(method: str, source: str, target: str, curve: CmcCurve) -> dict:
    p = curve.percent()
    return {"method": method, "source": source, "target": target,
            "rank1": round(p[1], 4), "rank5": round(p[5], 4), "rank10": round(p[10], 4)}


def write_results(path: str | os.PathLike, records: Sequence[dict]) -> None:
    """Line records ``method source target rank1 rank5 rank10`` (percent)."""
    lines = ["# method source target rank1 rank5 rank10"]
    for r in records:
        lines.append(f"{r['method']} {r['source']} {r['target']} "
                     f"{r['rank1']:.2f} {r['rank5']:.2f} {r['rank10']:.2f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_results(path: str | os.PathLike) -> list[dict]:
    out = []
    for line in open(path).read().splitlines():
        if not line or line.startswith("#"):
            continue
        m, s, t, r1, r5, r10 = line.split()
        out.append({"method": m, "source": s, "target": t,
                    "rank1": float(r1), "rank5": float(r5), "rank10": float(r10)})
    return out
