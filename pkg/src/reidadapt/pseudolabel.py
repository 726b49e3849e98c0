"""Pseudo-labels for the unlabeled target: per-camera k-means, then greedy
cross-camera cluster matching so every pseudo identity spans all cameras."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .synthgen import ImageSample, ground_truth, stack_pixels


class ClusterError(ValueError):
    pass


@dataclass
class ClusterConfig:
    k_per_camera: int | float = 0.25   # int: absolute k; float: fraction of camera population
    max_kmeans_iters: int = 100
    seed: int = 0

    def k_for(self, population: int) -> int:
        if isinstance(self.k_per_camera, float):
            k = int(round(population * self.k_per_camera))
        else:
            k = int(self.k_per_camera)
        if k < 1:
            raise ClusterError(f"k resolves to {k} for a camera with {population} samples")
        if k > population:
            raise ClusterError(f"k={k} exceeds the {population} samples of a camera")
        return k


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    distortion: list = field(default_factory=list)
    iterations: int = 0

    @property
    def k(self) -> int:
        return len(self.centroids)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - c[None, :, :]
    return (diff * diff).sum(-1)


def _init_centroids(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Distance-weighted seeding over distinct points."""
    uniq = np.unique(x, axis=0)
    if len(uniq) < k:
        raise ClusterError(f"k={k} exceeds the {len(uniq)} distinct points")
    chosen = [int(rng.integers(len(uniq)))]
    d2 = ((uniq - uniq[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            rest = np.setdiff1d(np.arange(len(uniq)), chosen)
            nxt = int(rest[rng.integers(len(rest))])
        else:
            nxt = int(rng.choice(len(uniq), p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((uniq - uniq[nxt]) ** 2).sum(1))
    return uniq[chosen].copy()


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, max_iters: int = 100) -> KMeansResult:
    """Lloyd iterations until the assignment stops changing.

    ``distortion[t]`` is the summed squared distance right after the t-th
    assignment step.  Empty clusters take over the point farthest from its
    centroid.
    """
    x = np.asarray(x, dtype=float)
    if k > len(x):
        raise ClusterError(f"k={k} exceeds population {len(x)}")
    c = _init_centroids(x, k, rng)
    labels = None
    res = KMeansResult(c, np.zeros(len(x), dtype=np.int64))
    for it in range(max_iters):
        d2 = _sq_dists(x, c)
        new = d2.argmin(axis=1)
        cost = d2[np.arange(len(x)), new]
        counts = np.bincount(new, minlength=k)
        for j in np.flatnonzero(counts == 0):
            donors = np.flatnonzero(counts[new] > 1)
            far = donors[np.argmax(cost[donors])]
            counts[new[far]] -= 1
            new[far] = j
            counts[j] = 1
            c[j] = x[far]
            cost[far] = 0.0
        res.distortion.append(float(cost.sum()))
        res.iterations = it + 1
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        c = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
    res.centroids = c
    res.labels = labels
    return res


def per_camera_kmeans(features: np.ndarray, camera_ids, config: ClusterConfig) -> dict[int, dict]:
    """k-means inside every camera view.

    Returns ``{camera: {"indices", "k", "centroids", "labels", "distortion"}}``
    where ``indices`` are rows of ``features`` belonging to the camera.
    """
    camera_ids = np.asarray(camera_ids)
    out = {}
    for cam in sorted(np.unique(camera_ids).tolist()):
        idx = np.flatnonzero(camera_ids == cam)
        k = config.k_for(len(idx))
        rng = np.random.default_rng([config.seed, cam])
        res = kmeans(features[idx], k, rng, config.max_kmeans_iters)
        out[cam] = {"indices": idx, "k": k, "centroids": res.centroids,
                    "labels": res.labels, "distortion": res.distortion}
    return out


@dataclass
class PseudoLabelMap:
    assignments: dict                 # row index -> pseudo identity
    per_camera_clusters: dict         # camera -> (k, centroids)
    merge_table: dict                 # pseudo identity -> {camera: cluster id}
    cluster_of: dict = field(default_factory=dict)   # row index -> (camera, cluster id)

    @property
    def num_identities(self) -> int:
        return len(self.merge_table)

    def labels_for(self, n: int) -> np.ndarray:
        missing = [i for i in range(n) if i not in self.assignments]
        if missing:
            raise ClusterError(f"pseudo-label map does not cover rows {missing[:10]}")
        return np.array([self.assignments[i] for i in range(n)], dtype=np.int64)

    def check_invariants(self) -> None:
        cams = sorted(self.per_camera_clusters)
        used: set = set()
        for pid, table in self.merge_table.items():
            if sorted(table) != cams:
                raise ClusterError(f"pseudo identity {pid} does not span cameras {cams}")
            for cam, cl in table.items():
                if (cam, cl) in used:
                    raise ClusterError(f"cluster {cl} of camera {cam} used twice")
                used.add((cam, cl))
        members: dict = {}
        for row, pid in self.assignments.items():
            members.setdefault(pid, set()).add(self.cluster_of[row][0])
        for pid in self.merge_table:
            if members.get(pid, set()) != set(cams):
                raise ClusterError(f"pseudo identity {pid} lacks images from some camera")


def greedy_match(reference: np.ndarray, others: dict[int, np.ndarray]) -> dict[int, dict[int, int]]:
    """Match each reference centroid, in index order, to its nearest unused
    centroid of every other camera.  Ties go to the lowest cluster index."""
    table = {r: {} for r in range(len(reference))}
    for cam, cents in others.items():
        d = np.sqrt(_sq_dists(reference, cents))
        free = np.ones(len(cents), dtype=bool)
        for r in range(len(reference)):
            j = int(np.argmin(np.where(free, d[r], np.inf)))
            free[j] = False
            table[r][cam] = j
    return table


def cross_view_merge(clusters: dict[int, dict]) -> PseudoLabelMap:
    cams = sorted(clusters)
    ks = {clusters[c]["k"] for c in cams}
    if len(ks) != 1:
        raise ClusterError(f"cross-view merge needs equal k per camera, got {sorted(ks)}")
    ref = cams[0]
    table = greedy_match(clusters[ref]["centroids"],
                         {c: clusters[c]["centroids"] for c in cams[1:]})
    for r in table:
        table[r][ref] = r
    owner = {(cam, cl): pid for pid, t in table.items() for cam, cl in t.items()}
    assignments, cluster_of = {}, {}
    for cam in cams:
        for row, cl in zip(clusters[cam]["indices"], clusters[cam]["labels"]):
            assignments[int(row)] = owner[(cam, int(cl))]
            cluster_of[int(row)] = (cam, int(cl))
    pmap = PseudoLabelMap(assignments,
                          {c: (clusters[c]["k"], clusters[c]["centroids"]) for c in cams},
                          table, cluster_of)
    pmap.check_invariants()
    return pmap


def extract_features(model, samples: Sequence[ImageSample]) -> np.ndarray:
    return model.embed(stack_pixels(samples))[0]


def pair_metrics(pseudo: np.ndarray, truth: np.ndarray) -> dict:
    """Pairwise precision/recall of a clustering against true identities."""
    pseudo, truth = np.asarray(pseudo), np.asarray(truth)
    iu = np.triu_indices(len(pseudo), 1)
    same_p = (pseudo[:, None] == pseudo[None, :])[iu]
    same_t = (truth[:, None] == truth[None, :])[iu]
    both = np.count_nonzero(same_p & same_t)
    prec = both / max(np.count_nonzero(same_p), 1)
    rec = both / max(np.count_nonzero(same_t), 1)
    return {"pair_precision": float(prec), "pair_recall": float(rec)}


def build_pseudo_dataset(samples: Sequence[ImageSample], pmap: PseudoLabelMap,
                         report_noise: bool = True):
    """Target images relabelled with pseudo identities, plus label-noise metrics.

    Noise metrics read hidden labels through the audited accessor.
    """
    labels = pmap.labels_for(len(samples))
    out = [ImageSample(pixels=s.pixels, camera_id=s.camera_id, domain=s.domain,
                       sample_id=s.sample_id, _person_id=int(y), hidden=False)
           for s, y in zip(samples, labels)]
    metrics = pair_metrics(labels, ground_truth(samples)) if report_noise else {}
    metrics["num_pseudo_ids"] = pmap.num_identities
    return out, metrics


def write_pseudo_labels(path: str | os.PathLike, samples: Sequence[ImageSample],
                        pmap: PseudoLabelMap) -> None:
    lines = ["# sample_id camera_id cluster_id pseudo_id"]
    for row, s in enumerate(samples):
        cam, cl = pmap.cluster_of[row]
        lines.append(f"{s.sample_id} {cam} {cl} {pmap.assignments[row]}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_pseudo_labels(path: str | os.PathLike) -> dict[int, int]:
    out = {}
    for line in open(path).read().splitlines():
        if not line or line.startswith("#"):
            continue
        sid, _cam, _cl, pid = line.split()
        out[int(sid)] = int(pid)
    return out
