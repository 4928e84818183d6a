"""Cross-camera retrieval metrics, clustering scores against ground truth,
and intra/inter-camera positive-pair distance statistics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import jsonschema
import numpy as np
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score

EVAL_REPORT_SCHEMA = {
    "type": "object",
    "required": ["mAP", "cmc", "n_queries_used", "n_queries_total"],
    "properties": {
        "mAP": {"type": "number", "minimum": 0, "maximum": 1},
        "cmc": {
            "type": "object",
            "patternProperties": {"^[0-9]+$": {"type": "number", "minimum": 0, "maximum": 1}},
            "additionalProperties": False,
        },
        "n_queries_used": {"type": "integer", "minimum": 0},
        "n_queries_total": {"type": "integer", "minimum": 0},
        "config_hash": {"type": "string"},
    },
}

GAP_REPORT_SCHEMA = {
    "type": "object",
    "required": ["intra_mean", "inter_mean", "gap", "bin_edges", "intra_counts", "inter_counts"],
    "properties": {
        "intra_mean": {"type": ["number", "null"]},
        "inter_mean": {"type": ["number", "null"]},
        "gap": {"type": ["number", "null"]},
        "gap_defined": {"type": "boolean"},
        "n_intra": {"type": "integer"},
        "n_inter": {"type": "integer"},
        "bin_edges": {"type": "array", "items": {"type": "number"}},
        "intra_counts": {"type": "array", "items": {"type": "integer"}},
        "inter_counts": {"type": "array", "items": {"type": "integer"}},
        "config_hash": {"type": "string"},
    },
}


@dataclass
class EvalReport:
    mAP: float
    cmc: dict[int, float]
    n_queries_used: int
    n_queries_total: int

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "cmc": {str(k): v for k, v in sorted(self.cmc.items())},
            "n_queries_used": self.n_queries_used,
            "n_queries_total": self.n_queries_total,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        jsonschema.validate(d, EVAL_REPORT_SCHEMA)
        return cls(float(d["mAP"]), {int(k): float(v) for k, v in d["cmc"].items()},
                   int(d["n_queries_used"]), int(d["n_queries_total"]))


def _cross_distances(Q: np.ndarray, G: np.ndarray) -> np.ndarray:
    diff = Q[:, None, :] - G[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def cmc_map(q_feats, q_ids, q_cams, g_feats, g_ids, g_cams, ranks=(1, 5)) -> EvalReport:
    """Single-query retrieval under the cross-camera protocol.

    Gallery entries with the query's identity *and* camera are excluded.
    Equal distances are ordered by gallery index.  Queries without any
    remaining positive are skipped.
    """
    q_feats = np.atleast_2d(np.asarray(q_feats, dtype=np.float64))
    g_feats = np.atleast_2d(np.asarray(g_feats, dtype=np.float64))
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    if len(q_ids) == 0 or len(g_ids) == 0:
        raise ValueError("query and gallery must be nonempty")
    dist = _cross_distances(q_feats, g_feats)
    g_index = np.arange(len(g_ids))
    aps, first_hits = [], []
    for qi in range(len(q_ids)):
        keep = ~((g_ids == q_ids[qi]) & (g_cams == q_cams[qi]))
        order = np.lexsort((g_index[keep], dist[qi, keep]))
        hits = (g_ids[keep] == q_ids[qi])[order]
        if not hits.any():
            continue
        positions = np.flatnonzero(hits) + 1
        aps.append(float(np.mean(np.arange(1, len(positions) + 1) / positions)))
        first_hits.append(int(positions[0]))
    used = len(aps)
    first = np.asarray(first_hits)
    return EvalReport(
        mAP=float(np.mean(aps)) if used else 0.0,
        cmc={int(k): float(np.mean(first <= k)) if used else 0.0 for k in ranks},
        n_queries_used=used,
        n_queries_total=len(q_ids),
    )


def clustering_quality(pred_labels, truth) -> tuple[float, float]:
    """(adjusted Rand index, normalized mutual information)."""
    pred = getattr(pred_labels, "labels", pred_labels)
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth differ in length")
    return float(adjusted_rand_score(truth, pred)), float(normalized_mutual_info_score(truth, pred))


@dataclass
class DistanceGapReport:
    intra_mean: float | None
    inter_mean: float | None
    n_intra: int
    n_inter: int
    bin_edges: list[float]
    intra_counts: list[int]
    inter_counts: list[int]
    extra: dict = field(default_factory=dict)

    @property
    def gap_defined(self) -> bool:
        return self.n_intra > 0 and self.n_inter > 0

    @property
    def gap(self) -> float | None:
        return self.inter_mean - self.intra_mean if self.gap_defined else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("extra")
        d.update(gap=self.gap, gap_defined=self.gap_defined, **self.extra)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DistanceGapReport:
        jsonschema.validate(d, GAP_REPORT_SCHEMA)
        return cls(d["intra_mean"], d["inter_mean"], int(d["n_intra"]), int(d["n_inter"]),
                   list(d["bin_edges"]), list(d["intra_counts"]), list(d["inter_counts"]))

    def to_csv(self, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(f"# {header}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "intra_count", "inter_count"])
        for i, (a, b) in enumerate(zip(self.bin_edges[:-1], self.bin_edges[1:])):
            w.writerow([repr(a), repr(b), self.intra_counts[i], self.inter_counts[i]])
        return buf.getvalue()


def positive_pairs(ids, cams) -> tuple[np.ndarray, np.ndarray]:
    """All same-identity pairs ``i < j``: (intra-camera pairs, inter-camera pairs), each k x 2."""
    ids, cams = np.asarray(ids), np.asarray(cams)
    intra, inter = [], []
    for pid in np.unique(ids):
        idx = np.flatnonzero(ids == pid)
        iu, ju = np.triu_indices(len(idx), k=1)
        pairs = np.stack([idx[iu], idx[ju]], axis=1)
        same = cams[idx[iu]] == cams[idx[ju]]
        intra.append(pairs[same])
        inter.append(pairs[~same])
    empty = np.zeros((0, 2), dtype=np.int64)
    return (np.concatenate(intra) if intra else empty, np.concatenate(inter) if inter else empty)


def distance_gap(features, ids, cams, max_pairs: int = 50_000, seed: int = 0,
                 n_bins: int = 40, bin_range: tuple[float, float] | None = None) -> DistanceGapReport:
    F = np.asarray(features, dtype=np.float64)
    rng = np.random.default_rng(seed)
    intra, inter = positive_pairs(ids, cams)

    def sample(pairs):
        if len(pairs) > max_pairs:
            pairs = pairs[np.sort(rng.choice(len(pairs), size=max_pairs, replace=False))]
        diff = F[pairs[:, 0]] - F[pairs[:, 1]]
        return np.sqrt((diff * diff).sum(axis=1))

    d_intra, d_inter = sample(intra), sample(inter)
    if bin_range is None:
        top = max(d_intra.max(initial=0.0), d_inter.max(initial=0.0))
        bin_range = (0.0, top if top > 0 else 1.0)
    edges = np.linspace(bin_range[0], bin_range[1], n_bins + 1)
    c_intra, _ = np.histogram(d_intra, bins=edges)
    c_inter, _ = np.histogram(d_inter, bins=edges)
    return DistanceGapReport(
        intra_mean=float(d_intra.mean()) if d_intra.size else None,
        inter_mean=float(d_inter.mean()) if d_inter.size else None,
        n_intra=int(d_intra.size),
        n_inter=int(d_inter.size),
        bin_edges=[float(e) for e in edges],
        intra_counts=[int(c) for c in c_intra],
        inter_counts=[int(c) for c in c_inter],
    )


def evaluate_features(query_feats, gallery_feats, dataset) -> EvalReport:
    return cmc_map(query_feats, dataset.query.person_ids, dataset.query.camera_ids,
                   gallery_feats, dataset.gallery.person_ids, dataset.gallery.camera_ids)


def split_gap(query_feats, gallery_feats, dataset, **kw) -> DistanceGapReport:
    """Distance statistics over the union of query and gallery."""
    F = np.concatenate([query_feats, gallery_feats])
    ids = np.concatenate([dataset.query.person_ids, dataset.gallery.person_ids])
    cams = np.concatenate([dataset.query.camera_ids, dataset.gallery.camera_ids])
    return distance_gap(F, ids, cams, **kw)


def report_json(report, config_hash: str | None = None) -> str:
    d = report.to_dict()
    if config_hash:
        d["config_hash"] = config_hash
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


__all__ = [
    "EvalReport", "DistanceGapReport", "cmc_map", "clustering_quality", "distance_gap",
    "positive_pairs", "evaluate_features", "split_gap", "report_json",
]
