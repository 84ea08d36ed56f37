"""Descriptor extraction, Euclidean retrieval metrics, pad-robustness sweep.

Retrieval ranks the gallery by ascending Euclidean distance (ties broken
by gallery index). Recall@K is the fraction of queries with a true match
in the top K; AP is the mean of precision at each true-match rank;
R@Top1% uses K = ceil(|gallery|/100).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fsra import autodiff as ad
from fsra.autodiff import Tensor
from fsra.data import black_pad, flip_pad, load_image
from fsra.head import FsraModel

PAD_MODES = {"BP": black_pad, "FP": flip_pad}


@dataclass
class EmbeddingRecord:
    descriptor: np.ndarray
    class_id: str
    view: str
    path: str = ""
    branch_descriptors: list[np.ndarray] | None = None


@dataclass
class RetrievalReport:
    recall_at: dict[int, float]
    ap: float
    recall_top1pct: float
    ranks: np.ndarray               # per query, rank of the first true match (1-based)
    excluded_queries: int = 0

    def as_dict(self) -> dict:
        return {
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "ap": self.ap,
            "recall_top1pct": self.recall_top1pct,
            "excluded_queries": self.excluded_queries,
        }


@dataclass
class ItemSpec:
    """One image to embed: either a path or an in-memory array."""

    class_id: str
    view: str
    path: str = ""
    image: np.ndarray | None = None


def extract(model: FsraModel, items: list[ItemSpec], batch_size: int = 8,
            per_branch: bool = False) -> list[EmbeddingRecord]:
    """Evaluation-mode descriptors; batch composition cannot change them."""
    size = model.config.image_size
    records: list[EmbeddingRecord] = []
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        imgs = []
        for item in chunk:
            arr = item.image if item.image is not None else load_image(item.path, size)
            if arr.shape != (size, size, 3):
                raise ValueError(
                    f"image {item.path or '<array>'} has shape {arr.shape}, "
                    f"model expects ({size}, {size}, 3)")
            imgs.append(arr)
        with ad.no_grad():
            bundle = model.forward(Tensor(np.stack(imgs).astype(np.float32)), training=False)
        desc = model.head.descriptors(bundle)
        branch_desc = model.head.branch_descriptors(bundle) if per_branch else None
        for i, item in enumerate(chunk):
            records.append(EmbeddingRecord(
                descriptor=desc[i].copy(), class_id=item.class_id, view=item.view,
                path=item.path,
                branch_descriptors=None if branch_desc is None
                else [b[i].copy() for b in branch_desc]))
    return records


def _distance_matrix(query: list[EmbeddingRecord], gallery: list[EmbeddingRecord],
                     branch_average: bool = False) -> np.ndarray:
    if branch_average:
        if query[0].branch_descriptors is None:
            raise ValueError("branch-averaged distances need per_branch extraction")
        n_br = len(query[0].branch_descriptors)
        acc = None
        for b in range(n_br):
            q = np.stack([r.branch_descriptors[b] for r in query]).astype(np.float64)
            g = np.stack([r.branch_descriptors[b] for r in gallery]).astype(np.float64)
            d = _euclidean(q, g)
            acc = d if acc is None else acc + d
        return acc / n_br
    q = np.stack([r.descriptor for r in query]).astype(np.float64)
    g = np.stack([r.descriptor for r in gallery]).astype(np.float64)
    return _euclidean(q, g)


def _euclidean(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    d2 = (q * q).sum(1)[:, None] - 2.0 * (q @ g.T) + (g * g).sum(1)[None, :]
    return np.sqrt(np.maximum(d2, 0.0))


def evaluate(query: list[EmbeddingRecord], gallery: list[EmbeddingRecord],
             ks: tuple[int, ...] = (1, 5, 10), branch_average: bool = False) -> RetrievalReport:
    """Rank the gallery per query and score Recall@K, AP, R@Top1%."""
    if not query or not gallery:
        raise ValueError("query and gallery must be nonempty")
    dist = _distance_matrix(query, gallery, branch_average)
    gallery_classes = np.array([r.class_id for r in gallery])
    top1pct_k = max(1, int(np.ceil(len(gallery) / 100)))

    recall_hits = {k: 0 for k in ks}
    top1pct_hits = 0
    ap_values = []
    first_ranks = []
    excluded = 0
    for qi, rec in enumerate(query):
        relevant = gallery_classes == rec.class_id
        if not relevant.any():
            excluded += 1
            continue
        order = np.argsort(dist[qi], kind="stable")  # ties fall back to gallery index
        rel_ranks = np.flatnonzero(relevant[order]) + 1
        first = int(rel_ranks[0])
        first_ranks.append(first)
        for k in ks:
            recall_hits[k] += first <= k
        top1pct_hits += first <= top1pct_k
        precision_at_hits = np.arange(1, rel_ranks.size + 1) / rel_ranks
        ap_values.append(float(precision_at_hits.mean()))

    scored = len(query) - excluded
    if scored == 0:
        raise ValueError("no query class appears in the gallery")
    return RetrievalReport(
        recall_at={k: recall_hits[k] / scored for k in ks},
        ap=float(np.mean(ap_values)),
        recall_top1pct=top1pct_hits / scored,
        ranks=np.array(first_ranks, dtype=np.int64),
        excluded_queries=excluded,
    )


@dataclass
class RobustnessRow:
    width: int
    recall_at_1: float
    ap: float
    delta_ap: float     # ap(width) - ap(0), negative when accuracy drops


def robustness_sweep(model: FsraModel, query_items: list[ItemSpec],
                     gallery: list[EmbeddingRecord], mode: str,
                     widths: list[int], ks: tuple[int, ...] = (1, 5, 10),
                     csv_path: Path | str | None = None) -> list[RobustnessRow]:
    """Re-extract padded queries per width and re-evaluate against a fixed gallery."""
    if mode not in PAD_MODES:
        raise ValueError(f"pad mode must be one of {sorted(PAD_MODES)}")
    pad_fn = PAD_MODES[mode]
    size = model.config.image_size
    base_images = []
    for item in query_items:
        arr = item.image if item.image is not None else load_image(item.path, size)
        base_images.append((item, arr))

    rows: list[RobustnessRow] = []
    ap0 = None
    for width in widths:
        padded = [ItemSpec(class_id=item.class_id, view=item.view, path=item.path,
                           image=pad_fn(arr, width))
                  for item, arr in base_images]
        report = evaluate(extract(model, padded), gallery, ks=ks)
        if ap0 is None and width == 0:
            ap0 = report.ap
        ref = ap0 if ap0 is not None else rows[0].ap if rows else report.ap
        rows.append(RobustnessRow(width=width, recall_at_1=report.recall_at[1],
                                  ap=report.ap, delta_ap=report.ap - ref))
    if ap0 is None and rows:
        # width 0 absent: deltas are relative to the first sweep point
        base = rows[0].ap
        rows = [RobustnessRow(r.width, r.recall_at_1, r.ap, r.ap - base) for r in rows]
    if csv_path is not None:
        write_robustness_csv(csv_path, rows)
    return rows


def write_robustness_csv(path, rows: list[RobustnessRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["width", "R@1", "AP", "delta_AP"])
        for r in rows:
            writer.writerow([r.width, f"{r.recall_at_1:.6f}", f"{r.ap:.6f}",
                             f"{r.delta_ap:.6f}"])
