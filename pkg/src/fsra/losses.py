"""Training objective: per-branch ID loss, cross-view triplet, mutual KL.

The triplet loss only compares elements from opposite views (same-view
pairs are masked out entirely) and uses batch-hard mining: per anchor,
the farthest cross-view positive against the nearest cross-view
negative, hinged at the margin. Mutual KL is the symmetric sum of KL
divergences between the two views' class distributions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from fsra import autodiff as ad
from fsra.autodiff import Tensor
from fsra.head import FeatureBundle


class ViewTag(str, enum.Enum):
    DRONE = "drone"
    SATELLITE = "satellite"
    STREET = "street"


@dataclass
class LossConfig:
    margin: float = 0.3
    use_triplet: bool = True
    use_kl: bool = False
    branch_weights: list[float] | None = None   # None means 1.0 each
    kl_all_branches: bool = False
    kl_literal: bool = False                    # log-space-weighted variant, comparison only
    triplet_on_logits: bool = False             # default mines on pre-classifier features

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be >= 0")

    def branch_weight(self, i: int) -> float:
        if self.branch_weights is None:
            return 1.0
        return self.branch_weights[i]


def id_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross entropy, no label smoothing."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    onehot = np.zeros((b, k), dtype=logits.dtype)
    onehot[np.arange(b), labels] = 1.0
    picked = ad.sum(ad.mul(ad.log_softmax(logits, axis=1), Tensor(onehot)), axis=1)
    return ad.neg(ad.mean(picked))


def pairwise_euclidean(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs L2 distances, [B1,D] x [B2,D] -> [B1,B2].

    Custom gradient with a guarded denominator so zero-distance pairs
    stay finite in backward (their contribution is zero wherever the
    mask already excludes them).
    """
    a = ad.astensor(a)
    b = ad.astensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"pairwise_euclidean expects [B1,D] and [B2,D], got {a.shape}, {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))

    def bw(g):
        scale = g / np.maximum(dist, 1e-12)
        ga = (scale[:, :, None] * diff).sum(axis=1)
        gb = -(scale[:, :, None] * diff).sum(axis=0)
        return ga, gb

    return ad.apply_op(dist, (a, b), bw)


@dataclass
class TripletStats:
    anchors_used: int = 0
    anchors_without_pair: int = 0


def cross_view_triplet(features: Tensor, labels, views, margin: float,
                       stats: TripletStats | None = None) -> Tensor:
    """Batch-hard margin triplet over cross-view pairs only.

    Anchors lacking a cross-view positive or negative contribute zero
    and are counted in ``stats``.
    """
    labels = np.asarray(labels)
    views = np.asarray([v.value if isinstance(v, ViewTag) else v for v in views])
    b = features.shape[0]
    if labels.shape[0] != b or views.shape[0] != b:
        raise ValueError("labels/views do not match the feature batch")
    dist = pairwise_euclidean(features, features)

    same_label = labels[:, None] == labels[None, :]
    cross_view = views[:, None] != views[None, :]
    pos_mask = same_label & cross_view
    neg_mask = (~same_label) & cross_view

    anchor_rows, hard_pos, hard_neg = [], [], []
    skipped = 0
    d = dist.data
    for i in range(b):
        pos_idx = np.flatnonzero(pos_mask[i])
        neg_idx = np.flatnonzero(neg_mask[i])
        if pos_idx.size == 0 or neg_idx.size == 0:
            skipped += 1
            continue
        anchor_rows.append(i)
        hard_pos.append(pos_idx[np.argmax(d[i, pos_idx])])
        hard_neg.append(neg_idx[np.argmin(d[i, neg_idx])])
    if stats is not None:
        stats.anchors_used += len(anchor_rows)
        stats.anchors_without_pair += skipped
    if not anchor_rows:
        return Tensor(np.zeros((), dtype=features.dtype))

    dp = ad.gather_pairs(dist, anchor_rows, hard_pos)
    dn = ad.gather_pairs(dist, anchor_rows, hard_neg)
    hinge = ad.relu(ad.add(ad.sub(dp, dn), margin))
    return ad.mean(hinge)


def kl_mutual(o_d: Tensor, o_s: Tensor, literal: bool = False) -> Tensor:
    """Symmetric KL between the two views' class distributions.

    Standard form: KL(softmax(o_d) || softmax(o_s)) + the reverse, each
    summed over classes and averaged over the batch. The ``literal``
    variant weights by log-probabilities instead of probabilities; it is
    kept only for comparison and is not part of the default objective.
    """
    if o_d.shape != o_s.shape:
        raise ValueError(f"paired logits must share a shape, got {o_d.shape} vs {o_s.shape}")
    return ad.add(_kl_div(o_d, o_s, literal), _kl_div(o_s, o_d, literal))


def _kl_div(o1: Tensor, o2: Tensor, literal: bool) -> Tensor:
    lp1 = ad.log_softmax(o1, axis=1)
    lp2 = ad.log_softmax(o2, axis=1)
    weight = lp1 if literal else ad.softmax(o1, axis=1)
    per_row = ad.sum(ad.mul(weight, ad.sub(lp1, lp2)), axis=1)
    return ad.mean(per_row)


@dataclass
class LossBreakdown:
    id: float = 0.0
    triplet: float = 0.0
    kl: float = 0.0
    total: float = 0.0
    triplet_stats: TripletStats = field(default_factory=TripletStats)


def total_loss(bundle_d: FeatureBundle, bundle_s: FeatureBundle, labels_d, labels_s,
               config: LossConfig) -> tuple[Tensor, LossBreakdown]:
    """Combine the per-branch objectives over one two-view batch."""
    if bundle_d.num_branches != bundle_s.num_branches:
        raise ValueError("view bundles disagree on branch count")
    labels_d = np.asarray(labels_d, dtype=np.int64)
    labels_s = np.asarray(labels_s, dtype=np.int64)
    both_labels = np.concatenate([labels_d, labels_s])
    views = np.array([ViewTag.DRONE.value] * len(labels_d)
                     + [ViewTag.SATELLITE.value] * len(labels_s))
    breakdown = LossBreakdown()

    terms = []
    for i in range(bundle_d.num_branches):
        w = config.branch_weight(i)
        branch_logits = ad.concat([bundle_d.logits[i], bundle_s.logits[i]], axis=0)
        id_term = ad.mul(id_loss(branch_logits, both_labels), w)
        breakdown.id += id_term.item()
        terms.append(id_term)
        if config.use_triplet:
            if config.triplet_on_logits:
                feats = branch_logits
            else:
                feats = ad.concat([bundle_d.branch_feats[i], bundle_s.branch_feats[i]], axis=0)
            tri = ad.mul(cross_view_triplet(feats, both_labels, views, config.margin,
                                            stats=breakdown.triplet_stats), w)
            breakdown.triplet += tri.item()
            terms.append(tri)
    if config.use_kl:
        if not np.array_equal(labels_d, labels_s):
            raise ValueError("mutual KL expects class-aligned view batches")
        branches = range(bundle_d.num_branches) if config.kl_all_branches else (0,)
        for i in branches:
            kl = kl_mutual(bundle_d.logits[i], bundle_s.logits[i], literal=config.kl_literal)
            breakdown.kl += kl.item()
            terms.append(kl)

    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    breakdown.total = total.item()
    return total, breakdown
