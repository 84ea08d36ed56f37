"""Shared builders and oracles for the test suite."""

import numpy as np

from fsra.backbone import BackboneConfig
from fsra.head import FsraModel
from fsra.trainer import init_params


def tiny_model(num_regions=2, num_classes=4, seed=0, dtype=np.float32, dropout=0.0):
    """Smallest usable model: 8x8 images, 4 patches, 8-dim embeddings."""
    cfg = BackboneConfig(image_size=8, patch_size=4, embed_dim=8, depth=1, heads=2,
                         mlp_ratio=2.0, dropout=dropout)
    model = FsraModel(cfg, num_regions, num_classes, head_hidden=16, head_dropout=dropout,
                      dtype=dtype)
    init_params(model, seed)
    return model


def brute_force_metrics(qd, qc, gd, gc, ks):
    """Definition-level recall/AP oracle on plain python loops."""
    recalls = {k: [] for k in ks}
    aps = []
    for qi in range(len(qd)):
        dists = [float(np.linalg.norm(np.asarray(qd[qi]) - np.asarray(gd[j])))
                 for j in range(len(gd))]
        order = sorted(range(len(gd)), key=lambda j: (dists[j], j))
        hits = [r + 1 for r, j in enumerate(order) if gc[j] == qc[qi]]
        if not hits:
            continue
        for k in ks:
            recalls[k].append(1.0 if hits[0] <= k else 0.0)
        precisions = [(i + 1) / rank for i, rank in enumerate(hits)]
        aps.append(sum(precisions) / len(precisions))
    return {k: float(np.mean(v)) for k, v in recalls.items()}, float(np.mean(aps))
