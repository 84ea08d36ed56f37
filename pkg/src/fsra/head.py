"""Heat-sorted region segmentation and per-branch supervision heads.

Patch heat is the mean of a patch's feature vector. Patches are sorted
by descending heat and split into n contiguous groups of floor(N/n)
(the last group takes the remainder), each group average-pooled into a
region vector. Every branch (global + regions) gets its own classifier.
The sort itself is a constant of the forward pass: gradients flow
through the pooled feature values, never through the ordering.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fsra import autodiff as ad
from fsra.autodiff import Tensor
from fsra.backbone import BackboneConfig, VitBackbone, grid_from_patch_vector

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def region_sizes(num_patches: int, n: int) -> np.ndarray:
    """Group sizes: n-1 groups of floor(N/n), remainder in the last."""
    if not 1 <= n <= num_patches:
        raise ValueError(f"region count {n} outside [1, {num_patches}]")
    base = num_patches // n
    sizes = np.full(n, base, dtype=np.int64)
    sizes[-1] = num_patches - (n - 1) * base
    return sizes


@dataclass
class RegionPartition:
    """Assignment of patches to heat-ordered regions; ids are 1-based."""

    n: int
    assignment: np.ndarray  # [B, N] int, values in 1..n
    sizes: np.ndarray       # [n]


def patch_heat(patch_feats: Tensor) -> Tensor:
    """Per-patch heat: mean over the feature dimension, [B,N,D] -> [B,N]."""
    return ad.mean(patch_feats, axis=-1)


def partition(heat, n: int) -> RegionPartition:
    """Split patches into n regions by descending heat.

    Stable sort; ties go to the lower original patch index.
    """
    values = heat.data if isinstance(heat, Tensor) else np.asarray(heat)
    if values.ndim == 1:
        values = values[None, :]
    b, num_patches = values.shape
    sizes = region_sizes(num_patches, n)
    # argsort of negated heat: descending, ties stable by original index
    order = np.argsort(-values, axis=1, kind="stable")
    bounds = np.cumsum(sizes)
    region_of_rank = np.empty(num_patches, dtype=np.int64)
    start = 0
    for rid, end in enumerate(bounds, start=1):
        region_of_rank[start:end] = rid
        start = end
    assignment = np.empty((b, num_patches), dtype=np.int64)
    rows = np.arange(b)[:, None]
    assignment[rows, order] = region_of_rank[None, :]
    return RegionPartition(n=n, assignment=assignment, sizes=sizes)


def region_pool(patch_feats: Tensor, part: RegionPartition) -> Tensor:
    """Average per-region features, [B,N,D] -> [B,n,D].

    The pooling matrix is built from the (constant) assignment, so the
    gradient reaches the patch features only.
    """
    b, num_patches, _ = patch_feats.shape
    if part.assignment.shape != (b, num_patches):
        raise ValueError("partition does not match the feature batch")
    pool = np.zeros((b, part.n, num_patches), dtype=patch_feats.dtype)
    for rid in range(1, part.n + 1):
        mask = part.assignment == rid
        pool[:, rid - 1, :] = mask / part.sizes[rid - 1]
    return ad.matmul(Tensor(pool), patch_feats)


class ClassifierLayer:
    """linear -> relu -> batchnorm1d -> dropout -> linear, per branch."""

    def __init__(self, prefix: str, in_dim: int, hidden: int, num_classes: int,
                 dropout: float, dtype=np.float32):
        self.prefix = prefix
        self.dropout = dropout
        self.dtype = dtype
        self.params = {
            name: ad.parameter(value, name=name, dtype=dtype)
            for name, value in (
                (f"{prefix}.fc1.weight", np.zeros((in_dim, hidden))),
                (f"{prefix}.fc1.bias", np.zeros(hidden)),
                (f"{prefix}.bn.gain", np.ones(hidden)),
                (f"{prefix}.bn.bias", np.zeros(hidden)),
                (f"{prefix}.fc2.weight", np.zeros((hidden, num_classes))),
                (f"{prefix}.fc2.bias", np.zeros(num_classes)),
            )
        }
        # running statistics are buffers, not parameters
        self.running_mean = np.zeros(hidden, dtype=dtype)
        self.running_var = np.ones(hidden, dtype=dtype)

    def init(self, rng: np.random.Generator) -> None:
        from fsra.trainer import kaiming_normal_

        p = self.params
        p[f"{self.prefix}.fc1.weight"].data = kaiming_normal_(
            rng, p[f"{self.prefix}.fc1.weight"].shape).astype(self.dtype)
        p[f"{self.prefix}.fc2.weight"].data = kaiming_normal_(
            rng, p[f"{self.prefix}.fc2.weight"].shape).astype(self.dtype)
        p[f"{self.prefix}.fc1.bias"].data[:] = 0
        p[f"{self.prefix}.fc2.bias"].data[:] = 0
        p[f"{self.prefix}.bn.gain"].data[:] = 1
        p[f"{self.prefix}.bn.bias"].data[:] = 0
        self.running_mean[:] = 0
        self.running_var[:] = 1

    def __call__(self, x: Tensor, training: bool, rng: np.random.Generator | None) -> Tensor:
        p = self.params
        h = ad.relu(ad.add(ad.matmul(x, p[f"{self.prefix}.fc1.weight"]),
                           p[f"{self.prefix}.fc1.bias"]))
        h = self._batch_norm(h, training)
        if training:
            h = ad.dropout(h, self.dropout, rng, training=True)
        return ad.add(ad.matmul(h, p[f"{self.prefix}.fc2.weight"]), p[f"{self.prefix}.fc2.bias"])

    def _batch_norm(self, h: Tensor, training: bool) -> Tensor:
        p = self.params
        if training:
            mu = ad.mean(h, axis=0, keepdims=True)
            var = ad.variance(h, axis=0, keepdims=True)
            self.running_mean = ((1 - BN_MOMENTUM) * self.running_mean
                                 + BN_MOMENTUM * mu.data.reshape(-1)).astype(self.dtype)
            self.running_var = ((1 - BN_MOMENTUM) * self.running_var
                                + BN_MOMENTUM * var.data.reshape(-1)).astype(self.dtype)
        else:
            mu = Tensor(self.running_mean)
            var = Tensor(self.running_var)
        xhat = ad.div(ad.sub(h, mu), ad.sqrt(ad.add(var, BN_EPS)))
        return ad.add(ad.mul(xhat, p[f"{self.prefix}.bn.gain"]), p[f"{self.prefix}.bn.bias"])


@dataclass
class FeatureBundle:
    """One forward pass worth of features and per-branch class scores.

    ``branch_feats[0]`` is the global feature, then one entry per
    region; ``logits`` is aligned with it.
    """

    global_f: Tensor
    region_v: Tensor | None            # [B, n, D] or None when n == 0
    branch_feats: list[Tensor]         # n+1 tensors of [B, D]
    logits: list[Tensor]               # n+1 tensors of [B, num_classes]
    heat: Tensor                       # [B, N]
    part: RegionPartition | None

    @property
    def num_branches(self) -> int:
        return len(self.logits)


class FsraHead:
    """Global branch plus n heat-ordered region branches.

    Each branch variance-normalizes its pooled feature with a
    batch-norm (no affine) before the classifier; the metric losses and
    the retrieval descriptors consume the normalized feature. This keeps
    the branch features on a fixed scale, which the batch-hard triplet
    needs (on raw features it can contract the embedding to a point).
    """

    def __init__(self, num_regions: int, embed_dim: int, num_classes: int,
                 hidden: int = 64, dropout: float = 0.1, dtype=np.float32):
        if num_regions < 0:
            raise ValueError("region count must be >= 0")
        self.n = num_regions
        self.embed_dim = embed_dim
        self.num_classes = num_classes
        self.dtype = dtype
        self.classifiers = [
            ClassifierLayer(f"head.branch{i}", embed_dim, hidden, num_classes, dropout, dtype)
            for i in range(num_regions + 1)
        ]
        # feature-normalizer running statistics per branch; batch stats are
        # used in training, these at evaluation and descriptor extraction
        self.feat_mean = [np.zeros(embed_dim, dtype=dtype) for _ in range(num_regions + 1)]
        self.feat_var = [np.ones(embed_dim, dtype=dtype) for _ in range(num_regions + 1)]

    @property
    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for c in self.classifiers:
            out.update(c.params)
        return out

    def init(self, rng: np.random.Generator) -> None:
        for c in self.classifiers:
            c.init(rng)
        for i in range(len(self.classifiers)):
            self.feat_mean[i][:] = 0
            self.feat_var[i][:] = 1

    def forward(self, global_f: Tensor, patch_feats: Tensor, training: bool = False,
                rng: np.random.Generator | None = None) -> FeatureBundle:
        heat = patch_heat(patch_feats)
        region_v = None
        part = None
        pooled = [global_f]
        if self.n > 0:
            part = partition(heat, self.n)
            region_v = region_pool(patch_feats, part)
            for i in range(self.n):
                pooled.append(region_v[:, i, :])
        branch_feats = [self._normalize_feat(i, feat, training)
                        for i, feat in enumerate(pooled)]
        logits = [clf(feat, training, rng)
                  for clf, feat in zip(self.classifiers, branch_feats)]
        return FeatureBundle(global_f=global_f, region_v=region_v,
                             branch_feats=branch_feats, logits=logits,
                             heat=heat, part=part)

    def _normalize_feat(self, i: int, feat: Tensor, training: bool) -> Tensor:
        if training:
            mu = ad.mean(feat, axis=0, keepdims=True)
            var = ad.variance(feat, axis=0, keepdims=True)
            self.feat_mean[i] = ((1 - BN_MOMENTUM) * self.feat_mean[i]
                                 + BN_MOMENTUM * mu.data.reshape(-1)).astype(self.dtype)
            self.feat_var[i] = ((1 - BN_MOMENTUM) * self.feat_var[i]
                                + BN_MOMENTUM * var.data.reshape(-1)).astype(self.dtype)
        else:
            mu = Tensor(self.feat_mean[i][None, :])
            var = Tensor(self.feat_var[i][None, :])
        return ad.div(ad.sub(feat, mu), ad.sqrt(ad.add(var, BN_EPS)))

    def descriptors(self, bundle: FeatureBundle) -> np.ndarray:
        """Concatenated per-branch normalized features."""
        return np.concatenate([feat.data for feat in bundle.branch_feats], axis=1)

    def branch_descriptors(self, bundle: FeatureBundle) -> list[np.ndarray]:
        """Per-branch normalized features, for distance-averaging retrieval."""
        return [feat.data for feat in bundle.branch_feats]


class FsraModel:
    """Backbone plus region head; the unit that trains and evaluates."""

    def __init__(self, backbone_cfg: BackboneConfig, num_regions: int, num_classes: int,
                 head_hidden: int = 64, head_dropout: float = 0.1, dtype=np.float32):
        self.backbone = VitBackbone(backbone_cfg, dtype=dtype)
        self.head = FsraHead(num_regions, backbone_cfg.embed_dim, num_classes,
                             hidden=head_hidden, dropout=head_dropout, dtype=dtype)
        self.num_regions = num_regions
        self.num_classes = num_classes
        self.rng = np.random.default_rng(0)

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.config

    @property
    def params(self) -> dict[str, Tensor]:
        out = dict(self.backbone.params)
        out.update(self.head.params)
        return out

    def init(self, rng: np.random.Generator) -> None:
        self.backbone.init(rng)
        self.head.init(rng)

    def seed_dropout(self, seed: int) -> None:
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD0]))

    def forward(self, images: Tensor, training: bool = False) -> FeatureBundle:
        rng = self.rng if training else None
        f, patch_feats = self.backbone.features(images, training=training, rng=rng)
        return self.head.forward(f, patch_feats, training=training, rng=rng)

    # buffers that ride along in checkpoints next to the parameters
    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, c in enumerate(self.head.classifiers):
            out[f"head.branch{i}.bn.running_mean"] = c.running_mean
            out[f"head.branch{i}.bn.running_var"] = c.running_var
            out[f"head.branch{i}.feat.running_mean"] = self.head.feat_mean[i]
            out[f"head.branch{i}.feat.running_var"] = self.head.feat_var[i]
        return out

    def load_buffers(self, arrays: dict[str, np.ndarray]) -> None:
        for i, c in enumerate(self.head.classifiers):
            c.running_mean = arrays[f"head.branch{i}.bn.running_mean"].astype(c.dtype)
            c.running_var = arrays[f"head.branch{i}.bn.running_var"].astype(c.dtype)
            self.head.feat_mean[i] = arrays[f"head.branch{i}.feat.running_mean"].astype(c.dtype)
            self.head.feat_var[i] = arrays[f"head.branch{i}.feat.running_var"].astype(c.dtype)


def export_heat_and_regions(image: Tensor, model: FsraModel, num_regions: int,
                            out_dir, stem: str, write_pgm: bool = False) -> dict[str, Path]:
    """Dump the heat grid and region-id grid for one image.

    Grids are the per-patch vectors folded back to the (H/P, W/P) layout
    by inverting the patch flattening. CSV always; P2 graymaps optional.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if image.ndim == 3:
        image = Tensor(image.data[None])
    with ad.no_grad():
        f, patch_feats = model.backbone.features(image)
        heat = patch_heat(patch_feats)
        part = partition(heat, num_regions)
    grid = model.config.grid
    heat_grid = grid_from_patch_vector(heat.data[0], grid)
    region_grid = grid_from_patch_vector(part.assignment[0], grid)

    paths = {
        "heat_csv": out_dir / f"{stem}.heat.csv",
        "region_csv": out_dir / f"{stem}.region.csv",
    }
    _write_csv(paths["heat_csv"], heat_grid, fmt=lambda v: f"{v:.8g}")
    _write_csv(paths["region_csv"], region_grid, fmt=lambda v: str(int(v)))
    if write_pgm:
        paths["heat_pgm"] = out_dir / f"{stem}.heat.pgm"
        paths["region_pgm"] = out_dir / f"{stem}.region.pgm"
        _write_pgm(paths["heat_pgm"], _to_gray(heat_grid))
        _write_pgm(paths["region_pgm"], _to_gray(region_grid.astype(np.float64)))
    return paths


def _write_csv(path: Path, grid: np.ndarray, fmt) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in grid:
            writer.writerow([fmt(v) for v in row])


def _to_gray(grid: np.ndarray) -> np.ndarray:
    lo, hi = grid.min(), grid.max()
    if hi == lo:
        return np.zeros_like(grid, dtype=np.int64)
    return np.round((grid - lo) / (hi - lo) * 255).astype(np.int64)


def _write_pgm(path: Path, gray: np.ndarray) -> None:
    lines = [f"P2", f"{gray.shape[1]} {gray.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in gray]
    path.write_text("\n".join(lines) + "\n")
