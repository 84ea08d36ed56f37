"""Patch-token vision transformer backbone.

Images are cut into non-overlapping patches, linearly embedded together
with a learnable class token and learnable position embeddings, then run
through a stack of pre-norm transformer layers. The class-token output
is the global feature; the remaining tokens are the per-patch features
consumed by the region head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fsra import autodiff as ad
from fsra.autodiff import Tensor


@dataclass
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    dropout: float = 0.1

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_len(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


# toy profile used throughout the tests; trains in minutes on a CPU
VIT_MICRO = dict(image_size=64, patch_size=8, embed_dim=64, depth=4, heads=4, mlp_ratio=4.0)
# scaled-up profile, expressible but not exercised by the test suite
VIT_S_LIKE = dict(image_size=256, patch_size=16, embed_dim=384, depth=12, heads=6, mlp_ratio=4.0)


@dataclass
class TokenSequence:
    """Embedded input: class token at position 0, then the patch tokens."""

    tokens: Tensor          # [B, N+1, D]
    positions: Tensor       # [N+1, D], the learnable position table


def patchify(images: Tensor, patch_size: int) -> Tensor:
    """[B,H,W,C] -> [B,N,P*P*C], patches row-major, each flattened channel-last."""
    images = ad.astensor(images)
    b, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = ad.reshape(images, (b, gh, patch_size, gw, patch_size, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b, gh * gw, patch_size * patch_size * c))


def unpatchify(patches: np.ndarray, patch_size: int, height: int, width: int,
               channels: int = 3) -> np.ndarray:
    """Exact inverse of ``patchify`` on plain arrays."""
    b = patches.shape[0]
    gh, gw = height // patch_size, width // patch_size
    x = patches.reshape(b, gh, gw, patch_size, patch_size, channels)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, height, width, channels)


def grid_from_patch_vector(values: np.ndarray, grid: int) -> np.ndarray:
    """Reshape one per-patch vector of length N back to the (H/P, W/P) grid."""
    return np.asarray(values).reshape(grid, grid)


class VitBackbone:
    """Transformer encoder over patch tokens; parameters live in ``params``."""

    def __init__(self, config: BackboneConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        c = config
        self._add("backbone.patch_embed.weight", (c.patch_len, c.embed_dim))
        self._add("backbone.patch_embed.bias", (c.embed_dim,))
        self._add("backbone.cls_token", (1, 1, c.embed_dim))
        self._add("backbone.pos_embed", (c.num_patches + 1, c.embed_dim))
        for i in range(c.depth):
            p = f"backbone.layers.{i}"
            for norm in ("norm1", "norm2"):
                self._add(f"{p}.{norm}.gain", (c.embed_dim,))
                self._add(f"{p}.{norm}.bias", (c.embed_dim,))
            for proj in ("wq", "wk", "wv", "wo"):
                self._add(f"{p}.attn.{proj}.weight", (c.embed_dim, c.embed_dim))
                self._add(f"{p}.attn.{proj}.bias", (c.embed_dim,))
            self._add(f"{p}.mlp.fc1.weight", (c.embed_dim, c.mlp_hidden))
            self._add(f"{p}.mlp.fc1.bias", (c.mlp_hidden,))
            self._add(f"{p}.mlp.fc2.weight", (c.mlp_hidden, c.embed_dim))
            self._add(f"{p}.mlp.fc2.bias", (c.embed_dim,))
        if c.depth > 0:
            # closing norm of the pre-norm stack; without it the residual
            # stream scale is unbounded and long runs can blow up
            self._add("backbone.norm_out.gain", (c.embed_dim,))
            self._add("backbone.norm_out.bias", (c.embed_dim,))

    def _add(self, name: str, shape: tuple[int, ...]) -> None:
        self.params[name] = ad.parameter(np.zeros(shape, dtype=self.dtype), name=name,
                                         dtype=self.dtype)

    def init(self, rng: np.random.Generator) -> None:
        """From-scratch init: width-scaled truncated-normal weights, zero
        biases, unit norms; class token starts at zero, position table is
        plain N(0, 0.02^2).

        Weight std follows Xavier scaling, sqrt(2/(fan_in+fan_out)): a
        fixed 0.02 std (the wide-model convention) leaves residual writes
        so small at 64-dim width that the class-token pathway cannot be
        trained with plain SGD.
        """
        from fsra.trainer import trunc_normal_  # shared init helper

        for name, p in self.params.items():
            if name.endswith(".gain"):
                p.data = np.ones_like(p.data)
            elif name.endswith(".bias") or name.endswith("cls_token"):
                p.data = np.zeros_like(p.data)
            elif name.endswith("pos_embed"):
                p.data = (rng.standard_normal(p.shape) * 0.02).astype(self.dtype)
            else:
                fan_in, fan_out = p.shape[0], p.shape[1]
                std = float(np.sqrt(2.0 / (fan_in + fan_out)))
                p.data = trunc_normal_(rng, p.shape, std=std).astype(self.dtype)

    def embed(self, patches: Tensor) -> TokenSequence:
        """Project patches, prepend the class token, add positions."""
        b = patches.shape[0]
        proj = ad.add(ad.matmul(patches, self.params["backbone.patch_embed.weight"]),
                      self.params["backbone.patch_embed.bias"])
        cls = self.params["backbone.cls_token"]
        cls_b = ad.add(cls, Tensor(np.zeros((b, 1, cls.shape[-1]), dtype=proj.dtype)))
        tokens = ad.concat([cls_b, proj], axis=1)
        tokens = ad.add(tokens, self.params["backbone.pos_embed"])
        return TokenSequence(tokens=tokens, positions=self.params["backbone.pos_embed"])

    def forward(self, seq: TokenSequence, training: bool = False,
                rng: np.random.Generator | None = None,
                collect_attn: list | None = None) -> tuple[Tensor, Tensor]:
        """Run the layer stack; returns (global feature f, patch features)."""
        c = self.config
        if training and c.dropout > 0 and rng is None:
            raise ValueError("training-mode forward with dropout needs an rng")
        x = seq.tokens
        x = ad.dropout(x, c.dropout, rng, training) if training else x
        for i in range(c.depth):
            x = self._layer(x, i, training, rng, collect_attn)
        if c.depth > 0:
            x = ad.layer_norm(x, self.params["backbone.norm_out.gain"],
                              self.params["backbone.norm_out.bias"])
        f = x[:, 0, :]
        patch_feats = x[:, 1:, :]
        return f, patch_feats

    def _layer(self, x: Tensor, i: int, training: bool, rng, collect_attn) -> Tensor:
        p = self.params
        pre = f"backbone.layers.{i}"
        h = ad.layer_norm(x, p[f"{pre}.norm1.gain"], p[f"{pre}.norm1.bias"])
        x = ad.add(x, self._attention(h, pre, training, rng, collect_attn))
        h = ad.layer_norm(x, p[f"{pre}.norm2.gain"], p[f"{pre}.norm2.bias"])
        x = ad.add(x, self._mlp(h, pre, training, rng))
        return x

    def _attention(self, h: Tensor, pre: str, training: bool, rng, collect_attn) -> Tensor:
        c = self.config
        p = self.params
        b, t, d = h.shape
        dh = d // c.heads

        def proj(name):
            out = ad.add(ad.matmul(h, p[f"{pre}.attn.{name}.weight"]),
                         p[f"{pre}.attn.{name}.bias"])
            out = ad.reshape(out, (b, t, c.heads, dh))
            return ad.transpose(out, (0, 2, 1, 3))  # [B, heads, T, dh]

        q, k, v = proj("wq"), proj("wk"), proj("wv")
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        probs = ad.softmax(scores, axis=-1)
        if collect_attn is not None:
            collect_attn.append(probs.data.copy())
        probs = ad.dropout(probs, c.dropout, rng, training) if training else probs
        mixed = ad.matmul(probs, v)
        merged = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, t, d))
        out = ad.add(ad.matmul(merged, p[f"{pre}.attn.wo.weight"]), p[f"{pre}.attn.wo.bias"])
        return ad.dropout(out, c.dropout, rng, training) if training else out

    def _mlp(self, h: Tensor, pre: str, training: bool, rng) -> Tensor:
        c = self.config
        p = self.params
        x = ad.gelu(ad.add(ad.matmul(h, p[f"{pre}.mlp.fc1.weight"]), p[f"{pre}.mlp.fc1.bias"]))
        x = ad.dropout(x, c.dropout, rng, training) if training else x
        x = ad.add(ad.matmul(x, p[f"{pre}.mlp.fc2.weight"]), p[f"{pre}.mlp.fc2.bias"])
        return ad.dropout(x, c.dropout, rng, training) if training else x

    def features(self, images: Tensor, training: bool = False,
                 rng: np.random.Generator | None = None,
                 collect_attn: list | None = None) -> tuple[Tensor, Tensor]:
        """patchify -> embed -> forward, in one call."""
        patches = patchify(images, self.config.patch_size)
        seq = self.embed(patches)
        return self.forward(seq, training=training, rng=rng, collect_attn=collect_attn)
