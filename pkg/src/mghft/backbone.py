"""Miniature four-stage pyramid vision backbone.

Each stage prepends a fresh learnable CLS token, runs pre-norm transformer
blocks with spatial-reduction attention, and emits a global feature (the
CLS output), an attention map from the CLS query over spatial tokens, and
the top-k spatial tokens under that map. Spatial tokens are 2x2
patch-merged between stages.
"""

from dataclasses import dataclass
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Linear, LayerNorm, Tensor


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 4
    stage_dims: tuple = (32, 64, 96, 128)
    stage_depths: tuple = (1, 1, 1, 1)
    stage_heads: tuple = (1, 2, 4, 4)
    sr_ratios: tuple = (8, 4, 2, 1)
    # stage 4 at the 64px default has only 4 spatial tokens, so 4 is the
    # largest local_k valid at every stage
    local_k: int = 4

    def stage_sides(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size "
                f"{self.patch_size}"
            )
        sides = [self.image_size // self.patch_size]
        for _ in range(3):
            if sides[-1] % 2 != 0:
                raise ConfigError(
                    f"stage side {sides[-1]} not divisible by 2 for patch merge"
                )
            sides.append(sides[-1] // 2)
        return sides

    def validate(self):
        for name in ("stage_dims", "stage_depths", "stage_heads", "sr_ratios"):
            if len(getattr(self, name)) != 4:
                raise ConfigError(f"{name} must have 4 entries")
        for d, h in zip(self.stage_dims, self.stage_heads):
            if d % h != 0:
                raise ConfigError(f"stage dim {d} not divisible by heads {h}")
        sides = self.stage_sides()
        for side, r in zip(sides, self.sr_ratios):
            if side % r != 0:
                raise ConfigError(
                    f"sr_ratio {r} does not divide stage side {side}"
                )
        min_tokens = min(s * s for s in sides)
        if not 1 <= self.local_k <= min_tokens:
            raise ConfigError(
                f"local_k {self.local_k} exceeds smallest stage token count "
                f"{min_tokens}"
            )
        return self


@dataclass
class StageFeatures:
    """Per-stage outputs: global CLS feature, selected local tokens, and
    the CLS-over-spatial attention used for selection/visualization."""

    v_g: Tensor  # (B, dim)
    v_l: Tensor  # (B, k, dim)
    attn_cls: Tensor  # (B, n_tokens), rows sum to 1
    grid: tuple  # spatial (h, w) of this stage


def _pool_tokens(x, h, w, ratio):
    """Average-pool a (B, h*w, d) token map by ``ratio`` per side."""
    if ratio == 1:
        return x
    b, n, d = x.shape
    x = ad.reshape(x, (b, h // ratio, ratio, w // ratio, ratio, d))
    x = ad.tmean(x, axis=(2, 4))
    return ad.reshape(x, (b, (h // ratio) * (w // ratio), d))


class TransformerBlock(Module):
    """Pre-norm block: spatial-reduction attention then MLP, both residual.

    Input carries the CLS token at row 0. Keys/values are the CLS token
    plus the pooled spatial tokens; queries are unreduced. ``cls_attn``
    (optional) is the CLS query's attention over the unreduced spatial
    tokens, head-averaged.
    """

    def __init__(self, rng, dim, heads, sr_ratio, mlp_ratio=4):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.sr_ratio = sr_ratio
        self.ln1 = self.add_module("ln1", LayerNorm(dim))
        self.q = self.add_module("q", Linear(rng, dim, dim))
        self.k = self.add_module("k", Linear(rng, dim, dim))
        self.v = self.add_module("v", Linear(rng, dim, dim))
        self.proj = self.add_module("proj", Linear(rng, dim, dim))
        self.ln2 = self.add_module("ln2", LayerNorm(dim))
        hidden = mlp_ratio * dim
        self.fc1 = self.add_module("fc1", Linear(rng, dim, hidden))
        self.fc2 = self.add_module("fc2", Linear(rng, hidden, dim))

    def _split_heads(self, x):
        b, n, _ = x.shape
        x = ad.reshape(x, (b, n, self.heads, self.head_dim))
        return ad.transpose(x, (0, 2, 1, 3))  # (B, H, n, dh)

    def _merge_heads(self, x):
        b, h, n, dh = x.shape
        x = ad.transpose(x, (0, 2, 1, 3))
        return ad.reshape(x, (b, n, h * dh))

    def __call__(self, x, grid, want_cls_attn=False):
        h, w = grid
        y = self.ln1(x)
        spatial = y[:, 1:, :]
        kv_src = ad.concat([y[:, 0:1, :], _pool_tokens(spatial, h, w, self.sr_ratio)], axis=1)

        scale = 1.0 / math.sqrt(self.head_dim)
        q = self._split_heads(self.q(y))
        k = self._split_heads(self.k(kv_src))
        v = self._split_heads(self.v(kv_src))
        attn = ad.softmax(ad.mul(ad.matmul(q, ad.swap_last2(k)), scale), axis=-1)
        out = self.proj(self._merge_heads(ad.matmul(attn, v)))
        x = ad.add(x, out)
        x = ad.add(x, self.fc2(ad.gelu(self.fc1(self.ln2(x)))))

        cls_attn = None
        if want_cls_attn:
            # CLS query against the unreduced spatial keys only
            k_full = self._split_heads(self.k(spatial))
            qc = q[:, :, 0:1, :]
            a = ad.softmax(
                ad.mul(ad.matmul(qc, ad.swap_last2(k_full)), scale), axis=-1
            )  # (B, H, 1, n)
            cls_attn = ad.tmean(a[:, :, 0, :], axis=1)  # (B, n)
        return x, cls_attn


class PatchEmbed(Module):
    """Linear patch projection plus learned positional embedding."""

    def __init__(self, rng, in_dim, out_dim, n_tokens):
        super().__init__()
        self.proj = self.add_module("proj", Linear(rng, in_dim, out_dim))
        self.pos = self.param("pos", ad.trunc_normal(rng, (1, n_tokens, out_dim)))
        self.norm = self.add_module("norm", LayerNorm(out_dim))

    def __call__(self, tokens):
        return self.norm(ad.add(self.proj(tokens), self.pos))


def image_to_patches(images, patch):
    """(B, 3, H, W) -> (B, (H/p)*(W/p), 3*p*p) row-major patch raster."""
    b, c, hh, ww = images.shape
    h, w = hh // patch, ww // patch
    x = ad.reshape(images, (b, c, h, patch, w, patch))
    x = ad.transpose(x, (0, 2, 4, 1, 3, 5))
    return ad.reshape(x, (b, h * w, c * patch * patch))


def merge_patches(tokens, h, w):
    """2x2 spatial merge: (B, h*w, d) -> (B, h*w/4, 4d)."""
    b, n, d = tokens.shape
    x = ad.reshape(tokens, (b, h // 2, 2, w // 2, 2, d))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b, (h // 2) * (w // 2), 4 * d))


class Stage(Module):
    def __init__(self, rng, cfg, index, in_dim, n_tokens):
        super().__init__()
        dim = cfg.stage_dims[index]
        self.embed = self.add_module("embed", PatchEmbed(rng, in_dim, dim, n_tokens))
        self.cls = self.param("cls", ad.trunc_normal(rng, (1, 1, dim)))
        self.blocks = [
            self.add_module(
                f"block{j}",
                TransformerBlock(rng, dim, cfg.stage_heads[index], cfg.sr_ratios[index]),
            )
            for j in range(cfg.stage_depths[index])
        ]
        self.local_k = cfg.local_k

    def __call__(self, tokens, grid):
        x = self.embed(tokens)
        b = x.shape[0]
        cls = ad.broadcast_to(self.cls, (b, 1, self.cls.shape[2]))
        x = ad.concat([cls, x], axis=1)
        cls_attn = None
        for j, block in enumerate(self.blocks):
            x, cls_attn = block(x, grid, want_cls_attn=(j == len(self.blocks) - 1))
        v_g = x[:, 0, :]
        spatial = x[:, 1:, :]
        # selection is on detached attention values; gradient still flows
        # through the gathered token rows
        order = np.argsort(-cls_attn.data, axis=1, kind="stable")
        idx = order[:, : self.local_k]
        v_l = spatial[np.arange(b)[:, None], idx]
        feats = StageFeatures(v_g=v_g, v_l=v_l, attn_cls=cls_attn, grid=grid)
        return spatial, feats


class PyramidBackbone(Module):
    """Four-stage backbone; forward returns one StageFeatures per stage."""

    def __init__(self, cfg: BackboneConfig, rng):
        super().__init__()
        self.cfg = cfg.validate()
        sides = cfg.stage_sides()
        self.sides = sides
        in_dims = [3 * cfg.patch_size * cfg.patch_size] + [
            4 * d for d in cfg.stage_dims[:3]
        ]
        self.stages = [
            self.add_module(
                f"stage{i}", Stage(rng, cfg, i, in_dims[i], sides[i] * sides[i])
            )
            for i in range(4)
        ]

    def __call__(self, images, return_tokens=False):
        cfg = self.cfg
        expected = (3, cfg.image_size, cfg.image_size)
        if images.shape[1:] != expected:
            raise InputError(
                f"expected image batch of shape (B,)+{expected}, got {images.shape}"
            )
        tokens = image_to_patches(images, cfg.patch_size)
        features = []
        stage_tokens = []
        for i, stage in enumerate(self.stages):
            side = self.sides[i]
            tokens, feats = stage(tokens, (side, side))
            features.append(feats)
            stage_tokens.append(tokens)
            if i < 3:
                tokens = merge_patches(tokens, side, side)
        if return_tokens:
            return features, stage_tokens
        return features
