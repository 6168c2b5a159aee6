"""Fusion operators and alignment losses.

Soft-Fusion injects text tokens into visual tokens via residual attention;
the alignment loss combines a symmetric contrastive term with a
KL-between-similarity-matrices term; TGFA chains two cross-attentions
(visual queries over text, then the result querying vision) with a dual
residual MLP.
"""

from dataclasses import dataclass
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Linear, Tensor


@dataclass
class AlignmentLossConfig:
    tau_cl: float = 0.07
    tau_mlce: float = 1.0
    mlce_weight: float = 30.0
    stage_reduction: str = "mean"  # or "sum"
    kl_direction: str = "text_teaches_vision"  # or "vision_teaches_text"

    def validate(self):
        if self.tau_cl <= 0 or self.tau_mlce <= 0:
            raise ValueError("temperatures must be positive")
        if self.mlce_weight < 0:
            raise ValueError("mlce_weight must be nonnegative")
        if self.stage_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown stage_reduction {self.stage_reduction!r}")
        if self.kl_direction not in ("text_teaches_vision", "vision_teaches_text"):
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")
        return self


def soft_fusion(v, t):
    """Residual attention-weighted injection of text tokens into visual
    tokens: v + softmax(v t^T) t, softmax over the text-token axis.

    Parameter-free; accepts (n, d)/(m, d) or batched (..., n, d)/(..., m, d).
    """
    if v.shape[-1] != t.shape[-1]:
        raise ad.ShapeError(
            f"feature dims differ: visual {v.shape} vs text {t.shape}"
        )
    scores = ad.matmul(v, ad.swap_last2(t))
    weights = ad.softmax(scores, axis=-1)
    return ad.add(v, ad.matmul(weights, t))


def contrastive_loss(v, t, tau):
    """Symmetric InfoNCE over a batch of paired features.

    Rows are L2-normalized; similarity logits are scaled by 1/tau; targets
    are the diagonal pairing. Returns the mean of the row-wise and
    column-wise cross-entropy terms.
    """
    if v.shape != t.shape:
        raise ad.ShapeError(f"batch shapes differ: {v.shape} vs {t.shape}")
    b = v.shape[0]
    if b < 2:
        raise ad.ContractError("contrastive loss needs a batch of at least 2")
    f_v = ad.l2_normalize_rows(v)
    f_t = ad.l2_normalize_rows(t)
    s = ad.mul(ad.matmul(f_v, ad.swap_last2(f_t)), 1.0 / tau)
    y = np.arange(b)
    return ad.mul(
        ad.add(ad.cross_entropy(s, y), ad.cross_entropy(ad.swap_last2(s), y)), 0.5
    )


def mlce_loss(v, t, tau, direction="text_teaches_vision"):
    """KL divergence between softmax-normalized cosine self-similarity
    matrices of the two batches; similarities are mapped to [0, 1] via
    0.5 * (1 + cos)."""
    if v.shape != t.shape:
        raise ad.ShapeError(f"batch shapes differ: {v.shape} vs {t.shape}")
    if v.shape[0] < 2:
        raise ad.ContractError("mlce loss needs a batch of at least 2")
    f_v = ad.l2_normalize_rows(v)
    f_t = ad.l2_normalize_rows(t)
    c_v = ad.mul(ad.add(ad.matmul(f_v, ad.swap_last2(f_v)), 1.0), 0.5)
    c_t = ad.mul(ad.add(ad.matmul(f_t, ad.swap_last2(f_t)), 1.0), 0.5)
    w_v = ad.softmax(ad.mul(c_v, 1.0 / tau), axis=-1)
    w_t = ad.softmax(ad.mul(c_t, 1.0 / tau), axis=-1)
    if direction == "text_teaches_vision":
        return ad.kl_divergence_rows(w_t, w_v)
    return ad.kl_divergence_rows(w_v, w_t)


def alignment_loss(stage_pairs, cfg: AlignmentLossConfig):
    """Per-stage contrastive + weighted MLCE, reduced over stages.

    ``stage_pairs`` is a list of (global visual batch, pooled text batch)
    in that stage's feature space.
    """
    terms = []
    for v_g, t_g in stage_pairs:
        cl = contrastive_loss(v_g, t_g, cfg.tau_cl)
        ml = mlce_loss(v_g, t_g, cfg.tau_mlce, cfg.kl_direction)
        terms.append(ad.add(cl, ad.mul(ml, cfg.mlce_weight)))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    if cfg.stage_reduction == "mean":
        total = ad.mul(total, 1.0 / len(terms))
    return total


def global_fusion(h_g, h_t):
    """Soft-Fusion applied to the stacked global visual/text features."""
    return soft_fusion(h_g, h_t)


class CrossAttentionFusion(Module):
    """Plain single-head cross-attention with residual; drop-in
    replacement for Soft-Fusion in the CA ablation."""

    def __init__(self, rng, dim):
        super().__init__()
        self.dim = dim
        self.q = self.add_module("q", Linear(rng, dim, dim))
        self.k = self.add_module("k", Linear(rng, dim, dim))
        self.v = self.add_module("v", Linear(rng, dim, dim))

    def __call__(self, vis, txt):
        scale = 1.0 / math.sqrt(self.dim)
        attn = ad.softmax(
            ad.mul(ad.matmul(self.q(vis), ad.swap_last2(self.k(txt))), scale),
            axis=-1,
        )
        return ad.add(vis, ad.matmul(attn, self.v(txt)))


class TextGuidedFusionAttention(Module):
    """Two chained multi-head cross-attentions followed by a dual-residual
    MLP: visual queries attend over text, the result queries vision, heads
    are concatenated and output-projected, then
    out = MLP(h_v + F) + h_v + F."""

    def __init__(self, rng, dim, heads, mlp_ratio=4):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = self.add_module("wq", Linear(rng, dim, dim))
        self.wk_t = self.add_module("wk_t", Linear(rng, dim, dim))
        self.wv_t = self.add_module("wv_t", Linear(rng, dim, dim))
        self.wk_v = self.add_module("wk_v", Linear(rng, dim, dim))
        self.wv_v = self.add_module("wv_v", Linear(rng, dim, dim))
        self.out = self.add_module("out", Linear(rng, dim, dim))
        hidden = mlp_ratio * dim
        self.fc1 = self.add_module("fc1", Linear(rng, dim, hidden))
        self.fc2 = self.add_module("fc2", Linear(rng, hidden, dim))

    def _split(self, x):
        lead = x.shape[:-2]
        n = x.shape[-2]
        x = ad.reshape(x, lead + (n, self.heads, self.head_dim))
        axes = tuple(range(len(lead))) + (
            len(lead) + 1,
            len(lead),
            len(lead) + 2,
        )
        return ad.transpose(x, axes)  # (..., H, n, dh)

    def _merge(self, x):
        lead = x.shape[:-3]
        h, n, dh = x.shape[-3:]
        axes = tuple(range(len(lead))) + (
            len(lead) + 1,
            len(lead),
            len(lead) + 2,
        )
        x = ad.transpose(x, axes)
        return ad.reshape(x, lead + (n, h * dh))

    def __call__(self, h_v, h_t):
        scale = 1.0 / math.sqrt(self.head_dim)
        q_v = self._split(self.wq(h_v))
        k_t = self._split(self.wk_t(h_t))
        v_t = self._split(self.wv_t(h_t))
        q_f = ad.matmul(
            ad.softmax(ad.mul(ad.matmul(q_v, ad.swap_last2(k_t)), scale), axis=-1),
            v_t,
        )
        k_v = self._split(self.wk_v(h_v))
        v_v = self._split(self.wv_v(h_v))
        f = ad.matmul(
            ad.softmax(ad.mul(ad.matmul(q_f, ad.swap_last2(k_v)), scale), axis=-1),
            v_v,
        )
        f = self.out(self._merge(f))
        res = ad.add(h_v, f)
        return ad.add(self.fc2(ad.gelu(self.fc1(res))), res)


class ClassifierHead(Module):
    """Mean-pool fused tokens and map to class logits."""

    def __init__(self, rng, dim, num_classes):
        super().__init__()
        self.fc = self.add_module("fc", Linear(rng, dim, num_classes))

    def __call__(self, tokens):
        return self.fc(ad.tmean(tokens, axis=-2))
