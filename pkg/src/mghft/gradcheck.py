"""Finite-difference verification suite for every differentiable operator
and for the full model. Each check compares reverse-mode gradients against
central differences at float64."""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import BackboneConfig
from .fusion import (
    TextGuidedFusionAttention,
    contrastive_loss,
    global_fusion,
    mlce_loss,
    soft_fusion,
)
from .model import FusionConfig, MGHFTModel, make_synthetic_dataset

DEFAULT_H = 1e-5


def _fd_for_tensor(loss_fn, t, h, coord_cap=None, rng=None):
    """Central-difference gradient of loss_fn w.r.t. tensor ``t`` (in
    place); optionally only a seeded coordinate subsample."""
    flat = t.data.reshape(-1)
    if coord_cap is not None and flat.size > coord_cap:
        idx = np.sort(rng.choice(flat.size, coord_cap, replace=False))
    else:
        idx = np.arange(flat.size)
    fd = np.zeros(idx.size)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(loss_fn().data)
        flat[i] = orig - h
        fm = float(loss_fn().data)
        flat[i] = orig
        fd[j] = (fp - fm) / (2.0 * h)
    return idx, fd


def check_function(loss_fn, tensors, h=DEFAULT_H, coord_cap=None, seed=0):
    """Max relative gradient error over ``tensors`` for scalar ``loss_fn``.

    ``loss_fn`` must rebuild its graph from the tensors' current data on
    every call.
    """
    for t in tensors:
        t.zero_grad()
    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        grad = np.zeros_like(t.data) if t.grad is None else t.grad
        idx, fd = _fd_for_tensor(loss_fn, t, h, coord_cap, rng)
        err = ad.relative_error(grad.reshape(-1)[idx], fd)
        worst = max(worst, err)
    return worst


def _rand(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def check_matmul(seed=0):
    rng = np.random.default_rng(seed)
    a, b = _rand(rng, (5, 4)), _rand(rng, (4, 3))
    c = rng.standard_normal((5, 3))
    return check_function(lambda: ad.tsum(ad.mul(ad.matmul(a, b), c)), [a, b])


def check_softmax(seed=0):
    rng = np.random.default_rng(seed)
    x = _rand(rng, (3, 5))
    c = rng.standard_normal((3, 5))
    return check_function(lambda: ad.tsum(ad.mul(ad.softmax(x, axis=1), c)), [x])


def check_layer_norm(seed=0):
    rng = np.random.default_rng(seed)
    x, g, b = _rand(rng, (4, 6)), _rand(rng, (6,)), _rand(rng, (6,))
    c = rng.standard_normal((4, 6))
    return check_function(
        lambda: ad.tsum(ad.mul(ad.layer_norm(x, g, b), c)), [x, g, b]
    )


def check_cross_entropy(seed=0):
    rng = np.random.default_rng(seed)
    x = _rand(rng, (4, 7))
    y = rng.integers(0, 7, size=4)
    return check_function(lambda: ad.cross_entropy(x, y), [x])


def check_kl_divergence(seed=0):
    rng = np.random.default_rng(seed)
    a, b = _rand(rng, (4, 4)), _rand(rng, (4, 4))
    return check_function(
        lambda: ad.kl_divergence_rows(ad.softmax(a, -1), ad.softmax(b, -1)), [a, b]
    )


def check_soft_fusion(seed=0):
    rng = np.random.default_rng(seed)
    v, t = _rand(rng, (3, 5)), _rand(rng, (4, 5))
    c = rng.standard_normal((3, 5))
    return check_function(lambda: ad.tsum(ad.mul(soft_fusion(v, t), c)), [v, t])


def check_contrastive(seed=0):
    rng = np.random.default_rng(seed)
    v, t = _rand(rng, (4, 6)), _rand(rng, (4, 6))
    return check_function(lambda: contrastive_loss(v, t, 0.07), [v, t])


def check_mlce(seed=0):
    rng = np.random.default_rng(seed)
    v, t = _rand(rng, (4, 6)), _rand(rng, (4, 6))
    return check_function(lambda: mlce_loss(v, t, 1.0), [v, t])


def check_global_fusion(seed=0):
    rng = np.random.default_rng(seed)
    g, t = _rand(rng, (4, 5)), _rand(rng, (4, 5))
    c = rng.standard_normal((4, 5))
    return check_function(lambda: ad.tsum(ad.mul(global_fusion(g, t), c)), [g, t])


def check_tgfa(seed=0):
    rng = np.random.default_rng(seed)
    tg = TextGuidedFusionAttention(np.random.default_rng(seed + 1), 4, 2)
    for p in tg.parameters():
        # lift weights off the tiny init so gradients are well above
        # finite-difference noise
        p.data = p.data * 5.0 + 0.01
    h_v, h_t = _rand(rng, (8, 4)), _rand(rng, (4, 4))
    c = rng.standard_normal((8, 4))
    tensors = [h_v, h_t] + tg.parameters()
    return check_function(lambda: ad.tsum(ad.mul(tg(h_v, h_t), c)), tensors)


def tiny_model(seed=0):
    """Smallest full configuration exercising every fusion path."""
    bb = BackboneConfig(
        image_size=16,
        patch_size=2,
        stage_dims=(4, 4, 4, 4),
        stage_heads=(1, 1, 1, 1),
        sr_ratios=(1, 1, 1, 1),
        local_k=1,
    )
    fc = FusionConfig(fusion_dim=4, tgfa_heads=1, fusion_seq_len=2)
    model = MGHFTModel(bb, fc, text_dim=4, num_classes=3, seed=seed)
    batch = make_synthetic_dataset(2, bb, 4, num_classes=3, seed=seed + 1)
    return model, batch


def check_full_model(seed=0, coord_cap=16, h=1e-5):
    """FD-verify every parameter gradient of a toy end-to-end model on a
    2-example batch. Coordinates of larger tensors are a seeded subsample
    so the whole suite stays under the runtime budget."""
    model, batch = tiny_model(seed)
    images, labels, stage_seqs, stage_pooled = model.prepare_batch(batch)

    def loss_fn():
        result = model.forward_prepared(images, stage_seqs, stage_pooled)
        return model.total_loss(result, labels)

    tensors = model.parameters()
    return check_function(loss_fn, tensors, h=h, coord_cap=coord_cap, seed=seed)


SUITE = [
    ("matmul", check_matmul),
    ("softmax", check_softmax),
    ("layer_norm", check_layer_norm),
    ("cross_entropy", check_cross_entropy),
    ("kl_divergence_rows", check_kl_divergence),
    ("soft_fusion", check_soft_fusion),
    ("contrastive_loss", check_contrastive),
    ("mlce_loss", check_mlce),
    ("global_fusion", check_global_fusion),
    ("tgfa", check_tgfa),
    ("full_model", check_full_model),
]


def run_suite(seed=0):
    """Run every check; returns ordered (name, max relative error) pairs."""
    return [(name, fn(seed=seed)) for name, fn in SUITE]
