"""End-to-end model assembly: hierarchical per-stage injection of view
embeddings into the backbone, total loss, optimizer, training loop, and
the ablation sweep."""

import json
import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import Module, Linear, Tensor
from .backbone import PyramidBackbone, ConfigError
from .data import DataError, EvalReport, LabeledExample
from .fusion import (
    AlignmentLossConfig,
    ClassifierHead,
    CrossAttentionFusion,
    TextGuidedFusionAttention,
    alignment_loss,
    global_fusion,
    soft_fusion,
)


@dataclass
class FusionConfig:
    enable_cl: bool = True
    enable_gf: bool = True
    enable_lf: bool = True
    enable_tgfa: bool = True
    replace_soft_fusion_with_cross_attention: bool = False
    view_order: tuple = (1, 2, 3, 4)
    repeat_single_view: int = None  # 1-based view index
    concat_all_views: bool = False
    fusion_dim: int = 128
    fusion_seq_len: int = 32
    tgfa_heads: int = 4
    align_weight: float = 0.5
    loss: AlignmentLossConfig = field(default_factory=AlignmentLossConfig)

    def validate(self):
        if self.repeat_single_view is not None and self.concat_all_views:
            raise ConfigError(
                "repeat_single_view and concat_all_views are mutually exclusive"
            )
        if self.repeat_single_view is not None:
            if not 1 <= self.repeat_single_view <= 4:
                raise ConfigError(
                    f"repeat_single_view must be in 1..4, got {self.repeat_single_view}"
                )
        elif not self.concat_all_views and sorted(self.view_order) != [1, 2, 3, 4]:
            raise ConfigError(
                f"view_order {self.view_order} is not a permutation of 1..4"
            )
        if self.fusion_dim % self.tgfa_heads != 0:
            raise ConfigError(
                f"fusion_dim {self.fusion_dim} not divisible by tgfa_heads "
                f"{self.tgfa_heads}"
            )
        self.loss.validate()
        return self


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 50
    weight_decay: float = 0.01
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int = None  # optional hard cap across epochs

    def validate(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (contrastive pairs)")
        return self


@dataclass
class ForwardResult:
    logits: Tensor  # (B, C)
    align_pairs: list  # [(v_g, projected pooled text)] per stage, or []
    stage_attn: list  # per-stage attn_cls tensors
    stage_grids: list  # per-stage (h, w)


class MGHFTModel(Module):
    """Backbone + hierarchical fusion + classifier.

    Parameter groups are created only for enabled toggles, so the
    parameter manifest shrinks/grows exactly with the configuration.
    """

    def __init__(self, backbone_cfg, fusion_cfg, text_dim, num_classes=7, seed=0):
        super().__init__()
        self.backbone_cfg = backbone_cfg
        self.cfg = fusion_cfg.validate()
        self.text_dim = text_dim
        self.num_classes = num_classes
        rng = np.random.default_rng(seed)
        dims = backbone_cfg.stage_dims
        fdim = fusion_cfg.fusion_dim
        use_ca = fusion_cfg.replace_soft_fusion_with_cross_attention

        self.backbone = self.add_module("backbone", PyramidBackbone(backbone_cfg, rng))
        self.vis_global_proj = [
            self.add_module(f"vis_global_proj{i}", Linear(rng, dims[i], fdim))
            for i in range(4)
        ]
        self.local_out_proj = [
            self.add_module(f"local_out_proj{i}", Linear(rng, dims[i], fdim))
            for i in range(4)
        ]
        if fusion_cfg.enable_cl:
            self.text_proj_align = [
                self.add_module(f"text_proj_align{i}", Linear(rng, text_dim, dims[i]))
                for i in range(4)
            ]
        if fusion_cfg.enable_lf:
            self.text_proj_local = [
                self.add_module(f"text_proj_local{i}", Linear(rng, text_dim, dims[i]))
                for i in range(4)
            ]
            if use_ca:
                self.local_ca = [
                    self.add_module(f"local_ca{i}", CrossAttentionFusion(rng, dims[i]))
                    for i in range(4)
                ]
        if fusion_cfg.enable_gf:
            self.text_proj_gf = self.add_module(
                "text_proj_gf", Linear(rng, text_dim, fdim)
            )
            if use_ca:
                self.global_ca = self.add_module(
                    "global_ca", CrossAttentionFusion(rng, fdim)
                )
        if fusion_cfg.enable_tgfa:
            self.text_proj_tgfa = self.add_module(
                "text_proj_tgfa", Linear(rng, text_dim, fdim)
            )
            self.tgfa = self.add_module(
                "tgfa",
                TextGuidedFusionAttention(rng, fdim, fusion_cfg.tgfa_heads),
            )
        self.head = self.add_module("head", ClassifierHead(rng, fdim, num_classes))

    # ---- batch preparation --------------------------------------------

    def _stage_view_index(self, stage):
        cfg = self.cfg
        if cfg.repeat_single_view is not None:
            return cfg.repeat_single_view - 1
        if cfg.concat_all_views:
            return None  # concatenated sequence
        return cfg.view_order[stage] - 1

    def _fit_sequence(self, seq):
        """Tile or truncate a (n, text_dim) sequence to fusion_seq_len rows
        so batches stay rectangular."""
        m = self.cfg.fusion_seq_len
        n = seq.shape[0]
        if n >= m:
            return seq[:m]
        reps = -(-m // n)
        return np.tile(seq, (reps, 1))[:m]

    def prepare_batch(self, examples):
        """Stack images and per-stage text inputs for a list of examples.

        Text arrays are constants: no gradient ever reaches the (frozen)
        encoder outputs.
        """
        for ex in examples:
            if ex.embeddings is None:
                raise DataError(f"example {ex.sticker_id!r} is missing view embeddings")
            if ex.image is None:
                raise DataError(f"example {ex.sticker_id!r} has no image data")
        images = Tensor(np.stack([ex.image for ex in examples]))
        labels = np.array([ex.label for ex in examples], dtype=np.int64)
        stage_seqs = []
        stage_pooled = []
        for stage in range(4):
            vi = self._stage_view_index(stage)
            seqs = []
            pooled = []
            for ex in examples:
                emb = ex.embeddings
                if vi is None:
                    seq = np.concatenate(emb.t, axis=0)
                    pooled.append(seq.mean(axis=0))
                else:
                    seq = emb.t[vi]
                    pooled.append(emb.pooled[vi])
                seqs.append(self._fit_sequence(seq))
            stage_seqs.append(Tensor(np.stack(seqs)))
            stage_pooled.append(Tensor(np.stack(pooled)))
        return images, labels, stage_seqs, stage_pooled

    # ---- forward -------------------------------------------------------

    def forward(self, examples):
        images, labels, stage_seqs, stage_pooled = self.prepare_batch(examples)
        return self.forward_prepared(images, stage_seqs, stage_pooled), labels

    def forward_prepared(self, images, stage_seqs, stage_pooled):
        cfg = self.cfg
        use_ca = cfg.replace_soft_fusion_with_cross_attention
        features = self.backbone(images)

        align_pairs = []
        local_rows = []
        global_rows = []
        for i, feats in enumerate(features):
            t_seq = stage_seqs[i]
            v_l = feats.v_l
            if cfg.enable_lf:
                t_loc = self.text_proj_local[i](t_seq)
                if use_ca:
                    v_l = self.local_ca[i](v_l, t_loc)
                else:
                    v_l = soft_fusion(v_l, t_loc)
            local_rows.append(ad.tmean(self.local_out_proj[i](v_l), axis=-2))
            global_rows.append(self.vis_global_proj[i](feats.v_g))
            if cfg.enable_cl:
                t_align = ad.tmean(self.text_proj_align[i](t_seq), axis=-2)
                align_pairs.append((feats.v_g, t_align))

        h_g = ad.stack(global_rows, axis=1)  # (B, 4, F)
        if cfg.enable_gf:
            h_t_gf = ad.stack(
                [self.text_proj_gf(p) for p in stage_pooled], axis=1
            )
            if use_ca:
                h_g = self.global_ca(h_g, h_t_gf)
            else:
                h_g = global_fusion(h_g, h_t_gf)
        h_v = ad.concat([h_g, ad.stack(local_rows, axis=1)], axis=1)  # (B, 8, F)
        if cfg.enable_tgfa:
            h_t = ad.stack(
                [self.text_proj_tgfa(p) for p in stage_pooled], axis=1
            )
            fused = self.tgfa(h_v, h_t)
        else:
            fused = h_v
        logits = self.head(fused)
        return ForwardResult(
            logits=logits,
            align_pairs=align_pairs,
            stage_attn=[f.attn_cls for f in features],
            stage_grids=[f.grid for f in features],
        )

    def total_loss(self, result: ForwardResult, labels):
        """Classification cross-entropy plus the weighted alignment loss."""
        loss = ad.cross_entropy(result.logits, labels)
        if self.cfg.enable_cl:
            align = alignment_loss(result.align_pairs, self.cfg.loss)
            loss = ad.add(loss, ad.mul(align, self.cfg.align_weight))
        return loss


# ---- optimizer ---------------------------------------------------------


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, params, lr, weight_decay=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)  # Parameter records, fixed order
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.tensor.data) for p in self.params]
        self.v = [np.zeros_like(p.tensor.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.tensor.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.tensor.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1**self.t)
            v_hat = self.v[i] / (1 - b2**self.t)
            p.tensor.data = p.tensor.data - self.lr * (
                m_hat / (np.sqrt(v_hat) + self.eps)
                + self.weight_decay * p.tensor.data
            )


# ---- training ----------------------------------------------------------


class TrainingAborted(RuntimeError):
    def __init__(self, message, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


@dataclass
class TrainResult:
    metrics: list  # one dict per epoch
    best_checkpoint: str
    best_val_accuracy: float
    steps: int


def predict(model, examples, batch_size=32):
    preds = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        result, _ = model.forward(chunk)
        preds.extend(np.argmax(result.logits.data, axis=1).tolist())
    return preds


def evaluate(model, examples, batch_size=32):
    if not examples:
        raise DataError("cannot evaluate an empty split")
    preds = predict(model, examples, batch_size)
    labels = [ex.label for ex in examples]
    return EvalReport.from_predictions(labels, preds, model.num_classes)


def _append_jsonl(path, record):
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def train(model, train_examples, val_examples, cfg: TrainConfig, out_dir):
    """Deterministic training loop: fixed shuffle order per (seed, epoch),
    fixed reduction order, JSONL metric log, best-val checkpoint."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    if os.path.exists(metrics_path):
        os.remove(metrics_path)
    best_path = os.path.join(out_dir, "best.ckpt")
    last_path = os.path.join(out_dir, "last.ckpt")

    params = list(model.named_parameters())
    opt = AdamW(
        params,
        lr=cfg.learning_rate,
        weight_decay=cfg.weight_decay,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
    )
    rng = np.random.default_rng(cfg.seed)
    metrics = []
    best_acc = -1.0
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_examples))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue  # contrastive loss needs pairs
            batch = [train_examples[i] for i in idx]
            result, labels = model.forward(batch)
            loss = model.total_loss(result, labels)
            if not np.isfinite(loss.data):
                raise TrainingAborted(
                    f"non-finite loss at step {step}",
                    last_good_checkpoint=last_path if os.path.exists(last_path) else None,
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.data))
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        report = evaluate(model, val_examples) if val_examples else None
        record = {
            "epoch": epoch,
            "step": step,
            "train_loss": float(np.mean(epoch_losses)) if epoch_losses else None,
            "val_acc": report.accuracy if report else None,
            "val_macro_f1": report.macro_f1 if report else None,
        }
        metrics.append(record)
        _append_jsonl(metrics_path, record)
        ckpt.save_archive(last_path, model.state_arrays())
        if report and report.accuracy > best_acc:
            best_acc = report.accuracy
            ckpt.save_archive(best_path, model.state_arrays())
        if done:
            break
    if best_acc < 0:
        ckpt.save_archive(best_path, model.state_arrays())
    return TrainResult(
        metrics=metrics,
        best_checkpoint=best_path,
        best_val_accuracy=best_acc,
        steps=step,
    )


# ---- synthetic data ----------------------------------------------------


def make_synthetic_dataset(
    n,
    backbone_cfg,
    text_dim,
    num_classes=7,
    seed=0,
    image_signal=0.25,
    text_signal=1.0,
    seq_len=6,
):
    """Separable toy dataset: each class has a fixed image patch pattern
    (weak signal) and fixed per-view text directions (strong signal)."""
    from .text import ViewEmbeddings

    rng = np.random.default_rng(seed)
    s = backbone_cfg.image_size
    class_images = rng.random((num_classes, 3, s, s))
    class_text = rng.standard_normal((num_classes, 4, text_dim))
    class_text /= np.linalg.norm(class_text, axis=-1, keepdims=True)
    examples = []
    for i in range(n):
        label = int(i % num_classes)
        image = np.clip(
            0.5 + image_signal * (class_images[label] - 0.5)
            + 0.05 * rng.standard_normal((3, s, s)),
            0.0,
            1.0,
        )
        seqs = []
        for v in range(4):
            noise = 0.1 * rng.standard_normal((seq_len, text_dim))
            seqs.append(text_signal * class_text[label, v] + noise)
        emb = ViewEmbeddings(
            sticker_id=f"synth-{i}",
            t=seqs,
            pooled=[sq.mean(axis=0) for sq in seqs],
        )
        examples.append(
            LabeledExample(
                sticker_id=f"synth-{i}", label=label, image=image, embeddings=emb
            )
        )
    return examples


# ---- ablation sweeps ---------------------------------------------------

TABLE3_ROWS = [
    {"name": "none", "cl": False, "gf": False, "lf": False, "tgfa": False},
    {"name": "CL", "cl": True, "gf": False, "lf": False, "tgfa": False},
    {"name": "GF", "cl": False, "gf": True, "lf": False, "tgfa": False},
    {"name": "LF", "cl": False, "gf": False, "lf": True, "tgfa": False},
    {"name": "TGFA", "cl": False, "gf": False, "lf": False, "tgfa": True},
    {"name": "CL+GF+LF", "cl": True, "gf": True, "lf": True, "tgfa": False},
    {"name": "CL+GF+TGFA", "cl": True, "gf": True, "lf": False, "tgfa": True},
    {"name": "CL+LF+TGFA", "cl": True, "gf": False, "lf": True, "tgfa": True},
    {"name": "GF+LF+TGFA", "cl": False, "gf": True, "lf": True, "tgfa": True},
    {"name": "full", "cl": True, "gf": True, "lf": True, "tgfa": True},
]

TABLE4_ROWS = [
    {"name": "T1,T2,T3,T4", "view_order": (1, 2, 3, 4)},
    {"name": "T1,T2,T4,T3", "view_order": (1, 2, 4, 3)},
    {"name": "T2,T1,T3,T4", "view_order": (2, 1, 3, 4)},
    {"name": "T2,T1,T4,T3", "view_order": (2, 1, 4, 3)},
    {"name": "T3,T4,T1,T2", "view_order": (3, 4, 1, 2)},
    {"name": "T4,T3,T2,T1", "view_order": (4, 3, 2, 1)},
    {"name": "T4 at every stage", "repeat_single_view": 4},
    {"name": "T at every stage", "concat_all_views": True},
]


def table3_configs(base: FusionConfig):
    out = []
    for row in TABLE3_ROWS:
        cfg = replace(
            base,
            enable_cl=row["cl"],
            enable_gf=row["gf"],
            enable_lf=row["lf"],
            enable_tgfa=row["tgfa"],
        )
        out.append((row["name"], cfg))
    return out


def table4_configs(base: FusionConfig):
    out = []
    for row in TABLE4_ROWS:
        cfg = replace(
            base,
            view_order=row.get("view_order", (1, 2, 3, 4)),
            repeat_single_view=row.get("repeat_single_view"),
            concat_all_views=row.get("concat_all_views", False),
        )
        out.append((row["name"], cfg))
    return out


def ablation_sweep(
    configs,
    backbone_cfg,
    train_cfg,
    text_dim,
    train_examples,
    val_examples,
    num_classes=7,
    out_dir=None,
    model_seed=0,
):
    """Train and evaluate each configuration with a shared seed; returns
    one result row per configuration."""
    for name, cfg in configs:
        cfg.validate()  # fail before any training on a bad config
    rows = []
    for name, cfg in configs:
        model = MGHFTModel(
            backbone_cfg, cfg, text_dim, num_classes=num_classes, seed=model_seed
        )
        run_dir = None
        if out_dir:
            run_dir = os.path.join(out_dir, name.replace(" ", "_").replace(",", "-"))
        else:
            run_dir = tempfile.mkdtemp(prefix="mghft-ablate-")
        train(model, train_examples, val_examples, replace(train_cfg), run_dir)
        report = evaluate(model, val_examples)
        rows.append(
            {"configuration": name, "accuracy": report.accuracy, "macro_f1": report.macro_f1}
        )
    return rows
