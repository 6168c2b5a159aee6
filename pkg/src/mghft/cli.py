"""Command-line surface: train / eval / describe / encode / ablate /
gradcheck / export-attn. Exit codes: 0 success, 1 runtime error, 2 usage
error."""

import argparse
import json
import os
import sys
import tempfile

import numpy as np

from . import checkpoint as ckpt
from .backbone import BackboneConfig
from .data import (
    SER30K_CLASSES,
    DataError,
    Splits,
    load_dataset,
    split_ids,
)
from .fusion import AlignmentLossConfig
from .gradcheck import run_suite
from .model import (
    FusionConfig,
    MGHFTModel,
    TrainConfig,
    ablation_sweep,
    evaluate,
    make_synthetic_dataset,
    table3_configs,
    table4_configs,
    train,
)
from .text import (
    HashEmbeddingProvider,
    MllmClient,
    PromptSet,
    encode_views,
    generate_descriptions,
    load_embeddings,
    read_descriptions,
    save_embeddings,
    write_descriptions,
)

GRADCHECK_TOLERANCE = 1e-4


def _filter_fields(cls, values):
    import dataclasses

    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**values)


def load_config(path):
    """Experiment config from JSON or TOML."""
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib

        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    else:
        with open(path) as fh:
            raw = json.load(fh)
    backbone_raw = dict(raw.get("backbone", {}))
    for key in ("stage_dims", "stage_depths", "stage_heads", "sr_ratios"):
        if key in backbone_raw:
            backbone_raw[key] = tuple(backbone_raw[key])
    backbone = _filter_fields(BackboneConfig, backbone_raw).validate()
    fusion_raw = dict(raw.get("fusion", {}))
    if "view_order" in fusion_raw:
        fusion_raw["view_order"] = tuple(fusion_raw["view_order"])
    if "loss" in fusion_raw:
        fusion_raw["loss"] = _filter_fields(AlignmentLossConfig, fusion_raw["loss"])
    fusion = _filter_fields(FusionConfig, fusion_raw).validate()
    train_cfg = _filter_fields(TrainConfig, dict(raw.get("train", {}))).validate()
    return {
        "backbone": backbone,
        "fusion": fusion,
        "train": train_cfg,
        "data": raw.get("data", {}),
        "out_dir": raw.get("out_dir", "runs/default"),
    }


def resolve_data(cfg):
    """Build train/val/test splits from the config's data section.

    Returns (splits, text_dim, class_names).
    """
    data = cfg["data"]
    class_names = tuple(data.get("class_names", SER30K_CLASSES))
    ratios = tuple(data.get("ratios", (0.7, 0.1, 0.2)))
    seed = int(data.get("seed", 0))

    if "synthetic" in data:
        synth = data["synthetic"]
        text_dim = int(synth.get("text_dim", 16))
        examples = make_synthetic_dataset(
            n=int(synth.get("n", 64)),
            backbone_cfg=cfg["backbone"],
            text_dim=text_dim,
            num_classes=len(class_names),
            seed=int(synth.get("seed", 0)),
            image_signal=float(synth.get("image_signal", 0.25)),
            text_signal=float(synth.get("text_signal", 1.0)),
        )
        by_id = {ex.sticker_id: ex for ex in examples}
        train_ids, val_ids, test_ids = split_ids(list(by_id), ratios, seed)
        splits = Splits(
            train=[by_id[s] for s in train_ids],
            val=[by_id[s] for s in val_ids],
            test=[by_id[s] for s in test_ids],
        )
        return splits, text_dim, class_names

    if "embeddings" in data:
        embeddings = load_embeddings(data["embeddings"])
    elif "descriptions" in data:
        descs = read_descriptions(data["descriptions"])
        enc = data.get("encoder", {})
        provider = HashEmbeddingProvider(
            dim=int(enc.get("dim", 32)), seed=int(enc.get("seed", 0))
        )
        max_len = int(enc.get("max_len", 512))
        embeddings = {
            sid: encode_views(d, provider, max_len) for sid, d in descs.items()
        }
    else:
        raise DataError(
            "data config needs one of: synthetic, embeddings, descriptions"
        )
    text_dim = next(iter(embeddings.values())).t[0].shape[1]
    splits = load_dataset(
        data["manifest"],
        ratios,
        seed,
        embeddings,
        num_classes=len(class_names),
        image_size=cfg["backbone"].image_size,
    )
    if splits.excluded:
        print(f"excluded {splits.excluded} examples missing view embeddings")
    return splits, text_dim, class_names


def build_model(cfg, text_dim, num_classes, seed=None):
    return MGHFTModel(
        cfg["backbone"],
        cfg["fusion"],
        text_dim,
        num_classes=num_classes,
        seed=cfg["train"].seed if seed is None else seed,
    )


def export_attention(model, examples, out_dir, batch_size=32):
    """Write each example's final-stage CLS attention map, reshaped to the
    stage-4 spatial grid, as a JSON file next to its image reference."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        result, _ = model.forward(chunk)
        attn = result.stage_attn[-1].data
        h, w = result.stage_grids[-1]
        for row, ex in zip(attn, chunk):
            record = {
                "sticker_id": ex.sticker_id,
                "image": ex.image_path,
                "grid_shape": [h, w],
                "attention": row.reshape(h, w).tolist(),
            }
            path = os.path.join(out_dir, f"{ex.sticker_id}.json")
            fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".tmp")
            with os.fdopen(fd, "w") as fh:
                json.dump(record, fh)
            os.replace(tmp, path)
            written.append(path)
    return written


# ---- subcommands -------------------------------------------------------


def cmd_train(args):
    cfg = load_config(args.config)
    splits, text_dim, class_names = resolve_data(cfg)
    model = build_model(cfg, text_dim, len(class_names))
    result = train(model, splits.train, splits.val, cfg["train"], cfg["out_dir"])
    print(f"trained {result.steps} steps; best val accuracy {result.best_val_accuracy:.4f}")
    print(f"metrics: {os.path.join(cfg['out_dir'], 'metrics.jsonl')}")
    print(f"best checkpoint: {result.best_checkpoint}")
    return 0


def _load_checkpoint_model(cfg, args):
    splits, text_dim, class_names = resolve_data(cfg)
    model = build_model(cfg, text_dim, len(class_names))
    model.load_state_arrays(ckpt.load_archive(args.checkpoint))
    return splits, model


def cmd_eval(args):
    cfg = load_config(args.config)
    splits, model = _load_checkpoint_model(cfg, args)
    examples = getattr(splits, args.split)
    report = evaluate(model, examples)
    print(json.dumps(report.to_dict(), indent=1))
    return 0


def cmd_describe(args):
    prompts = PromptSet.from_file(args.prompts) if args.prompts else PromptSet()
    client = MllmClient(endpoint=args.endpoint, model=args.model)
    images = []
    for name in sorted(os.listdir(args.images)):
        if name.lower().endswith((".png", ".jpg", ".jpeg")):
            with open(os.path.join(args.images, name), "rb") as fh:
                images.append((os.path.splitext(name)[0], fh.read()))
    if not images:
        raise DataError(f"no images found in {args.images}")
    descriptions, errors = generate_descriptions(
        images, client, prompts, cache_dir=args.cache, parallel=args.parallel
    )
    write_descriptions(args.out, descriptions)
    print(f"wrote {len(descriptions)} descriptions to {args.out}")
    for err in errors:
        print(f"error: {err['sticker_id']}: {err['error']}", file=sys.stderr)
    return 0 if not errors else 1


def cmd_encode(args):
    descs = read_descriptions(args.descriptions)
    provider = HashEmbeddingProvider(dim=args.dim, seed=args.seed)
    embeddings = [
        encode_views(d, provider, args.max_len) for _, d in sorted(descs.items())
    ]
    save_embeddings(args.out, embeddings)
    print(f"encoded {len(embeddings)} stickers to {args.out}")
    return 0


def cmd_ablate(args):
    cfg = load_config(args.config)
    splits, text_dim, class_names = resolve_data(cfg)
    base = cfg["fusion"]
    configs = table3_configs(base) if args.table == 3 else table4_configs(base)
    rows = ablation_sweep(
        configs,
        cfg["backbone"],
        cfg["train"],
        text_dim,
        splits.train,
        splits.val,
        num_classes=len(class_names),
        out_dir=os.path.join(cfg["out_dir"], f"table{args.table}"),
        model_seed=cfg["train"].seed,
    )
    print(f"{'configuration':24s} {'accuracy':>9s} {'macro_f1':>9s}")
    for row in rows:
        print(
            f"{row['configuration']:24s} {row['accuracy']:9.4f} "
            f"{row['macro_f1']:9.4f}"
        )
    out_path = os.path.join(cfg["out_dir"], f"table{args.table}.json")
    os.makedirs(cfg["out_dir"], exist_ok=True)
    with open(out_path, "w") as fh:
        json.dump(rows, fh, indent=1)
    print(f"results: {out_path}")
    return 0


def cmd_gradcheck(args):
    worst = 0.0
    for name, err in run_suite(seed=args.seed):
        status = "PASS" if err < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name:20s} max rel error {err:.3e}  {status}")
        worst = max(worst, err)
    return 0 if worst < GRADCHECK_TOLERANCE else 1


def cmd_export_attn(args):
    cfg = load_config(args.config)
    splits, model = _load_checkpoint_model(cfg, args)
    examples = getattr(splits, args.split)
    if args.limit:
        examples = examples[: args.limit]
    written = export_attention(model, examples, args.out)
    print(f"wrote {len(written)} attention maps to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mghft",
        description="Hierarchical multimodal fusion for sticker emotion recognition",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from an experiment config")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("describe", help="generate multi-view descriptions via an MLLM endpoint")
    p.add_argument("--images", required=True)
    p.add_argument("--endpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cache", default=None)
    p.add_argument("--parallel", type=int, default=4)
    p.add_argument("--prompts", default=None)
    p.add_argument("--model", default="default")
    p.set_defaults(fn=cmd_describe)

    p = sub.add_parser("encode", help="encode descriptions into view embeddings")
    p.add_argument("--descriptions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=int, default=512, dest="max_len")
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("ablate", help="run a component or view-order sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--table", type=int, required=True, choices=[3, 4])
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("export-attn", help="export final-stage attention maps")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(fn=cmd_export_attn)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as err:  # noqa: BLE001 - single CLI boundary
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
