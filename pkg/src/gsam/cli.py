"""``gsam`` command line: gen, train, eval, macs, sweep, gradcheck, ablate.

Exit codes: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import torch

from .adapter import AdapterConfig, VARIANT_NAMES, ablation_variants, variant_config
from .cnn_encoder import CnnConfig
from .data import AugmentConfig, PngDataset, export_dataset, generate_shapes
from .image_encoder import DEFAULT_FROZEN, EncoderConfig, FreezePolicy
from .macs import count_macs, parse_size, rows_to_csv, size_sweep
from .model import GSAM, ModelConfig, load_checkpoint, parameter_summary
from .trainer import TrainConfig, evaluate, train

log = logging.getLogger("gsam")


class UsageError(ValueError):
    """Bad or missing arguments discovered after parsing; exits with code 2."""


@dataclass
class RunConfig:
    """Flat, JSON-serializable merge of model, training and augmentation settings."""

    # model
    num_classes: int = 2
    patch_size: int = 16
    embed_dim: int = 96
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    use_peg: bool = True
    bottleneck_dim: int = 8
    rates: Tuple[int, int, int] = (12, 24, 36)
    adapter_scale: float = 1.0
    adapter_activation: str = "relu"
    adapter_variant: str = "full"
    stage_channels: Tuple[int, ...] = (16, 32, 64)
    tap_stage: int = 2
    separate_projections: bool = False
    decoder_channels: Tuple[int, ...] = (64, 32, 16)
    freeze: Tuple[str, ...] = DEFAULT_FROZEN
    # training
    epochs: int = 20
    batch_size: int = 8
    lr0: float = 3e-4
    seed: int = 0
    # augmentation
    crop: Tuple[int, int] = (64, 64)
    pad_before_crop: bool = False
    hflip: bool = True
    rot90: bool = True
    # paths / data split
    data: Optional[str] = None
    val_data: Optional[str] = None
    val_fraction: float = 0.2
    out: Optional[str] = None

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        if not path:
            return cls()
        raw = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        for k, v in raw.items():
            setattr(cfg, k, tuple(v) if isinstance(v, list) else v)
        return cfg

    def model_config(self) -> ModelConfig:
        adapter = AdapterConfig(self.embed_dim, self.bottleneck_dim, rates=tuple(self.rates),
                                scale=self.adapter_scale, activation=self.adapter_activation)
        adapter = variant_config(adapter, self.adapter_variant)
        enc = EncoderConfig(self.patch_size, self.embed_dim, self.depth, self.num_heads, self.mlp_ratio,
                            adapter, self.use_peg)
        cnn = CnnConfig(tuple(self.stage_channels), self.tap_stage, self.embed_dim, self.separate_projections)
        return ModelConfig(enc, cnn, self.num_classes, tuple(self.decoder_channels),
                           FreezePolicy(tuple(self.freeze)))

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr0=self.lr0, seed=self.seed)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(tuple(self.crop), self.pad_before_crop, self.hflip, self.rot90, self.seed)

    def to_json(self) -> str:
        return json.dumps({k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()},
                          indent=2, sort_keys=True) + "\n"


def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _size(text: str) -> Tuple[int, int]:
    try:
        h, w = parse_size(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text}")
    return h, w


def _size_list(text: str) -> List[Tuple[int, int]]:
    return [_size(t) for t in text.split(",") if t]


def cmd_gen(args) -> int:
    samples = generate_shapes(args.n, args.size, args.classes, args.seed)
    out = export_dataset(samples, args.out, args.classes, args.seed)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def _split(cfg: RunConfig):
    data = PngDataset(cfg.data)
    samples = data.samples()
    if cfg.val_data:
        return samples, PngDataset(cfg.val_data).samples(), data.num_classes
    n_val = int(round(len(samples) * cfg.val_fraction))
    if n_val == 0 or n_val >= len(samples):
        raise ValueError(f"val_fraction {cfg.val_fraction} leaves no train or no val samples")
    return samples[:-n_val], samples[-n_val:], data.num_classes


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    for key in ("data", "val_data", "out", "crop", "adapter_variant", "epochs", "lr0", "batch_size", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(cfg, key, v)
    if not cfg.data:
        raise UsageError("no dataset given (--data or 'data' in the config file)")
    if not cfg.out:
        raise UsageError("no output directory given (--out or 'out' in the config file)")
    return cfg


def run_training(cfg: RunConfig) -> dict:
    train_set, val_set, num_classes = _split(cfg)
    cfg.num_classes = num_classes
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(cfg.to_json())
    torch.manual_seed(cfg.seed)
    model = GSAM(cfg.model_config())
    history = train(model, train_set, cfg.train_config(), cfg.augment_config(), val=val_set, out_dir=out)
    per_class, mean = evaluate(model, val_set, num_classes).iou()
    total, learnable, frozen = parameter_summary(model)
    result = {"per_class_iou": per_class, "miou": mean, "final_loss": history.loss[-1],
              "params_total": total, "params_learnable": learnable, "params_frozen": frozen}
    (out / "eval.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


def cmd_train(args) -> int:
    result = run_training(_run_config(args))
    print(json.dumps(result, indent=2))
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    data = PngDataset(args.data)
    per_class, mean = evaluate(model, data.samples(), model.cfg.num_classes).iou()
    result = {"per_class_iou": per_class, "miou": mean}
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def _model_config_from(args) -> ModelConfig:
    if getattr(args, "checkpoint", None):
        return load_checkpoint(args.checkpoint)[0].cfg
    return RunConfig.load(args.config).model_config()


def cmd_macs(args) -> int:
    cfg = _model_config_from(args)
    report = count_macs(cfg, args.size)
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n")
    row = {"size_h": args.size[0], "size_w": args.size[1], "total_macs": report.total_macs,
           "total_params": report.total_params}
    print(rows_to_csv([row]), end="")
    return 0


def cmd_sweep(args) -> int:
    rows = size_sweep(_model_config_from(args), args.sizes)
    text = rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_gradcheck_suite

    reports = run_gradcheck_suite(args.tolerance, tuple(args.only or ()))
    worst = 0.0
    failed = []
    for name, rep in reports.items():
        status = "ok" if rep.passed else "FAIL"
        print(f"{name:28s} max_rel_error={rep.max_rel_error:.3e} {status}")
        worst = max(worst, rep.max_rel_error)
        if not rep.passed:
            failed.append(name)
    print(f"max relative error over suite: {worst:.3e} (tolerance {args.tolerance:g})")
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def run_ablation(cfg: RunConfig) -> List[dict]:
    base = RunConfig(**{**asdict(cfg), "adapter_variant": "full"}).model_config().encoder.adapter
    rows = []
    root = Path(cfg.out)
    for v in ablation_variants(base):
        run_cfg = replace(cfg, adapter_variant=v.key, out=str(root / v.key))
        log.info("ablation: %s", v.name)
        result = run_training(run_cfg)
        model, _ = load_checkpoint(Path(run_cfg.out) / "checkpoint.pt")
        adapter_params = sum(p.numel() for n, p in model.named_parameters() if ".adapter." in n)
        rows.append({"variant": v.key, "name": v.name, "miou": result["miou"],
                     "params_total": result["params_total"], "params_learnable": result["params_learnable"],
                     "params_adapter": adapter_params})
    return rows


def format_table(rows: Sequence[dict]) -> str:
    lines = [f"{'Method':34s} {'mIoU':>7s} {'adapter params':>15s} {'learnable':>10s}"]
    for r in rows:
        lines.append(f"{r['name']:34s} {100 * r['miou']:7.2f} {r['params_adapter']:15d} {r['params_learnable']:10d}")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    rows = run_ablation(cfg)
    out = Path(cfg.out)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    with open(out / "ablation.csv", "w") as f:
        f.write("variant,name,miou,params_adapter,params_learnable,params_total\n")
        for r in rows:
            f.write(f"{r['variant']},\"{r['name']}\",{r['miou']!r},{r['params_adapter']},"
                    f"{r['params_learnable']},{r['params_total']}\n")
    print(format_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gsam", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=_positive_int, default=1,
                   help="torch intra-op threads (1 keeps runs bit-reproducible)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic shapes dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=_positive_int, required=True)
    g.add_argument("--size", type=_size, default=(128, 128))
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    def run_args(sp):
        sp.add_argument("--config", help="JSON RunConfig file; flags override it")
        sp.add_argument("--data", help="dataset directory (or 'data' in the config)")
        sp.add_argument("--val-data", dest="val_data")
        sp.add_argument("--out", help="output directory (or 'out' in the config)")
        sp.add_argument("--crop", type=_size)
        sp.add_argument("--epochs", type=_positive_int)
        sp.add_argument("--lr", dest="lr0", type=float)
        sp.add_argument("--batch-size", dest="batch_size", type=_positive_int)
        sp.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train with random crops, evaluate at full size")
    run_args(t)
    t.add_argument("--adapter-variant", dest="adapter_variant", choices=list(VARIANT_NAMES))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-class IoU and mIoU of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("macs", help="per-layer MAC breakdown at one input size")
    m.add_argument("--config")
    m.add_argument("--checkpoint")
    m.add_argument("--size", type=_size, default=(128, 128))
    m.add_argument("--json", help="write the per-layer breakdown here")
    m.set_defaults(func=cmd_macs)

    s = sub.add_parser("sweep", help="total MACs over several input sizes (CSV)")
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--sizes", type=_size_list, default=_size_list("32,64,128,256"))
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--only", nargs="*", help="run only cases whose name starts with these")
    gc.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train every adapter ablation variant")
    run_args(a)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"gsam {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, RuntimeError) as e:
        print(f"gsam {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
