"""``sapool`` command line: train, eval, gradcheck, flops, heatmap, prune-finetune.

Each command validates the configuration before doing any work.  Failures
print one line ``<category>: <message>`` on stderr and exit with the
category's code.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig
from .errors import ConfigError, DimensionError, FormatError, NumericError, SapoolError

EXIT_CODES = {"config": 2, "format": 3, "dimension": 4, "schedule": 5, "numeric": 6, "contract": 7}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--precision", choices=("f32", "f64"), help="override run.precision")
    p.add_argument("--out", default="out", help="output directory (created if missing)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sapool", description="Self-attentive pooling experiments on small CNN backbones.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _common(sub.add_parser("train", help="train a model; writes report.csv, model.ckpt, config.ini"))
    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint on the test split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    _common(sub.add_parser("gradcheck", help="finite-difference check of every op and layer (always f64)"))
    _common(sub.add_parser("flops", help="per-layer FLOPs and activation memory as CSV"))
    p = sub.add_parser("heatmap", help="Grad-CAM heatmaps at pooling-layer inputs as PGM")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="P5 PGM (1 channel) or .npy array [C,H,W] in [0,1]")
    p.add_argument("--layer", help="pooling layer id (pool0, pool1, ...); all when omitted")
    p.add_argument("--class-id", type=int, help="target class; predicted class when omitted")
    p = sub.add_parser("prune-finetune", help="prune stage-1 channels of a pretrained checkpoint and fine-tune")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint from `sapool train`")
    return parser


def _config(args) -> RunConfig:
    return RunConfig.load(args.config).override(args.seed, args.precision)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    from .experiment import run_training, save_model

    cfg = _config(args)
    out = _outdir(args)
    res = run_training(cfg, on_epoch=lambda r: print(f"epoch {r.epoch}: loss {r.train_loss:.4f} test_acc {r.test_acc:.4f}"))
    res.report.write_csv(out / "report.csv")
    save_model(out / "model.ckpt", res.net)
    (out / "config.ini").write_text(cfg.to_text())
    print(f"test_acc {res.test_acc:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .experiment import build_model, load_datasets, load_model
    from .train import evaluate

    cfg = _config(args)
    with T.precision(cfg.run.precision):
        train_set, test_set = load_datasets(cfg)
        c, h, w = test_set.shape
        net = build_model(cfg, c, (h, w), test_set.num_classes)
        load_model(args.checkpoint, net)
        acc = evaluate(net, test_set)
    print(f"accuracy {acc:.6f}")
    return 0


def gradcheck_rows(cfg: RunConfig) -> list[tuple[str, float, bool]]:
    from .gradcheck import run_op_suite
    from .layercheck import run_layer_suite

    rows = [(r.name, r.max_rel_err, r.passed) for r in run_op_suite(cfg.run.seed)]
    rows += [(r.name, r.max_rel_err, r.passed) for r in run_layer_suite(cfg)]
    return rows


def cmd_gradcheck(args) -> int:
    cfg = _config(args).override(precision="f64")
    out = _outdir(args)
    rows = gradcheck_rows(cfg)
    with open(out / "gradcheck.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("check", "max_rel_err", "result"))
        for name, err, ok in rows:
            w.writerow((name, f"{err:.3e}", "PASS" if ok else "FAIL"))
    for name, err, ok in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {err:.3e}  {name}")
    failed = sum(not ok for _, _, ok in rows)
    print(f"{len(rows) - failed}/{len(rows)} passed")
    if failed:
        raise NumericError(f"{failed} gradient checks failed")
    return 0


def cmd_flops(args) -> int:
    from .experiment import build_model, data_geometry
    from .profile import activation_memory_profile, count_flops

    cfg = _config(args)
    out = _outdir(args)
    c, hw, classes = data_geometry(cfg)
    with T.precision(cfg.run.precision):
        net = build_model(cfg, c, hw, classes)
        shape = (1, c) + tuple(hw)
        flops = count_flops(net, shape)
        mem = activation_memory_profile(net, shape)
    with open(out / "flops.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("layer", "flops"))
        for name, v in flops.per_layer.items():
            w.writerow((name, v))
        w.writerow(("total", flops.total))
    with open(out / "memory.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("layer", "shape", "bytes"))
        for l in mem.layers:
            w.writerow((l.name, "x".join(map(str, l.shape)), l.bytes))
        w.writerow(("peak", "", mem.peak_bytes))
        w.writerow(("stage1", "", mem.stage_bytes("stage1")))
    print(f"total_flops {flops.total}")
    print(f"peak_act_bytes {mem.peak_bytes}")
    print(f"stage1_act_bytes {mem.stage_bytes('stage1')}")
    return 0


def _read_image(path: str) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"image not found: {path}")
    if p.suffix == ".npy":
        arr = np.load(p)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise FormatError(f"{path}: expected [C,H,W] array, got shape {arr.shape}")
        return arr.astype(np.float64)
    from .gradcam import read_pgm

    return read_pgm(p)[None].astype(np.float64) / 255.0


def cmd_heatmap(args) -> int:
    from .experiment import build_model, load_datasets, load_model
    from .gradcam import gradcam_heatmap, heatmap_layers, write_pgm

    cfg = _config(args)
    out = _outdir(args)
    img = _read_image(args.image)
    with T.precision(cfg.run.precision):
        train_set, _ = load_datasets(cfg)
        if img.shape != train_set.shape:
            raise DimensionError(f"image shape {img.shape} does not match the dataset's {train_set.shape}")
        m = np.asarray(train_set.mean).reshape(-1, 1, 1)
        s = np.asarray(train_set.std).reshape(-1, 1, 1)
        x = (img - m) / s
        net = build_model(cfg, img.shape[0], img.shape[1:], train_set.num_classes)
        load_model(args.checkpoint, net)
        layers = [args.layer] if args.layer else list(heatmap_layers(net))
        cls = args.class_id
        if cls is None:
            net.eval()
            with T.no_grad():
                cls = int(np.argmax(net(T.Tensor(x[None])).data[0]))
        for layer in layers:
            heat = gradcam_heatmap(net, x, cls, layer)
            path = out / f"heatmap_{layer}_class{cls}.pgm"
            write_pgm(path, heat)
            print(path)
    return 0


def cmd_prune_finetune(args) -> int:
    from .experiment import run_prune_finetune, save_model

    cfg = _config(args)
    out = _outdir(args)
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"pretrained checkpoint not found: {args.checkpoint} (run `sapool train` first)")
    res = run_prune_finetune(cfg, args.checkpoint)
    res.report.write_csv(out / "report.csv")
    save_model(out / "pruned.ckpt", res.net, res.prune)
    with open(out / "masks.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("epoch", "layer", "active", "target"))
        for rec in res.prune.history:
            for layer, active in rec["active"].items():
                w.writerow((rec["epoch"], layer, active, res.prune.targets[layer]))
    (out / "config.ini").write_text(cfg.to_text())
    print(f"test_acc {res.test_acc:.4f}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "flops": cmd_flops,
    "heatmap": cmd_heatmap,
    "prune-finetune": cmd_prune_finetune,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except SapoolError as exc:
        category = getattr(exc, "category", "error")
        print(f"{category}: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_CODES.get(category, 1)


if __name__ == "__main__":
    sys.exit(main())
