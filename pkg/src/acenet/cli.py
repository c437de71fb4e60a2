"""Command-line front end.

Subcommands:

  train      fit a network on a manifest of labeled samples
  infer      run a checkpoint over one image, write probability map + mask
  eval       score predictions against ground truth (em or vessel protocol)
  ablate     train the ten-configuration feature grid on synthetic data
  gradcheck  finite-difference audit of every primitive and a full graph
  synth      generate a synthetic labeled dataset with a manifest
  describe   print the per-block architecture table for a config

Exit codes: 0 success, 1 usage or configuration problem (bad flags,
malformed config, missing inputs), 2 runtime or numerical failure
(non-finite loss, corrupt checkpoint, failed gradient check).

Run configuration is a single JSON file with optional sections
"network", "train", "augment", "loss", "data" and "out_dir"; omitted
keys take module defaults, unknown keys are rejected, and the fully
resolved configuration is echoed into the output directory as
config.json before any training starts.
"""

import argparse
import json
import os
import sys
import traceback
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

from acenet.autodiff import Tensor
from acenet.checks import full_graph_check, per_op_checks
from acenet.data import (
    DatasetManifest,
    LabeledSample,
    _load_ids,
    _save_ids,
    load_checkpoint,
    load_image,
    load_manifest,
    load_sample,
    reflect_pad_sample,
    save_image,
    save_manifest,
    save_sample,
    synth_membranes,
    synth_vessels,
)
from acenet.errors import AcenetError, ConfigError, DataError, UsageError
from acenet.graph import Network, NetworkConfig, build_network, describe
from acenet.metrics import (
    auc,
    connected_components,
    metrics_line,
    metrics_table,
    overlay,
    pixel_metrics,
    vrand,
)
from acenet.training import AugmentConfig, LossWeights, TrainConfig, train


# ------------------------------------------------------------ run config

@dataclass
class RunConfig:
    network: NetworkConfig
    train: TrainConfig
    loss: LossWeights
    manifest: Optional[str]
    out_dir: Optional[str]


_SECTIONS = ("network", "train", "augment", "loss", "data", "out_dir")


def _check_keys(doc: dict, allowed, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {where!r} must be a JSON object")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in config section {where!r}: {unknown}")


def load_run_config(path) -> RunConfig:
    """Parse and validate a run-config JSON file (defaults applied)."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a JSON object at top level")
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {unknown} "
                          f"(expected a subset of {list(_SECTIONS)})")

    net_doc = dict(doc.get("network", {}))
    _check_keys(net_doc, NetworkConfig.__dataclass_fields__, "network")
    for key in ("aspp_rates", "icm_enabled", "msa_raw_image"):
        if isinstance(net_doc.get(key), list):
            net_doc[key] = tuple(net_doc[key])
    network = NetworkConfig(**net_doc)

    aug_doc = dict(doc.get("augment", {}))
    _check_keys(aug_doc, AugmentConfig.__dataclass_fields__, "augment")
    if isinstance(aug_doc.get("zoom_range"), list):
        aug_doc["zoom_range"] = tuple(aug_doc["zoom_range"])
    augment = AugmentConfig(**aug_doc)

    train_doc = dict(doc.get("train", {}))
    train_fields = set(TrainConfig.__dataclass_fields__) - {"augment"}
    if "augment" in train_doc:
        raise ConfigError('augmentation settings belong in the top-level '
                          '"augment" section, not inside "train"')
    _check_keys(train_doc, train_fields, "train")
    train_cfg = TrainConfig(augment=augment, **train_doc)

    loss_doc = dict(doc.get("loss", {}))
    _check_keys(loss_doc, LossWeights.__dataclass_fields__, "loss")
    loss = LossWeights(**loss_doc)

    data_doc = dict(doc.get("data", {}))
    _check_keys(data_doc, ("manifest",), "data")
    manifest = data_doc.get("manifest")

    out_dir = doc.get("out_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError(f"out_dir must be a string, got {out_dir!r}")

    problems = network.problems() + train_cfg.problems() + loss.problems()
    if problems:
        raise ConfigError("invalid run config: " + "; ".join(problems))
    return RunConfig(network=network, train=train_cfg, loss=loss,
                     manifest=manifest, out_dir=out_dir)


def resolved_config_dict(rc: RunConfig) -> dict:
    """Every effective setting, defaults included — what actually ran."""
    t, a = rc.train, rc.train.augment
    return {
        "network": rc.network.to_dict(),
        "train": {"steps": t.steps, "lr": t.lr, "seed": t.seed,
                  "batch_size": t.batch_size,
                  "checkpoint_every": t.checkpoint_every},
        "augment": {"flip_h": a.flip_h, "flip_v": a.flip_v,
                    "rotate": a.rotate,
                    "rotate_max_degrees": a.rotate_max_degrees,
                    "zoom_range": list(a.zoom_range)},
        "loss": {"side_weight": rc.loss.side_weight},
        "data": {"manifest": rc.manifest},
        "out_dir": rc.out_dir,
    }


def _default_run_config() -> RunConfig:
    return RunConfig(network=NetworkConfig(), train=TrainConfig(),
                     loss=LossWeights(), manifest=None, out_dir=None)


# ----------------------------------------------------------- inference

def predict_prob(net: Network, image: Tensor) -> np.ndarray:
    """Foreground-class probability map at the input resolution.

    Pads the image so both extents divide 2^depth, runs the network, takes
    a softmax over the class axis and crops back, so callers never see the
    padding."""
    h, w = image.shape[2], image.shape[3]
    dummy = LabeledSample(image=image, labels=np.zeros((h, w), dtype=np.int64),
                          fov=None, id="infer")
    padded, _ = reflect_pad_sample(dummy, 2 ** net.cfg.depth)
    logits = net.forward(padded.image).final_logits.data
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    prob = e[0, 1] / e.sum(axis=1)[0]
    return prob[:h, :w]


def _stem(path) -> str:
    base = os.path.splitext(os.path.basename(path))[0]
    return base[:-len("_image")] if base.endswith("_image") else base


# ----------------------------------------------------------- commands

def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    if args.seed is not None:
        rc = replace(rc, train=replace(rc.train, seed=args.seed))
    if args.out is not None:
        rc = replace(rc, out_dir=args.out)
    if rc.manifest is None:
        raise ConfigError('no dataset: set "data": {"manifest": PATH} in the config')
    if rc.out_dir is None:
        raise ConfigError("no output directory: set out_dir in the config or pass --out")

    manifest = load_manifest(rc.manifest)
    samples = [load_sample(manifest, i) for i in range(len(manifest.entries))]

    os.makedirs(rc.out_dir, exist_ok=True)
    with open(os.path.join(rc.out_dir, "config.json"), "w") as f:
        json.dump(resolved_config_dict(rc), f, indent=2)
        f.write("\n")

    net = build_network(rc.network, seed=rc.train.seed)
    history = train(net, samples, rc.train, rc.loss, out_dir=rc.out_dir)
    print(f"trained {len(history)} steps on {len(samples)} samples "
          f"({net.parameter_count()} parameters)")
    if history:
        print(f"final loss {history[-1].total!r}")
    print(f"artifacts in {rc.out_dir}")
    return 0


def cmd_infer(args) -> int:
    net, _, step = load_checkpoint(args.checkpoint)
    image = load_image(args.image)
    if image.shape[1] != net.cfg.in_channels:
        raise DataError(f"image {args.image} has {image.shape[1]} channels, "
                        f"checkpoint network expects {net.cfg.in_channels}")
    prob = predict_prob(net, image)
    mask = prob >= args.threshold

    os.makedirs(args.out, exist_ok=True)
    stem = _stem(args.image)
    prob_path = os.path.join(args.out, f"{stem}_prob.png")
    mask_path = os.path.join(args.out, f"{stem}_mask.png")
    save_image(Tensor(prob[None, None]), prob_path)
    _save_ids(mask.astype(np.uint8) * 255, mask_path)
    print(f"checkpoint step {step}; wrote {prob_path} and {mask_path}")
    return 0


def _eval_ids(pred_dir, gt_dir, pred_suffix) -> List[str]:
    def ids_with(directory, suffix):
        try:
            names = os.listdir(directory)
        except OSError as e:
            raise DataError(f"cannot list {directory}: {e}")
        return {n[:-len(suffix)] for n in names if n.endswith(suffix)}

    pred_ids = ids_with(pred_dir, pred_suffix)
    gt_ids = ids_with(gt_dir, "_labels.png")
    if pred_ids != gt_ids:
        parts = []
        missing_pred = sorted(gt_ids - pred_ids)
        missing_gt = sorted(pred_ids - gt_ids)
        if missing_pred:
            parts.append(f"missing from {pred_dir}: {missing_pred}")
        if missing_gt:
            parts.append(f"missing from {gt_dir}: {missing_gt}")
        raise DataError("prediction/ground-truth ids do not match; " + "; ".join(parts))
    if not pred_ids:
        raise DataError(f"no *{pred_suffix} files in {pred_dir}")
    return sorted(pred_ids)


def cmd_eval(args) -> int:
    out_dir = args.out or args.pred
    lines = []

    if args.mode == "em":
        ids = _eval_ids(args.pred, args.gt, "_mask.png")
        scores = []
        for sid in ids:
            pred_mask = _load_ids(os.path.join(args.pred, f"{sid}_mask.png")) > 0
            gt_mask = _load_ids(os.path.join(args.gt, f"{sid}_labels.png")) > 0
            v = vrand(connected_components(pred_mask), connected_components(gt_mask))
            scores.append(v)
            lines.append(metrics_line({"id": sid, "vrand": v}))
        lines.append(metrics_line({"mean_vrand": float(np.mean(scores))}))
    else:
        ids = _eval_ids(args.pred, args.gt, "_prob.png")
        sums = {"sensitivity": [], "specificity": [], "accuracy": [], "auc": []}
        os.makedirs(out_dir, exist_ok=True)
        for sid in ids:
            prob = load_image(os.path.join(args.pred, f"{sid}_prob.png")).data[0, 0]
            gt_mask = _load_ids(os.path.join(args.gt, f"{sid}_labels.png")) > 0
            fov_path = os.path.join(args.gt, f"{sid}_fov.png")
            fov = _load_ids(fov_path) > 0 if os.path.exists(fov_path) else None
            _, sens, spec, acc = pixel_metrics(prob, gt_mask, fov, threshold=0.5)
            area = auc(prob, gt_mask, fov)
            record = {"id": sid, "sensitivity": sens, "specificity": spec,
                      "accuracy": acc, "auc": area}
            lines.append(metrics_line({k: v for k, v in record.items() if v is not None}))
            for key in sums:
                if record[key] is not None:
                    sums[key].append(record[key])
            image_path = os.path.join(args.gt, f"{sid}_image.png")
            base = (load_image(image_path).data[0] if os.path.exists(image_path)
                    else np.zeros_like(prob))
            ov = overlay(prob >= 0.5, gt_mask, base)
            save_image(Tensor(ov[None]), os.path.join(out_dir, f"{sid}_overlay.png"))
        means = {k: float(np.mean(v)) if v else float("nan") for k, v in sums.items()}
        lines.append("")
        lines.append(metrics_table(means))

    report = "\n".join(lines)
    print(report)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval_report.txt"), "w") as f:
            f.write(report + "\n")
    return 0


def ablation_rows() -> List[Tuple[str, dict]]:
    """The ten-configuration grid: fix one feature family, sweep the other.

    Every row shares the contracting/expansive backbone with dense
    connections and deep supervision; the sweeps vary which blocks get the
    context module ("I") and which aggregation stages see the raw image
    ("M")."""
    all_blocks = (1, 2, 3, 4)
    rows: List[Tuple[str, dict]] = [
        ("C+E+I+D", {"icm_enabled": all_blocks, "msa_raw_image": ()})]
    for k in range(1, 5):
        raw = tuple(range(1, k + 1))
        label = f"C+E+I+D+M({','.join(map(str, raw))})"
        rows.append((label, {"icm_enabled": all_blocks, "msa_raw_image": raw}))
    rows.append(("C+E+M+D", {"icm_enabled": (), "msa_raw_image": (1, 2)}))
    for k in range(1, 5):
        icm = tuple(range(1, k + 1))
        label = f"C+E+M+D+I({','.join(map(str, icm))})"
        rows.append((label, {"icm_enabled": icm, "msa_raw_image": (1, 2)}))
    return rows


def _mean_vrand(net: Network, samples: List[LabeledSample]) -> float:
    scores = []
    for s in samples:
        prob = predict_prob(net, s.image)
        pred = connected_components(prob >= 0.5)
        gt = connected_components(s.labels > 0)
        scores.append(vrand(pred, gt))
    return float(np.mean(scores))


def cmd_ablate(args) -> int:
    train_samples = [synth_membranes(args.seed + i, h=args.size, w=args.size,
                                     n_cells=args.cells)
                     for i in range(args.train_count)]
    test_samples = [synth_membranes(args.seed + 1000 + i, h=args.size, w=args.size,
                                    n_cells=args.cells)
                    for i in range(args.test_count)]
    tc = TrainConfig(steps=args.steps, lr=args.lr, seed=args.seed,
                     augment=AugmentConfig.disabled())

    results = []
    for label, overrides in ablation_rows():
        cfg = NetworkConfig(depth=4, base_width=args.width, **overrides)
        net = Network(cfg, seed=args.seed)
        history = train(net, train_samples, tc)
        score = _mean_vrand(net, test_samples)
        results.append((label, score))
        print(f"{label:<22} vrand {score:.4f}  (final loss {history[-1].total:.4f})"
              if history else f"{label:<22} vrand {score:.4f}  (untrained)")

    width = max(len(label) for label, _ in results)
    table = [f"{'configuration':<{width}}  vrand"]
    table += [f"{label:<{width}}  {score:.4f}" for label, score in results]
    table.append("")
    table.append(f"desk-scale synthetic benchmark ({args.train_count} train / "
                 f"{args.test_count} test images, {args.size}x{args.size}, "
                 f"{args.steps} steps); not comparable to published "
                 f"full-scale results")
    report = "\n".join(table)
    print()
    print(report)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "ablation.tsv"), "w") as f:
            for label, score in results:
                f.write(f"{label}\t{score!r}\n")
        with open(os.path.join(args.out, "ablation.txt"), "w") as f:
            f.write(report + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    results = per_op_checks(seed=args.seed)
    if not args.skip_full:
        results.append(full_graph_check())
    for r in results:
        flag = "ok" if r.ok else "FAIL"
        print(f"{r.name:<36} max rel err {r.max_error:.3e}  "
              f"threshold {r.threshold:g}  {flag}")
    failing = [r.name for r in results if not r.ok]
    if failing:
        print(f"gradient check failed for: {', '.join(failing)}", file=sys.stderr)
        return 2
    print("all gradient checks passed")
    return 0


def cmd_synth(args) -> int:
    entries = []
    for i in range(args.count):
        if args.kind == "membranes":
            sample = synth_membranes(args.seed + i, h=args.size, w=args.size,
                                     n_cells=args.cells)
        else:
            sample = synth_vessels(args.seed + i, h=args.size, w=args.size,
                                   branches=args.branches)
        entries.append(save_sample(sample, args.out, sample.id))
    manifest = DatasetManifest(split=args.split, channels=1, entries=entries,
                               base_dir=args.out)
    manifest_path = os.path.join(args.out, "manifest.json")
    save_manifest(manifest, manifest_path)
    print(f"wrote {args.count} {args.kind} samples and {manifest_path}")
    return 0


def cmd_describe(args) -> int:
    if args.config is not None:
        rc = load_run_config(args.config)
        cfg = rc.network
    else:
        cfg = NetworkConfig()
    net = build_network(cfg, seed=args.seed if args.seed is not None else 0)
    print(describe(net, height=args.height, width=args.width))
    return 0


# ------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="acenet",
        description="Encoder-decoder segmentation with context modules, "
                    "multi-source aggregation and deep supervision.",
        epilog="exit codes: 0 success, 1 usage/config error, 2 runtime/numerical error")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a network on a manifest dataset")
    p.add_argument("--config", required=True, help="run-config JSON path")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--out", default=None, help="override out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a checkpoint over one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="directory for prob/mask PNGs")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="directory of *_mask.png / *_prob.png")
    p.add_argument("--gt", required=True, help="directory of *_labels.png (+ *_fov.png)")
    p.add_argument("--mode", required=True, choices=("em", "vessel"))
    p.add_argument("--out", default=None, help="directory for report and overlays")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the ten-configuration feature grid")
    p.add_argument("--out", default=None, help="directory for the result table")
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--width", type=int, default=8, help="base channel width")
    p.add_argument("--size", type=int, default=64, help="synthetic image size")
    p.add_argument("--cells", type=int, default=8)
    p.add_argument("--train-count", type=int, default=4)
    p.add_argument("--test-count", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference audit of the engine")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-full", action="store_true",
                   help="only check individual primitives")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--kind", required=True, choices=("membranes", "vessels"))
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--cells", type=int, default=8, help="membranes only")
    p.add_argument("--branches", type=int, default=5, help="vessels only")
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("describe", help="print the per-block architecture table")
    p.add_argument("--config", default=None, help="run-config JSON (network section)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--height", type=int, default=None, help="probe image height")
    p.add_argument("--width", type=int, default=None, help="probe image width")
    p.set_defaults(func=cmd_describe)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return int(args.func(args) or 0)
    except (ConfigError, DataError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except AcenetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
