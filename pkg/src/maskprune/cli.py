"""Command-line entry point.

    maskprune <mode> --config <path> [--checkpoint <path>] [--dataset <dir>] [--out <dir>]

Modes: gen, train, prune, eval, report, gradcheck. Experiment parameters
live in the config file; flags carry only paths. MASKPRUNE_THREADS caps
internal parallelism (scene generation); outputs are identical for any
value. Artifact files contain no timestamps, so re-running a command with
identical inputs rewrites identical bytes.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import fileio, gradcheck, metrics, pruner, synth, trainer
from .config import RunConfig, parse_config
from .errors import ConfigError, MaskpruneError
from .losses import loss_history_csv
from .masking import mask_stats, mask_stats_csv
from .network import Network
from .tensor import Tensor

log = logging.getLogger("maskprune.cli")


def _require(value, flag: str, mode: str):
    if value is None:
        raise ConfigError(f"mode {mode!r} requires {flag}")
    return value


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(cfg: RunConfig, out) -> int:
    out = _outdir(out)
    spec = cfg.scene_spec()
    synth.generate_dataset(spec, cfg.train_scenes, out, "train")
    synth.generate_dataset(spec, cfg.eval_scenes, out, "eval")
    (out / "scenes.json").write_text(json.dumps(
        spec.__dict__, sort_keys=True, separators=(",", ":")) + "\n")
    log.info("wrote %d train and %d eval scenes under %s",
             cfg.train_scenes, cfg.eval_scenes, out)
    return 0


def cmd_train(cfg: RunConfig, dataset, out, checkpoint=None) -> int:
    out = _outdir(out)
    scenes = synth.load_dataset(dataset, "train")
    tconf = cfg.train_config()
    if checkpoint is not None:
        net, meta, _, adam = trainer.load_checkpoint(checkpoint)
        start_epoch = int(meta["epoch"])
        log.info("resuming %s from epoch %d", checkpoint, start_epoch)
    else:
        net = Network.build(cfg.network_spec(), cfg.seed, mask_init=cfg.mask_init)
        adam, start_epoch = None, 0
    result = trainer.train(net, scenes, tconf, start_epoch=start_epoch, adam=adam)

    trainer.save_checkpoint(out / "checkpoint.mpck", net, result.adam,
                            tconf.epochs, config=tconf, label=result.label)
    (out / "loss_history.csv").write_text(loss_history_csv(result.step_reports))
    registry = net.mask_registry()
    if registry:
        (out / "mask_stats.csv").write_text(mask_stats_csv(mask_stats(registry)))
        history_lines = ["epoch,layer,n_i,kept,removed"]
        for epoch, rows in result.mask_history:
            for name, n, kept, removed in rows:
                history_lines.append(f"{epoch},{name},{n},{kept},{removed}")
        (out / "mask_history.csv").write_text("\n".join(history_lines) + "\n")
    summary = [
        f"label: {result.label}",
        f"epochs: {tconf.epochs}",
        f"final_task_loss: {result.step_reports[-1].l_total - tconf.mask_loss_coefficient * result.step_reports[-1].l_mask - tconf.weight_l1_lambda * result.step_reports[-1].l_weight_l1!r}",
        f"final_total_loss: {result.step_reports[-1].l_total!r}",
        f"final_sparsity: {result.sparsity_history[-1]!r}",
        f"parameter_count: {net.parameter_count()}",
        f"masked_parameter_count: {net.masked_parameter_count()}",
    ]
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    log.info("training done: %s", summary[-3])
    return 0


def cmd_prune(checkpoint, out, trials: int = 100, tol: float = 1e-6) -> int:
    out = _outdir(out)
    net, meta, flags, _ = trainer.load_checkpoint(checkpoint)
    if flags & fileio.FLAG_PRUNED:
        raise ConfigError(f"{checkpoint} is already a pruned checkpoint")
    pruned, report = pruner.export_pruned(net)
    equiv = pruner.verify_equivalence(net, pruned, trials=trials, tol=tol)
    trainer.save_checkpoint(out / "pruned.mpck", pruned, None, int(meta.get("epoch", 0)),
                            label=meta.get("label", ""), flags=fileio.FLAG_PRUNED)
    (out / "prune_report.csv").write_text(report.csv())
    (out / "prune_report.txt").write_text(report.text())
    print(report.text(), end="")
    print(equiv.describe())
    if not equiv.passed:
        log.error("pruned network is not equivalent to the masked one")
        return 3
    log.info("pruned checkpoint written to %s", out / "pruned.mpck")
    return 0


def _evaluate_net(net: Network, scenes, cfg: RunConfig) -> metrics.DepthEvalResult:
    per_scene = []
    w = cfg.width
    for scene in scenes:
        disparities = net.forward(Tensor(scene.left))
        pred_px = disparities[0].d_l.data[0, 0] * w
        pred_depth = metrics.disparity_to_depth(pred_px, cfg.focal_baseline)
        gt_depth = metrics.disparity_to_depth(scene.disparity[0, 0], cfg.focal_baseline)
        per_scene.append(metrics.depth_metrics(
            pred_depth, gt_depth, valid_mask=scene.valid[0, 0],
            focal_baseline=cfg.focal_baseline))
    return metrics.aggregate_results(per_scene)


def cmd_eval(cfg: RunConfig, checkpoint, dataset, out) -> int:
    out = _outdir(out)
    net, meta, flags, _ = trainer.load_checkpoint(checkpoint)
    scenes = synth.load_dataset(dataset, "eval")
    result = _evaluate_net(net, scenes, cfg)
    label = meta.get("label", "") or "run"
    if flags & fileio.FLAG_PRUNED:
        label += " (pruned)"
    rows = [(label, result, net.parameter_count())]
    (out / "eval.csv").write_text(metrics.results_csv(rows))
    (out / "eval.txt").write_text(metrics.results_text(rows))
    print(metrics.results_text(rows), end="")
    return 0


def cmd_report(checkpoint, out) -> int:
    out = _outdir(out)
    net, meta, flags, _ = trainer.load_checkpoint(checkpoint)
    registry = net.mask_registry()
    if not registry:
        raise ConfigError(f"{checkpoint} has no masked layers to report on")
    rows = mask_stats(registry)
    (out / "mask_stats.csv").write_text(mask_stats_csv(rows))
    lines = []
    for section, prefix in (("encoder", True), ("decoder", False)):
        lines.append(f"-- {section} --")
        for name, n, kept, removed in rows:
            if name.startswith("enc") != prefix:
                continue
            bar = "#" * removed
            lines.append(f"{name:<10} n={n:<4} removed={removed:<4} {bar}")
    text = "\n".join(lines) + "\n"
    (out / "mask_report.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_gradcheck() -> int:
    results = gradcheck.run_suite()
    worst: dict[str, float] = {}
    ok = True
    for name, res in results:
        base = name.split(" seed=")[0]
        worst[base] = max(worst.get(base, 0.0), res.max_rel_error)
        if not res.passed:
            ok = False
            print(f"FAIL {name}: {res.describe()}")
    for base in sorted(worst):
        print(f"{'pass' if ok else '----'} {base:<24} max rel err {worst[base]:.3e}")
    print("gradcheck:", "all passed" if ok else "FAILURES above")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="maskprune",
        description="Train per-filter binary masks jointly with a network, "
                    "then export a physically smaller equivalent model.")
    parser.add_argument("mode", choices=["gen", "train", "prune", "eval", "report", "gradcheck"])
    parser.add_argument("--config", help="key=value experiment definition")
    parser.add_argument("--checkpoint", help="checkpoint file (train resume / prune / eval / report)")
    parser.add_argument("--dataset", help="dataset root directory (train / eval)")
    parser.add_argument("--out", help="output directory")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.mode == "gradcheck":
            return cmd_gradcheck()
        cfg = parse_config(_require(args.config, "--config", args.mode)) \
            if args.mode != "report" and args.mode != "prune" else None
        if args.mode == "gen":
            return cmd_gen(cfg, _require(args.out, "--out", args.mode))
        if args.mode == "train":
            return cmd_train(cfg, _require(args.dataset, "--dataset", args.mode),
                             _require(args.out, "--out", args.mode), args.checkpoint)
        if args.mode == "prune":
            return cmd_prune(_require(args.checkpoint, "--checkpoint", args.mode),
                             _require(args.out, "--out", args.mode))
        if args.mode == "eval":
            return cmd_eval(cfg, _require(args.checkpoint, "--checkpoint", args.mode),
                            _require(args.dataset, "--dataset", args.mode),
                            _require(args.out, "--out", args.mode))
        return cmd_report(_require(args.checkpoint, "--checkpoint", args.mode),
                          _require(args.out, "--out", args.mode))
    except MaskpruneError as e:
        log.error("%s", e)
        return 2
    except FileNotFoundError as e:
        log.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
