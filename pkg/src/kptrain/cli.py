"""Command-line entry point: ``kptrain {gen,train,eval,plot,overlay,targets}``.

Configuration is a JSON file with optional sections ``scene``, ``dataset``,
``train``, ``sample`` and ``eval``; every key not given takes its default and
unknown keys are rejected. Flags override the file. The output root defaults
to ``$KPTRAIN_OUT`` (or ``./runs``).

Exit codes: 0 success, 1 usage/configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from .detector import Checkpoint, TrainConfig, TrainingError, config_hash, predict, train, v1_compat
from .evalbench import EvalConfig, MetricsReport, evaluate_detector
from .losses import COVERAGE_MODES
from .sampler import SampleConfig, sample_keypoints
from .scenegen import ConfigError, SceneConfig
from .storage import PairDirectoryDataset, generate_dataset, read_manifest
from .targets import PER_BATCH, PER_PAIR

log = logging.getLogger("kptrain")

ENV_OUT = "KPTRAIN_OUT"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class DatasetConfig:
    n_train: int = 2000
    n_test: int = 50
    train_seeds: tuple = (0, 10_000)
    test_seeds: tuple = (1_000_000, 1_010_000)
    pairs_per_scene: int = 10
    min_overlap: float = 0.35
    max_overlap: float = 0.9


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=lambda: SampleConfig(budget=500))
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = ""

    def hash(self) -> str:
        d = asdict(self)
        d.pop("out_dir")
        return config_hash(d)


def _build(cls, data, default=None, where="config"):
    """Instantiate dataclass ``cls`` from a nested dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise UsageError(f"{where}: expected an object, got {type(data).__name__}")
    base = default if default is not None else cls()
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise UsageError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kw = {}
    for name, value in data.items():
        current = getattr(base, name)
        if is_dataclass(current):
            value = _build(type(current), value, current, f"{where}.{name}")
        elif isinstance(current, tuple):
            value = tuple(value)
        kw[name] = value
    try:
        return replace(base, **kw)
    except (TypeError, ValueError, ConfigError) as e:
        raise UsageError(f"{where}: {e}") from e


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON ({e})") from e
    return _build(RunConfig, data, where=str(path))


def apply_flags(cfg: RunConfig, args) -> RunConfig:
    """Override config fields from command-line flags that were given."""
    tr = cfg.train
    tgt, loss, aug = tr.target, tr.loss, tr.aug
    try:
        if getattr(args, "nms_window", None) is not None:
            tgt = replace(tgt, nms_window=args.nms_window)
        if getattr(args, "topk_scope", None) is not None:
            tgt = replace(tgt, topk_scope=args.topk_scope)
        if getattr(args, "prior_strength", None) is not None:
            tgt = replace(tgt, prior_strength=args.prior_strength)
        if getattr(args, "coverage_mode", None) is not None:
            loss = replace(loss, coverage_mode=args.coverage_mode)
        if getattr(args, "aug_rot", None) is not None:
            aug = replace(aug, rotate=args.aug_rot)
        if getattr(args, "aug_flip", None) is not None:
            aug = replace(aug, flip=args.aug_flip)
        kw = {"target": tgt, "loss": loss, "aug": aug}
        if getattr(args, "pairs_total", None) is not None:
            kw["pairs_total"] = args.pairs_total
        if getattr(args, "seed", None) is not None:
            kw["seed"] = args.seed
        tr = replace(tr, **kw)
        if getattr(args, "v1_compat", False):
            tr = v1_compat(tr)
        sample = cfg.sample
        if getattr(args, "alpha", None) is not None:
            sample = replace(sample, alpha=args.alpha)
        if getattr(args, "budget", None) is not None:
            sample = replace(sample, budget=args.budget)
    except (TypeError, ValueError, ConfigError) as e:
        raise UsageError(str(e)) from e
    return replace(cfg, train=tr, sample=sample)


def output_root(args, cfg: RunConfig, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if cfg.out_dir:
        return Path(cfg.out_dir) / command
    return Path(os.environ.get(ENV_OUT, "runs")) / command


# --------------------------------------------------------------------- commands

def cmd_gen(cfg: RunConfig, out_dir) -> dict:
    try:
        cfg.scene.validate()
    except ConfigError as e:
        raise UsageError(str(e)) from e
    d = cfg.dataset
    if max(d.train_seeds[0], d.test_seeds[0]) < min(d.train_seeds[1], d.test_seeds[1]):
        raise UsageError(f"train scene seeds {tuple(d.train_seeds)} overlap test scene seeds "
                         f"{tuple(d.test_seeds)}; train and test scenes must be disjoint")
    chash = config_hash({"scene": asdict(cfg.scene), "dataset": asdict(d)})
    return generate_dataset(out_dir, cfg.scene, d.n_train, d.n_test, d.train_seeds, d.test_seeds,
                            d.pairs_per_scene, d.min_overlap, d.max_overlap, extra={"config_hash": chash})


def cmd_train(cfg: RunConfig, dataset_dir, out_dir):
    ds = PairDirectoryDataset(dataset_dir, "train")
    result = train(cfg.train, ds, out_dir=out_dir, log_every=50, prior_cache={})
    Path(out_dir, "run.json").write_text(json.dumps({
        "config_hash": cfg.train.hash(), "dataset": str(dataset_dir),
        "dataset_hash": read_manifest(dataset_dir).get("config_hash", ""),
        "steps": cfg.train.steps, "skipped_pairs": result.skipped_pairs,
        "checkpoints": [f"checkpoint_{c.step:06d}.pt" for c in result.checkpoints],
    }, indent=1))
    return result


def _checkpoint_paths(items) -> list:
    paths = []
    for p in map(Path, items):
        if p.is_dir():
            found = sorted(p.glob("checkpoint_*.pt"))
            if not found:
                raise UsageError(f"{p}: no checkpoint_*.pt files")
            paths += found
        elif p.is_file():
            paths.append(p)
        else:
            raise UsageError(f"{p}: no such checkpoint or run directory")
    return paths


def comparison_table(reports) -> str:
    """Plain-text table of the final checkpoint of each config hash."""
    final = {}
    for r in reports:
        if r.config_hash not in final or r.step > final[r.config_hash].step:
            final[r.config_hash] = r
    lines = [f"{'config_hash':<18}{'step':>7}{'repeat':>9}{'AUC@5':>8}{'AUC@10':>8}{'AUC@20':>8}{'mAA@10':>8}"]
    for h, r in sorted(final.items()):
        a = r.auc
        lines.append(f"{h:<18}{r.step:>7}{r.repeatability:>9.4f}{a.get(5.0, math.nan):>8.4f}"
                     f"{a.get(10.0, math.nan):>8.4f}{a.get(20.0, math.nan):>8.4f}{r.maa:>8.4f}")
    return "\n".join(lines)


def cmd_eval(cfg: RunConfig, checkpoints, dataset_dir, out_dir, force: bool = False) -> list:
    paths = _checkpoint_paths(checkpoints)
    cks = [(p, Checkpoint.load(p)) for p in paths]
    hashes = sorted({c.config_hash for _, c in cks})
    if len(hashes) > 1 and not force:
        raise UsageError(f"checkpoints come from {len(hashes)} different configs ({', '.join(hashes)}); "
                         "pass --force to evaluate them together")
    test = PairDirectoryDataset(dataset_dir, "test", cache=True)
    pairs = [test[i] for i in range(len(test))]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for p, ck in cks:
        net = ck.network()
        rep = evaluate_detector(lambda view: predict(net, view.image), pairs, cfg.sample, cfg.eval,
                                checkpoint=str(p), step=ck.step, config_hash=ck.config_hash)
        rep.save(out / f"report_{ck.config_hash}_{ck.step:06d}.json")
        log.info("%s step %d: repeatability %.4f AUC@10 %.4f", ck.config_hash, ck.step,
                 rep.repeatability, rep.auc.get(10.0, math.nan))
        reports.append(rep)
    curves = {h: sorted(([r.step, r.repeatability, r.auc.get(10.0), r.maa] for r in reports if r.config_hash == h))
              for h in hashes}
    (out / "curves.json").write_text(json.dumps({
        "eval_config_hash": config_hash({"sample": asdict(cfg.sample), "eval": asdict(cfg.eval)}),
        "columns": ["step", "repeatability", "auc10", "maa10"], "curves": curves}, indent=1))
    if len(hashes) > 1:
        table = comparison_table(reports)
        (out / "comparison.txt").write_text(table + "\n")
        print(table)
    return reports


def cmd_plot(reports, out_dir) -> list:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    loaded = []
    for p in _report_paths(reports):
        loaded.append(MetricsReport.load(p))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for h in sorted({r.config_hash for r in loaded}):
        rs = sorted((r for r in loaded if r.config_hash == h), key=lambda r: r.step)
        steps = [r.step for r in rs]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(steps, [r.repeatability for r in rs], "o-", color="tab:blue", label="repeatability")
        ax.plot(steps, [r.auc.get(10.0, math.nan) for r in rs], "s-", color="tab:red", label="AUC@10")
        ax.set_xlabel("training step")
        ax.set_ylabel("score")
        ax.set_ylim(0, 1)
        ax.legend(loc="best")
        ax.set_title(f"config {h}")
        fig.tight_layout()
        path = out / f"curves_{h}.png"
        fig.savefig(path, dpi=100, metadata={"Description": f"config_hash={h}"})
        plt.close(fig)
        written.append(path)
    return written


def _report_paths(items) -> list:
    paths = []
    for p in map(Path, items):
        if p.is_dir():
            paths += sorted(p.glob("report_*.json"))
        elif p.is_file():
            paths.append(p)
        else:
            raise UsageError(f"{p}: no such report or directory")
    if not paths:
        raise UsageError("no reports found")
    return paths


def cmd_overlay(cfg: RunConfig, checkpoint, dataset_dir, index: int, top: int, out_path, split="test"):
    """Both views of one pair with the top-``top`` keypoints drawn."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ck = Checkpoint.load(checkpoint)
    net = ck.network()
    ds = PairDirectoryDataset(dataset_dir, split)
    if not 0 <= index < len(ds):
        raise UsageError(f"pair index {index} out of range (0..{len(ds) - 1})")
    pair = ds[index]
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    for ax, view in zip(axes, (pair.view_a, pair.view_b)):
        kps = sample_keypoints(predict(net, view.image), replace(cfg.sample, budget=top))
        xy = kps.pixels()
        ax.imshow(view.image, cmap="gray", vmin=0, vmax=1)
        ax.scatter(xy[:, 0], xy[:, 1], s=4, c="lime")
        ax.set_axis_off()
    fig.suptitle(f"config {ck.config_hash} step {ck.step}, top {top}")
    fig.tight_layout()
    fig.savefig(out_path, dpi=100, metadata={"Description": f"config_hash={ck.config_hash}"})
    plt.close(fig)
    return Path(out_path)


def cmd_targets(cfg: RunConfig, dataset_dir, index: int, out_dir, checkpoint=None, split="train"):
    """Dump the intermediate target maps of one training pair as ``.npy`` files and a panel image."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .targets import build_targets

    ds = PairDirectoryDataset(dataset_dir, split)
    if not 0 <= index < len(ds):
        raise UsageError(f"pair index {index} out of range (0..{len(ds) - 1})")
    pair = ds[index]
    tcfg = cfg.train.target
    if checkpoint is not None:
        net = Checkpoint.load(checkpoint).network()
        pred = [predict(net, v.image) for v in (pair.view_a, pair.view_b)]
    else:
        pred = [np.full(v.shape, 1.0 / v.image.size) for v in (pair.view_a, pair.view_b)]
    (ta, tb), (pa, pb) = build_targets(pair, pred[0], pred[1], tcfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = ("prior", "smoothed", "warped", "consistency", "posterior", "nms", "target")
    fig, axes = plt.subplots(2, len(names), figsize=(2 * len(names), 4.4))
    for row, (tag, post, tm) in enumerate((("a", pa, ta), ("b", pb, tb))):
        maps = (post.prior, post.smoothed, post.warped_other, post.consistent, post.posterior, post.nms, tm.mask)
        for col, (name, m) in enumerate(zip(names, maps)):
            np.save(out / f"{name}_{tag}.npy", np.asarray(m))
            axes[row, col].imshow(np.asarray(m, dtype=float), cmap="magma")
            axes[row, col].set_axis_off()
            if row == 0:
                axes[row, col].set_title(name, fontsize=8)
    chash = config_hash(tcfg)
    fig.suptitle(f"target config {chash}", fontsize=9)
    fig.tight_layout()
    fig.savefig(out / "targets.png", dpi=100, metadata={"Description": f"config_hash={chash}"})
    plt.close(fig)
    (out / "targets.json").write_text(json.dumps({"config_hash": chash, "pair": index, "split": split,
                                                  "k_effective": [ta.k_effective, tb.k_effective]}))
    return out


# --------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _run_flags(p):
    g = p.add_argument_group("run configuration overrides")
    g.add_argument("--pairs-total", type=int)
    g.add_argument("--nms-window", type=int)
    g.add_argument("--topk-scope", choices=(PER_PAIR, PER_BATCH))
    g.add_argument("--prior-strength", type=float)
    g.add_argument("--coverage-mode", choices=COVERAGE_MODES)
    g.add_argument("--aug-rot", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--aug-flip", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--v1-compat", action="store_true", help="no train-time NMS, per-batch top-k, no augmentation")
    g.add_argument("--seed", type=int)


def _sample_flags(p):
    p.add_argument("--alpha", type=float, help="keypoint density exponent")
    p.add_argument("--budget", type=int, help="keypoints per image")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kptrain", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="render a synthetic train/test dataset")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    _run_flags(p)

    p = sub.add_parser("eval", help="evaluate checkpoints on the test split")
    p.add_argument("checkpoints", nargs="+", help="checkpoint files or run directories")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true", help="allow checkpoints from different configs")
    _sample_flags(p)

    p = sub.add_parser("plot", help="repeatability and AUC@10 versus training step")
    p.add_argument("reports", nargs="+", help="report files or eval directories")
    p.add_argument("--out")

    p = sub.add_parser("overlay", help="draw top-N keypoints on both views of a pair")
    p.add_argument("checkpoint")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True)
    p.add_argument("--pair", type=int, default=0)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--top", type=int, default=500)
    p.add_argument("--out")
    _sample_flags(p)

    p = sub.add_parser("targets", help="dump the target-construction maps of one training pair")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True)
    p.add_argument("--pair", type=int, default=0)
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    _run_flags(p)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # --help, or a usage error already reported by argparse
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_flags(load_config(getattr(args, "config", None)), args)
        out = output_root(args, cfg, args.command)
        if args.command == "gen":
            d = cfg.dataset
            if args.n_train is not None:
                d = replace(d, n_train=args.n_train)
            if args.n_test is not None:
                d = replace(d, n_test=args.n_test)
            m = cmd_gen(replace(cfg, dataset=d), out)
            print(f"{out}: {len(m['train'])} train + {len(m['test'])} test pairs")
        elif args.command == "train":
            r = cmd_train(cfg, args.dataset, out)
            print(f"{out}: {len(r.checkpoints)} checkpoints, config {cfg.train.hash()}")
        elif args.command == "eval":
            reps = cmd_eval(cfg, args.checkpoints, args.dataset, out, args.force)
            print(f"{out}: {len(reps)} reports")
        elif args.command == "plot":
            for p in cmd_plot(args.reports, out):
                print(p)
        elif args.command == "overlay":
            path = Path(args.out) if args.out else output_root(argparse.Namespace(), cfg, "overlay") / "overlay.png"
            path.parent.mkdir(parents=True, exist_ok=True)
            print(cmd_overlay(cfg, args.checkpoint, args.dataset, args.pair, args.top, path, args.split))
        elif args.command == "targets":
            print(cmd_targets(cfg, args.dataset, args.pair, out, args.checkpoint))
    except UsageError as e:
        print(f"kptrain: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, RuntimeError, OSError, ValueError) as e:
        print(f"kptrain: {args.command} failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
