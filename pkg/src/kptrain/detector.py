"""Trainable per-pixel keypoint scorer and its training loop."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, is_dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import augment
from .geometry import Camera, CameraView
from .losses import LossConfig, total_loss
from .targets import (
    PER_BATCH,
    DegenerateTargetError,
    EmptyPriorError,
    TargetConfig,
    consistent_priors,
    pair_posteriors,
    topk_binarize_batch,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "KPTRAIN-CHECKPOINT 1"


class TrainingError(RuntimeError):
    pass


def _block(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True),
                         nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=True))


class ScoreNet(nn.Module):
    """Small U-Net: ``(B, 1, H, W)`` image -> ``(B, H, W)`` logits.

    ``encoder`` holds the full-resolution stem and the downsampling levels,
    ``decoder`` the upsampling levels and the 1x1 head; they form the two
    learning-rate groups.
    """

    def __init__(self, widths=(8, 16, 32, 32)):
        super().__init__()
        self.widths = tuple(widths)
        self.levels = len(widths) - 1
        enc = [_block(1, widths[0])]
        for cin, cout in zip(widths[:-1], widths[1:]):
            enc.append(nn.Sequential(nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.ReLU(inplace=True),
                                     nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=True)))
        self.encoder = nn.ModuleList(enc)
        dec = []
        for i in range(self.levels, 0, -1):
            dec.append(nn.Sequential(nn.Conv2d(widths[i] + widths[i - 1], widths[i - 1], 3, padding=1),
                                     nn.ReLU(inplace=True)))
        self.decoder = nn.ModuleList(dec)
        self.head = nn.Conv2d(widths[0], 1, 1)

    @property
    def multiple(self) -> int:
        return 2 ** self.levels

    def encoder_parameters(self):
        return list(self.encoder.parameters())

    def decoder_parameters(self):
        return list(self.decoder.parameters()) + list(self.head.parameters())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % self.multiple or w % self.multiple:
            raise ValueError(f"image size {h}x{w} must be a multiple of {self.multiple}")
        x = x.contiguous(memory_format=torch.channels_last)
        feats = []
        for blk in self.encoder:
            x = blk(x)
            feats.append(x)
        x = feats.pop()
        for blk in self.decoder:
            skip = feats.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = blk(torch.cat([x, skip], dim=1))
        return self.head(x)[:, 0].contiguous()


def to_prob(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over all pixels of each map (last two dims)."""
    shape = logits.shape
    return torch.softmax(logits.reshape(*shape[:-2], -1), dim=-1).reshape(shape)


def image_tensor(images) -> torch.Tensor:
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr)[:, None]


@torch.no_grad()
def predict(net: ScoreNet, image) -> np.ndarray:
    """Inference-mode probability map for one image, as float64 numpy."""
    net.eval()
    logits = net(image_tensor([image]))
    return to_prob(logits.double())[0].numpy()


@dataclass
class AugConfig:
    rotate: bool = True
    flip: bool = True


@dataclass
class TrainConfig:
    pairs_total: int = 10000
    batch_size: int = 7
    lr_decoder: float = 1e-4
    lr_encoder: float = 2e-5
    train_resolution: int = 128
    crop_from: int | None = None
    seed: int = 0
    n_checkpoints: int = 10
    widths: tuple = (8, 16, 32, 32)
    target: TargetConfig = field(default_factory=TargetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    aug: AugConfig = field(default_factory=AugConfig)

    def __post_init__(self):
        if not self.pairs_total >= self.batch_size >= 1:
            raise ValueError("need pairs_total >= batch_size >= 1")
        if self.n_checkpoints < 1:
            raise ValueError("n_checkpoints must be >= 1")
        if self.crop_from is not None and self.crop_from < self.train_resolution:
            raise ValueError("crop_from must be >= train_resolution")

    @property
    def steps(self) -> int:
        return self.pairs_total // self.batch_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        sub = {"target": TargetConfig, "loss": LossConfig, "aug": AugConfig}
        for k, typ in sub.items():
            if k in d and isinstance(d[k], dict):
                d[k] = typ(**d[k])
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self)


def config_hash(cfg) -> str:
    d = asdict(cfg) if is_dataclass(cfg) else cfg
    blob = json.dumps(d, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def v1_compat(config: TrainConfig) -> TrainConfig:
    """Baseline settings: no train-time NMS, batch-level top-k, no augmentation."""
    d = config.to_dict()
    d["target"].update(nms_window=1, topk_scope=PER_BATCH)
    d["aug"].update(rotate=False, flip=False)
    return TrainConfig.from_dict(d)


@dataclass
class Checkpoint:
    state: dict
    step: int
    config_hash: str
    config: dict
    rng_state: dict = field(default_factory=dict)

    def network(self) -> ScoreNet:
        net = ScoreNet(tuple(self.config.get("widths", (8, 16, 32, 32))))
        net.load_state_dict(self.state)
        net.eval()
        return net

    def save(self, path):
        torch.save({"format": CHECKPOINT_FORMAT, "state": self.state, "step": self.step,
                    "config_hash": self.config_hash, "config": self.config, "rng_state": self.rng_state}, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        d = torch.load(path, map_location="cpu", weights_only=False)
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint file")
        return cls(d["state"], d["step"], d["config_hash"], d["config"], d.get("rng_state", {}))


@dataclass
class TrainResult:
    checkpoints: list
    log: list
    skipped_pairs: int


def checkpoint_steps(steps: int, n: int) -> list:
    """``n`` evenly spaced step indices ending at ``steps``."""
    return sorted({max(1, round(steps * (i + 1) / n)) for i in range(n)})


def make_optimizer(net: ScoreNet, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam([
        {"params": net.encoder_parameters(), "lr": config.lr_encoder},
        {"params": net.decoder_parameters(), "lr": config.lr_decoder},
    ], weight_decay=0.0)


def _crop_pair(pair, rng, size):
    def crop(view):
        h, w = view.shape
        y0, x0 = int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
        cam = view.camera
        ncam = Camera(cam.fx, cam.fy, cam.cx - x0, cam.cy - y0, cam.R, cam.t, size, size)
        sl = (slice(y0, y0 + size), slice(x0, x0 + size))
        sid = None if view.surface_id is None else view.surface_id[sl]
        return CameraView(ncam, view.image[sl], view.depth[sl], view.valid[sl], sid, dict(view.meta))

    return replace(pair, view_a=crop(pair.view_a), view_b=crop(pair.view_b))


def train(config: TrainConfig, dataset, out_dir=None, log_every: int = 0, prior_cache: dict | None = None,
          on_targets=None) -> TrainResult:
    """Train a fresh :class:`ScoreNet` on ``dataset`` (indexable pairs).

    Each step draws ``batch_size`` pairs (epochs of a seeded permutation), augments
    each view independently, builds targets from the detached predictions,
    and takes one Adam step with separate encoder/decoder learning rates.
    Degenerate pairs are skipped and counted. Deterministic for a fixed seed.

    Parameters
    ----------
    prior_cache : dict, optional
        Per-pair store of the consistency-filtered priors, keyed by dataset
        index; pass the same dict to several runs on one dataset to share it.
    on_targets : callable, optional
        ``on_targets(step, posteriors, targets)`` is called once per step with
        the :class:`PairPosterior` maps (two per kept pair, in batch order)
        and the matching :class:`TargetMap` list.
    """
    if len(dataset) < config.batch_size:
        raise TrainingError(f"dataset has {len(dataset)} pairs, fewer than batch_size={config.batch_size}")
    torch.manual_seed(config.seed)
    torch.use_deterministic_algorithms(True)
    rng = np.random.default_rng(config.seed)
    net = ScoreNet(config.widths).to(memory_format=torch.channels_last)
    opt = make_optimizer(net, config)
    steps = config.steps
    ckpt_at = set(checkpoint_steps(steps, config.n_checkpoints))
    chash = config.hash()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps({"config_hash": chash, **config.to_dict()}, indent=1))
        metrics_file = open(out / "metrics.jsonl", "w")
    order = np.array([], dtype=np.int64)
    cursor = 0
    checkpoints, records, skipped_total = [], [], 0
    use_cache = prior_cache is not None and config.crop_from is None
    try:
        for step in range(1, steps + 1):
            if cursor + config.batch_size > len(order):
                order = np.concatenate([order[cursor:], rng.permutation(len(dataset))])
                cursor = 0
            idx = order[cursor:cursor + config.batch_size]
            cursor += config.batch_size
            pairs, transforms = [], []
            for i in idx:
                pair = dataset[int(i)]
                if config.crop_from is not None:
                    pair = _crop_pair(pair, rng, config.train_resolution)
                ta = augment.sample_transform(rng, config.aug.rotate, config.aug.flip)
                tb = augment.sample_transform(rng, config.aug.rotate, config.aug.flip)
                pairs.append((int(i), pair))
                transforms.append((ta, tb))

            net.train()
            images = []
            for (_, p), (ta, tb) in zip(pairs, transforms):
                images += [ta.apply_grid(p.view_a.image), tb.apply_grid(p.view_b.image)]
            logits = net(image_tensor(images))
            probs = to_prob(logits.detach().double()).numpy()

            progress = (step - 1) / max(steps - 1, 1)
            posts, keep, skipped = [], [], 0
            for j, ((i, p), (ta, tb)) in enumerate(zip(pairs, transforms)):
                try:
                    if use_cache:
                        # priors are computed on the unaugmented pair and moved with the grid transform
                        if i not in prior_cache:
                            cp = consistent_priors(p, config.target)
                            prior_cache[i] = tuple(cp[v][4].astype(np.float32) for v in ("a", "b"))
                        pri = {v: (None,) * 4 + (t.apply_grid(c).astype(np.float64),)
                               for v, t, c in (("a", ta, prior_cache[i][0]), ("b", tb, prior_cache[i][1]))}
                        pa, pb = pair_posteriors(None, probs[2 * j], probs[2 * j + 1], config.target, progress, pri)
                    else:
                        ap = augment.apply_to_pair(p, ta, tb)
                        pa, pb = pair_posteriors(ap, probs[2 * j], probs[2 * j + 1], config.target, progress)
                except (EmptyPriorError, DegenerateTargetError) as e:
                    log.debug("step %d: skipping pair %d (%s)", step, i, e)
                    skipped += 1
                    continue
                posts += [pa, pb]
                keep += [2 * j, 2 * j + 1]
            skipped_total += skipped
            if not keep:
                raise TrainingError(f"step {step}: every pair in the batch was degenerate")
            try:
                tmaps = topk_binarize_batch([q.posterior for q in posts], [q.nms for q in posts],
                                            config.target.k, config.target.topk_scope)
            except DegenerateTargetError as e:
                raise TrainingError(f"step {step}: {e}") from e
            if on_targets is not None:
                on_targets(step, posts, tmaps)

            loss = 0.0
            ce_sum = cov_sum = 0.0
            n_maps = 0
            for m, tm in zip(keep, tmaps):
                if tm.k_effective == 0:
                    continue
                (i, p), (ta, tb) = pairs[m // 2], transforms[m // 2]
                view, t = (p.view_a, ta) if m % 2 == 0 else (p.view_b, tb)
                l, parts = total_loss(logits[m], torch.from_numpy(tm.mask), t.apply_grid(view.valid), config.loss)
                loss = loss + l
                ce_sum += parts["ce"]
                cov_sum += parts["coverage"]
                n_maps += 1
            loss = loss / n_maps
            if not torch.isfinite(loss):
                pnorm = math.sqrt(sum(float((q.detach() ** 2).sum()) for q in net.parameters()))
                raise TrainingError(f"non-finite loss at step {step}; parameter norm {pnorm:.4g}")
            opt.zero_grad()
            loss.backward()
            opt.step()

            rec = {"step": step, "loss": float(loss.detach()), "ce": ce_sum / n_maps, "coverage": cov_sum / n_maps,
                   "skipped_pairs": skipped, "k_effective": [int(tm.k_effective) for tm in tmaps]}
            records.append(rec)
            if out is not None:
                metrics_file.write(json.dumps({k: v for k, v in rec.items() if k != "k_effective"}) + "\n")
            if log_every and step % log_every == 0:
                log.info("step %d/%d loss %.4f ce %.4f cov %.4f", step, steps, rec["loss"], rec["ce"], rec["coverage"])
            if step in ckpt_at:
                ck = Checkpoint({k: v.detach().clone() for k, v in net.state_dict().items()}, step, chash,
                                config.to_dict(), {"numpy": rng.bit_generator.state})
                checkpoints.append(ck)
                if out is not None:
                    ck.save(out / f"checkpoint_{step:06d}.pt")
    finally:
        if out is not None:
            metrics_file.close()
    return TrainResult(checkpoints, records, skipped_total)
