"""Deterministic training with per-group learning rates."""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .decoder import MaskBundle, contour_from_mask, training_loss
from .encoder import BackboneConfig
from .errors import ConfigurationError
from .inference import pair_inputs
from .metrics import region_similarity
from .model import HCPNModel, ModelConfig, param_group

DESK_SCALE = {"size": 64, "batch": 4, "iters": 500}
PAPER_SCALE = {"size": 512, "batch": 10, "epochs": 25}


@dataclass
class RunConfig:
    """Everything a run depends on besides its input files.

    Desk-scale defaults are used unless ``paper_scale`` is set, which switches
    to 512x512 inputs, batches of 10 and 25 epochs over the training pairs.
    ``momentum`` applies to the ``sgd`` optimizer only; ``adam`` uses betas
    (0.9, 0.999).
    """

    seed: int = 0
    precision: int = 32
    size: int = 64
    levels: int = 4
    channels: tuple = (16, 32, 64, 128)
    decoder_width: int = 32
    lr_encoder: float = 1e-4
    lr_decoder: float = 1e-3
    weight_decay: float = 1e-5
    momentum: float = 0.9
    clip_norm: float | None = None
    optimizer: str = "adam"
    batch: int = 4
    iters: int = 500
    epochs: int | None = None
    probe_every: int = 1
    fusion: str = "gaf"
    no_flow_stream: bool = False
    no_frame_stream: bool = False
    two_stream: bool = False
    bypass_pcm: bool = False
    bypass_ccm: bool = False
    bypass_gac: bool = False
    bypass_mcr: bool = False
    paper_scale: bool = False

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if self.paper_scale:
            self.size, self.batch, self.epochs = PAPER_SCALE["size"], PAPER_SCALE["batch"], PAPER_SCALE["epochs"]
        for name in ("lr_encoder", "lr_decoder"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError("weight_decay must be >= 0 and momentum in [0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigurationError(f"clip_norm must be positive, got {self.clip_norm}")
        if not 1 <= self.levels <= len(self.channels):
            raise ConfigurationError(f"levels must lie in [1, {len(self.channels)}], got {self.levels}")
        if self.precision not in (32, 64):
            raise ConfigurationError(f"precision must be 32 or 64, got {self.precision}")
        if self.batch < 1 or self.iters < 0:
            raise ConfigurationError("batch must be >= 1 and iters >= 0")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            backbone=BackboneConfig(levels=len(self.channels), channels_per_level=self.channels,
                                    input_size=(self.size, self.size)),
            cascade_levels=self.levels, decoder_width=self.decoder_width, fusion=self.fusion,
            use_flow=not self.no_flow_stream, use_frames=not self.no_frame_stream, two_stream=self.two_stream,
            bypass_pcm=self.bypass_pcm, bypass_ccm=self.bypass_ccm, bypass_gac=self.bypass_gac,
            bypass_mcr=self.bypass_mcr)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


class SGD:
    """Momentum SGD with L2 weight decay and a learning rate per parameter group.

    With ``clip_norm`` the loss gradient is rescaled so its global L2 norm does
    not exceed that value (weight decay is added after clipping).
    """

    def __init__(self, params: dict, rates: dict, weight_decay: float, momentum: float,
                 clip_norm: float | None = None):
        self.params = params
        self.rates = rates
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, grads) -> float:
        """Apply one update; returns the global gradient norm before clipping."""
        norm = float(np.sqrt(sum(float(np.sum(np.square(grads[p]))) for p in self.params.values())))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for name, p in self.params.items():
            g = scale * grads[p] + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= self.rates[param_group(name)] * v
        return norm


class Adam(SGD):
    """Adam with L2 weight decay folded into the gradient, same grouping and clipping as :class:`SGD`."""

    def __init__(self, params: dict, rates: dict, weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = None):
        super().__init__(params, rates, weight_decay, betas[0], clip_norm)
        self.beta2, self.eps, self.t = betas[1], eps, 0
        self.second = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, grads) -> float:
        norm = float(np.sqrt(sum(float(np.sum(np.square(grads[p]))) for p in self.params.values())))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        b1, b2 = self.momentum, self.beta2
        for name, p in self.params.items():
            g = scale * grads[p] + self.weight_decay * p.data
            m, v = self.velocity[name], self.second[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data -= self.rates[param_group(name)] * m_hat / (np.sqrt(v_hat) + self.eps)
        return norm


OPTIMIZERS = ("sgd", "adam")


@dataclass
class TrainResult:
    model: HCPNModel
    log: list = field(default_factory=list)
    seconds: float = 0.0


def training_pairs(datasets: list) -> list:
    return [(i, t) for i, ds in enumerate(datasets) for t in range(len(ds.frames) - 1)]


def batch_bundle(datasets: list, pairs: list) -> tuple:
    """Model inputs for ``pairs`` plus ground truth ordered like :meth:`HCPNModel.forward_joint` rows."""
    groups = [pair_inputs(datasets[i], [t]) for i, t in pairs]
    inputs = tuple(np.concatenate([g[k] for g in groups]) for k in range(3))
    masks = [datasets[i].gt_mask[t] for i, t in pairs] + [datasets[i].gt_mask[t + 1] for i, t in pairs]
    gm = np.stack(masks).astype(np.float64)
    return inputs, gm, contour_from_mask(gm.astype(bool)).astype(np.float64)


def probe_j(model: HCPNModel, datasets: list, pair: tuple) -> float:
    """Mean J of both frames of one fixed pair, thresholded at 0.5."""
    inputs, gm, _ = batch_bundle(datasets, [pair])
    pk, pk1 = model.predict(*inputs)
    return float(np.mean([region_similarity(pk[0] >= 0.5, gm[0]), region_similarity(pk1[0] >= 0.5, gm[1])]))


def train(datasets: list, config: RunConfig, log_path=None, verbose: bool = False) -> TrainResult:
    """Train a fresh model on all consecutive pairs of ``datasets``.

    Each iteration draws ``config.batch`` pairs without replacement from a
    seeded shuffle of the training pairs, reshuffling once exhausted.
    """
    start = time.perf_counter()
    with T.precision(config.precision):
        model = HCPNModel.create(config.model_config(), seed=config.seed)
        rng = np.random.default_rng(config.seed + 1)
        pairs = training_pairs(datasets)
        if not pairs:
            raise ConfigurationError("no training pairs")
        iters = config.iters
        if config.epochs is not None:
            iters = config.epochs * int(np.ceil(len(pairs) / config.batch))
        rates = {"encoder": config.lr_encoder, "decoder": config.lr_decoder}
        if config.optimizer == "adam":
            opt = Adam(model.params, rates, config.weight_decay, clip_norm=config.clip_norm)
        else:
            opt = SGD(model.params, rates, config.weight_decay, config.momentum, config.clip_norm)
        log, order = [], []
        fh = open(log_path, "w", newline="") if log_path else None
        writer = csv.writer(fh, lineterminator="\n") if fh else None
        if writer:
            writer.writerow(["iter", "loss", "train_j"])
        try:
            for it in range(iters):
                chosen = []
                while len(chosen) < min(config.batch, len(pairs)):
                    if not order:
                        order = list(rng.permutation(len(pairs)))
                    chosen.append(pairs[order.pop()])
                inputs, gm, gr = batch_bundle(datasets, chosen)
                with T.Tape() as tape:
                    joint = model.forward_joint(*inputs)
                    bundle = MaskBundle(joint.coarse, joint.contours, joint.refined, gm, gr)
                    loss = training_loss(bundle)
                grads = T.backward(tape, loss)
                gnorm = opt.step(grads)
                row = {"iter": it, "loss": float(loss.item()), "grad_norm": gnorm}
                if config.probe_every and (it % config.probe_every == 0 or it == iters - 1):
                    row["train_j"] = probe_j(model, datasets, pairs[0])
                log.append(row)
                if writer:
                    tj = row.get("train_j")
                    writer.writerow([it, f"{row['loss']:.6f}", "" if tj is None else f"{tj:.6f}"])
                if verbose and (it % 25 == 0 or it == iters - 1):
                    print(f"iter {it:4d} loss {row['loss']:.4f} |g| {gnorm:.3f} train_j {row.get('train_j', float('nan')):.4f}",
                          flush=True)
        finally:
            if fh:
                fh.close()
    return TrainResult(model, log, time.perf_counter() - start)


def load_config_file(path) -> dict:
    return json.loads(Path(path).read_text())
