"""Experiment orchestration: configs, training loops, evaluation, reports.

``run_experiment`` drives the full protocol for each cross-validation
fold: preprocess (if needed), build a coupled eLR/HR pair (or a single
network when coupling is disabled), train with paired batches, decouple,
evaluate the standalone eLR network, and write per-fold results, training
logs, checkpoints and an aggregate summary.  Everything downstream of the
config seed is deterministic; the only non-reproducible bytes live in the
single timestamp header line of the summary file.

Config files are flat ``key = value`` text; every key mirrors an
ExperimentConfig field and unknown keys are rejected.
"""

from __future__ import annotations

import os
import time
import zlib
from dataclasses import dataclass, fields, replace

import numpy as np

from . import ops
from .coupling import (
    Batch,
    CoupledPair,
    CouplingSchedule,
    TrainerConfig,
    TrainerState,
    build_coupled_pair,
    build_single,
    decouple,
    flip_samples,
    lr_schedule,
    train_step,
)
from .data import (
    DatasetManifest,
    SampleBank,
    load_manifest,
    make_folds,
    preprocess_manifest,
)
from .net import NetworkSpec, count_parameters, save_checkpoint
from .video import encode_flow_stacks

__all__ = [
    "ExperimentConfig",
    "FoldResult",
    "load_config",
    "parse_config_value",
    "evaluate",
    "average_two_stream",
    "train_fold",
    "run_experiment",
    "export_features",
    "population_std",
]


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ExperimentConfig:
    manifest: str = ""
    cache_dir: str = ""
    output_dir: str = ""
    protocol: str = "leave-person-out"
    folds: tuple[str, ...] = ()              # empty = run all folds

    # network
    stream: str = "fused"
    fusion: str = "conv"
    fusion_after: str = "conv3"
    conv_channels: tuple[int, int, int] = (32, 64, 128)
    conv_kernels: tuple[int, int, int] = (5, 3, 3)
    fc4_width: int = 256
    dropout: float = 0.85

    # coupling
    coupling_enabled: bool = True
    coupling_schedule: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    resolution: str = "elr"                  # rendition used when uncoupled

    # trainer
    epochs: int = 30
    base_lr: float = 0.05
    lr_decay_factor: float = 10.0
    lr_decay_epochs: int = 10
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 256
    flip_probability: float = 0.5
    seed: int = 0

    # pipeline
    elr_height: int = 0                      # 0 = aspect-based default
    elr_width: int = 0
    temporal_length: int = 0                 # 0 = keep original length
    test_stride: int = 4
    checkpoint_every: int = 0                # epochs; 0 = final only

    def network_spec(self, num_classes):
        fused = self.stream == "fused"
        return NetworkSpec(
            stream=self.stream,
            num_classes=num_classes,
            conv_channels=tuple(self.conv_channels),
            conv_kernels=tuple(self.conv_kernels),
            fc4_width=self.fc4_width,
            dropout=self.dropout,
            fusion=self.fusion if fused else None,
            fusion_after=self.fusion_after if fused else None,
        ).validate()

    def trainer_config(self):
        return TrainerConfig(
            base_lr=self.base_lr,
            lr_decay_factor=self.lr_decay_factor,
            lr_decay_epochs=self.lr_decay_epochs,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            flip_probability=self.flip_probability,
            seed=self.seed,
        )

    @property
    def elr_shape(self):
        if self.elr_height and self.elr_width:
            return (self.elr_height, self.elr_width)
        return None


_CONFIG_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def parse_config_value(name, raw):
    """Parse one config value according to the field's declared type."""
    if name not in _CONFIG_FIELDS:
        raise ValueError(f"unknown config key {name!r}")
    default = _CONFIG_FIELDS[name].default
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        elem = type(default[0]) if default else str
        return tuple(elem(p) for p in parts)
    return raw


def load_config(path=None, overrides=None) -> ExperimentConfig:
    """Build a config from an optional file plus key=value overrides."""
    values = {}
    if path:
        with open(path) as f:
            for line_no, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{line_no}: expected 'key = value'")
                key, raw = line.split("=", 1)
                key = key.strip()
                values[key] = parse_config_value(key, raw)
    for key, raw in (overrides or {}).items():
        values[key] = parse_config_value(key, raw) if isinstance(raw, str) else raw
    return replace(ExperimentConfig(), **values)


# ---------------------------------------------------------------------------
# batch assembly and evaluation

def _network_inputs(stream, rgb, stacks):
    if stream == "fused":
        return (rgb, stacks)
    return rgb if stream == "spatial" else stacks


def _assemble(bank: SampleBank, indices, centers, stream, flip_mask=None):
    rgb, fields, labels = bank.gather(indices, centers)
    if flip_mask is not None:
        rgb, fields = flip_samples(rgb, fields, flip_mask)
    stacks = encode_flow_stacks(fields) if stream != "spatial" else None
    return Batch(_network_inputs(stream, rgb, stacks), labels)


@dataclass
class FoldResult:
    fold_id: str
    video_indices: tuple[int, ...]
    predictions: np.ndarray
    probabilities: np.ndarray
    labels: np.ndarray

    @property
    def ccr(self):
        return float((self.predictions == self.labels).mean())


def _video_probs(network, bank, video_index, stride):
    pre = bank.video(video_index)
    centers = list(range(0, pre.n_frames, stride))
    batch = _assemble(bank, [video_index] * len(centers), centers, network.spec.stream)
    logits, _ = network.forward(batch.inputs, "eval")
    return ops.softmax(logits)


def evaluate(network, bank: SampleBank, video_indices, stride=4, fold_id="") -> FoldResult:
    """Video-level prediction: average frame softmax over every stride-th center."""
    if len(video_indices) == 0:
        raise ValueError("cannot evaluate an empty test set")
    if stride < 1:
        raise ValueError(f"frame stride must be >= 1, got {stride}")
    probs, preds = [], []
    for vid in video_indices:
        p = _video_probs(network, bank, vid, stride).mean(axis=0)
        probs.append(p)
        preds.append(int(np.argmax(p)))
    labels = bank.labels[list(video_indices)]
    return FoldResult(fold_id, tuple(video_indices), np.asarray(preds),
                      np.stack(probs), labels)


def average_two_stream(spatial_net, temporal_net, bank: SampleBank, video_indices,
                       stride=4, fold_id="") -> FoldResult:
    """Late fusion baseline: average the two streams' per-frame softmax outputs."""
    if spatial_net.spec.num_classes != temporal_net.spec.num_classes:
        raise ValueError(
            f"class-count mismatch between streams: {spatial_net.spec.num_classes} "
            f"vs {temporal_net.spec.num_classes}")
    if len(video_indices) == 0:
        raise ValueError("cannot evaluate an empty test set")
    probs, preds = [], []
    for vid in video_indices:
        p_s = _video_probs(spatial_net, bank, vid, stride)
        p_t = _video_probs(temporal_net, bank, vid, stride)
        p = (0.5 * (p_s + p_t)).mean(axis=0)
        probs.append(p)
        preds.append(int(np.argmax(p)))
    labels = bank.labels[list(video_indices)]
    return FoldResult(fold_id, tuple(video_indices), np.asarray(preds),
                      np.stack(probs), labels)


def population_std(values):
    values = np.asarray(values, dtype=np.float64)
    return float(np.sqrt(np.mean((values - values.mean()) ** 2)))


# ---------------------------------------------------------------------------
# training

def _batch_rng(seed, epoch):
    return np.random.default_rng(np.random.SeedSequence(entropy=[int(seed), 0xBA7C, epoch]))


def train_fold(pair: CoupledPair, elr_bank, hr_bank, train_indices, config: TrainerConfig,
               log_rows=None, checkpoint_hook=None):
    """Epoch loop over paired batches; one random center frame per video per epoch.

    Sample selection and flip decisions come from a per-epoch stream that
    does not depend on whether an HR partner exists, so an uncoupled run
    consumes the exact same batches as the eLR half of a coupled run.
    """
    state = TrainerState.for_seed(config.seed)
    train_indices = np.asarray(train_indices, dtype=np.int64)
    for epoch in range(config.epochs):
        state.epoch = epoch
        rng = _batch_rng(config.seed, epoch)
        order = train_indices[rng.permutation(len(train_indices))]
        losses = []
        for start in range(0, len(order), config.batch_size):
            chunk = order[start:start + config.batch_size]
            centers = [int(rng.integers(elr_bank.n_frames(v))) for v in chunk]
            flip_mask = rng.random(len(chunk)) < config.flip_probability
            elr_batch = _assemble(elr_bank, chunk, centers, pair.elr.spec.stream, flip_mask)
            hr_batch = None
            if pair.hr is not None:
                hr_batch = _assemble(hr_bank, chunk, centers, pair.hr.spec.stream, flip_mask)
            state = train_step(pair, elr_batch, hr_batch, config, state)
            losses.append(dict(state.last_loss))
        if log_rows is not None:
            mean_elr = float(np.mean([l["elr"] for l in losses]))
            mean_hr = float(np.mean([l["hr"] for l in losses])) if pair.hr is not None else ""
            log_rows.append((epoch, state.iteration, lr_schedule(config, epoch),
                             mean_elr, mean_hr))
        if checkpoint_hook is not None:
            checkpoint_hook(epoch, pair)
    return state


# ---------------------------------------------------------------------------
# full experiment

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(str(v) for v in row) + "\n")


def run_experiment(config: ExperimentConfig):
    """Train and evaluate every requested fold; write reports under output_dir.

    Returns a summary dict with the per-fold CCRs and their mean/StDev.
    Partial per-fold outputs are preserved if a later fold fails.
    """
    if not config.manifest or not config.cache_dir or not config.output_dir:
        raise ValueError("config needs manifest, cache_dir and output_dir")
    t_start = time.time()
    manifest = load_manifest(config.manifest, config.protocol)
    os.makedirs(config.output_dir, exist_ok=True)

    renditions = ("elr", "hr") if config.coupling_enabled else (config.resolution,)
    for rendition in renditions:
        preprocess_manifest(manifest, config.cache_dir, rendition,
                            elr_shape=config.elr_shape if rendition == "elr" else None,
                            temporal_length=config.temporal_length or None)
    banks = {r: SampleBank(manifest, config.cache_dir, r) for r in renditions}

    spec = config.network_spec(manifest.num_classes)
    trainer = config.trainer_config()
    folds = make_folds(manifest)
    if config.folds:
        wanted = set(config.folds)
        unknown = wanted - {f.fold_id for f in folds}
        if unknown:
            raise ValueError(f"unknown fold ids {sorted(unknown)}")
        folds = [f for f in folds if f.fold_id in wanted]

    fold_rows, results = [], []
    net = None
    for fold in folds:
        try:
            fold_seed = int(np.random.SeedSequence(
                entropy=[config.seed, 0xF01D, zlib.crc32(fold.fold_id.encode())]
            ).generate_state(1)[0])
            if config.coupling_enabled:
                schedule = CouplingSchedule(tuple(config.coupling_schedule))
                pair = build_coupled_pair(spec, schedule, fold_seed)
                elr_bank, hr_bank = banks["elr"], banks["hr"]
            else:
                pair = build_single(spec, fold_seed)
                elr_bank = hr_bank = banks[config.resolution]

            log_rows = []
            ckpt_dir = os.path.join(config.output_dir, f"fold_{fold.fold_id}")
            os.makedirs(ckpt_dir, exist_ok=True)

            def checkpoint_hook(epoch, live_pair, _dir=ckpt_dir):
                if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                    save_checkpoint(decouple(live_pair),
                                    os.path.join(_dir, f"epoch_{epoch + 1:04d}.ckpt"))

            train_fold(pair, elr_bank, hr_bank, fold.train, trainer,
                       log_rows=log_rows, checkpoint_hook=checkpoint_hook)
            net = decouple(pair)
            save_checkpoint(net, os.path.join(ckpt_dir, "final.ckpt"))
            _write_csv(os.path.join(ckpt_dir, "training_log.csv"),
                       ("epoch", "iteration", "lr", "loss_elr", "loss_hr"), log_rows)

            result = evaluate(net, elr_bank, fold.test, config.test_stride, fold.fold_id)
            results.append(result)
            for vid, label, pred, prob in zip(result.video_indices, result.labels,
                                              result.predictions, result.probabilities):
                fold_rows.append((fold.fold_id, vid, manifest.entries[vid].subject,
                                  int(label), int(pred),
                                  ";".join(f"{p:.6f}" for p in prob)))
            _write_csv(os.path.join(config.output_dir, "per_video.csv"),
                       ("fold", "video", "subject", "label", "prediction", "softmax"),
                       fold_rows)
        except Exception as exc:
            raise RuntimeError(f"fold {fold.fold_id!r} failed: {exc}") from exc

    ccrs = [r.ccr for r in results]
    summary = {
        "folds": [r.fold_id for r in results],
        "ccrs": ccrs,
        "mean_ccr": float(np.mean(ccrs)),
        "stdev": population_std(ccrs),
        "parameter_count": count_parameters(net),
    }
    wall = time.time() - t_start
    with open(os.path.join(config.output_dir, "summary.txt"), "w") as f:
        f.write(f"# generated {time.strftime('%Y-%m-%dT%H:%M:%S')} "
                f"wall_clock_s={wall:.3f}\n")
        for fold_id, ccr in zip(summary["folds"], ccrs):
            f.write(f"fold_{fold_id}_ccr={ccr:.6f}\n")
        f.write(f"mean_ccr={summary['mean_ccr']:.6f}\n")
        f.write(f"stdev={summary['stdev']:.6f}\n")
        f.write(f"parameter_count={summary['parameter_count']}\n")
    return summary


# ---------------------------------------------------------------------------
# feature export

def export_features(network, bank: SampleBank, video_indices, out_path,
                    layer="fc5_input", stride=4):
    """Mean per-video activations of the requested layer, written as CSV."""
    if layer != "fc5_input":
        raise ValueError(f"unknown feature layer {layer!r} (supported: fc5_input)")
    rows = []
    for vid in video_indices:
        pre = bank.video(vid)
        centers = list(range(0, pre.n_frames, stride))
        batch = _assemble(bank, [vid] * len(centers), centers, network.spec.stream)
        _, cache = network.forward(batch.inputs, "eval")
        feats = _fc5_input_from_cache(network, cache).mean(axis=0)
        entry = bank.manifest.entries[vid]
        rows.append([entry.label, entry.subject] + [f"{v:.6f}" for v in feats])
    width = len(rows[0]) - 2
    _write_csv(out_path, ["label", "subject"] + [f"f{i}" for i in range(width)], rows)
    return out_path


def _fc5_input_from_cache(network, cache):
    """Recover the activations feeding fc5 from a forward cache."""
    for kind, name, c in cache["trunk"]:
        if kind == "linear" and name == "fc5":
            return c[0]          # linear cache holds its input
    raise ValueError("forward cache does not contain an fc5 layer")
