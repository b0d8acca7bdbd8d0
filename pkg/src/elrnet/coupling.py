"""Semi-coupled training of an eLR/HR network pair with per-layer filter sharing.

A coupling schedule assigns each of the five parameterized layers a ratio
c_n; the first k = round(c_n * D_n) output channels of that layer (their
full kernels, biases and batch-norm affine terms) live in a single tensor
physically shared by both networks, so equality of shared weights holds by
construction.  The remaining channels stay network-specific.  Batch-norm
running statistics are always per-network: they summarize resolution-
specific input distributions.

Each training iteration performs the eLR update first, then the HR update,
so shared tensors receive two SGD updates per iteration and the HR step
sees the post-eLR shared weights.  Updates use classical momentum with
weight decay: v <- momentum*v - lr*(g + decay*theta); theta <- theta + v.
At test time ``decouple`` snapshots the eLR network (including the shared
filters) into a self-contained standalone network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .net import Network, NetworkSpec, build_network

__all__ = [
    "CouplingSchedule",
    "CoupledParameterStore",
    "CoupledPair",
    "TrainerConfig",
    "TrainerState",
    "Batch",
    "shared_count",
    "build_coupled_pair",
    "build_single",
    "sgd_update",
    "train_step",
    "lr_schedule",
    "augment_flip",
    "flip_samples",
    "decouple",
]

_HR_SEED_TAG = 0x4852   # distinct init stream for the HR partner


@dataclass(frozen=True)
class CouplingSchedule:
    """Per-layer sharing ratios c_1..c_5, non-decreasing with depth."""

    ratios: tuple[float, float, float, float, float]

    def __post_init__(self):
        if len(self.ratios) != 5:
            raise ValueError(f"schedule needs 5 ratios, got {len(self.ratios)}")
        if any(not 0.0 <= c <= 1.0 for c in self.ratios):
            raise ValueError(f"coupling ratios must lie in [0, 1], got {self.ratios}")
        if any(a > b for a, b in zip(self.ratios, self.ratios[1:])):
            raise ValueError(
                f"coupling ratios must be non-decreasing with depth, got {self.ratios}")

    @classmethod
    def default(cls):
        return cls((0.0, 0.25, 0.5, 0.75, 1.0))

    @classmethod
    def uncoupled(cls):
        return cls((0.0,) * 5)


def shared_count(schedule: CouplingSchedule, layer_index: int, width: int) -> int:
    """Number of shared output channels k = round(c_n * D_n), half away from zero."""
    if not 1 <= layer_index <= 5:
        raise ValueError(f"layer index must be in 1..5, got {layer_index}")
    return int(math.floor(schedule.ratios[layer_index - 1] * width + 0.5))


class CoupledParameterStore:
    """Registry of parameter segments partitioned into shared and per-network sets.

    Segment keys are ``shared:<name>``, ``elr:<name>`` and ``hr:<name>``;
    ``layouts[role][name]`` lists the segment keys whose concatenation along
    the layer's output axis forms that network's logical parameter.  One
    momentum buffer and one update counter exist per segment.
    """

    def __init__(self):
        self.tensors: dict[str, np.ndarray] = {}
        self.layouts: dict[str, dict[str, list[str]]] = {}
        self.velocity: dict[str, np.ndarray] = {}
        self.update_counts: dict[str, int] = {}

    def add(self, key, tensor):
        self.tensors[key] = tensor
        self.velocity[key] = np.zeros_like(tensor)
        self.update_counts[key] = 0

    def _prefixed(self, prefix):
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}

    @property
    def shared(self):
        return self._prefixed("shared:")

    @property
    def elr_only(self):
        return self._prefixed("elr:")

    @property
    def hr_only(self):
        return self._prefixed("hr:")


@dataclass
class CoupledPair:
    """An eLR/HR pair plus its parameter store; ``hr`` is None when uncoupled."""

    elr: Network
    hr: Network | None
    store: CoupledParameterStore
    schedule: CouplingSchedule | None = None

    @property
    def roles(self):
        return ("elr",) if self.hr is None else ("elr", "hr")

    def network(self, role):
        return self.elr if role == "elr" else self.hr

    def bump_versions(self):
        self.elr.version += 1
        if self.hr is not None:
            self.hr.version += 1


def _split(arr, axis, k):
    idx_a = [slice(None)] * arr.ndim
    idx_b = [slice(None)] * arr.ndim
    idx_a[axis] = slice(0, k)
    idx_b[axis] = slice(k, None)
    return arr[tuple(idx_a)].copy(), arr[tuple(idx_b)].copy()


def build_coupled_pair(spec: NetworkSpec, schedule: CouplingSchedule, seed,
                       dtype=np.float32) -> CoupledPair:
    """Build eLR and HR networks sharing the first k_n channels of each layer.

    The eLR network draws its initialization directly from ``seed`` (so an
    uncoupled pair's eLR member is bit-identical to ``build_network(spec,
    seed)``); the HR network uses a derived stream.  Shared channels start
    from the eLR draw.
    """
    elr = build_network(spec, seed, dtype)
    hr = build_network(spec, np.random.SeedSequence(entropy=[int(seed), _HR_SEED_TAG]), dtype)
    store = CoupledParameterStore()
    layout_elr, layout_hr = {}, {}

    for d in elr.defs:
        width = d.shape[d.split_axis]
        k = shared_count(schedule, d.coupling_index, width)
        elr_arr = elr.params[d.name][0]
        hr_arr = hr.params[d.name][0]
        if k == 0:
            store.add(f"elr:{d.name}", elr_arr)
            store.add(f"hr:{d.name}", hr_arr)
            layout_elr[d.name] = [f"elr:{d.name}"]
            layout_hr[d.name] = [f"hr:{d.name}"]
        elif k == width:
            store.add(f"shared:{d.name}", elr_arr)
            hr.params[d.name] = [elr_arr]
            layout_elr[d.name] = layout_hr[d.name] = [f"shared:{d.name}"]
        else:
            shared_seg, elr_own = _split(elr_arr, d.split_axis, k)
            _, hr_own = _split(hr_arr, d.split_axis, k)
            store.add(f"shared:{d.name}", shared_seg)
            store.add(f"elr:{d.name}", elr_own)
            store.add(f"hr:{d.name}", hr_own)
            elr.params[d.name] = [shared_seg, elr_own]
            hr.params[d.name] = [shared_seg, hr_own]
            layout_elr[d.name] = [f"shared:{d.name}", f"elr:{d.name}"]
            layout_hr[d.name] = [f"shared:{d.name}", f"hr:{d.name}"]

    store.layouts["elr"] = layout_elr
    store.layouts["hr"] = layout_hr
    return CoupledPair(elr, hr, store, schedule)


def build_single(spec: NetworkSpec, seed, dtype=np.float32) -> CoupledPair:
    """A lone network wired into the same trainer machinery (role 'elr')."""
    net = build_network(spec, seed, dtype)
    store = CoupledParameterStore()
    layout = {}
    for d in net.defs:
        store.add(f"elr:{d.name}", net.params[d.name][0])
        layout[d.name] = [f"elr:{d.name}"]
    store.layouts["elr"] = layout
    return CoupledPair(net, None, store)


# ---------------------------------------------------------------------------
# optimizer

@dataclass(frozen=True)
class TrainerConfig:
    base_lr: float = 0.05
    lr_decay_factor: float = 10.0
    lr_decay_epochs: int = 10
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 256
    epochs: int = 30
    flip_probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0 or self.lr_decay_factor <= 0 or self.lr_decay_epochs <= 0:
            raise ValueError("learning-rate schedule values must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError(f"flip_probability must be in [0, 1], got {self.flip_probability}")


def lr_schedule(config: TrainerConfig, epoch: int) -> float:
    """Step decay: base_lr divided by the decay factor every decay interval."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return config.base_lr * config.lr_decay_factor ** (-(epoch // config.lr_decay_epochs))


@dataclass
class TrainerState:
    """Mutable per-run trainer state: iteration counter and rng streams."""

    iteration: int = 0
    epoch: int = 0
    last_loss: dict = field(default_factory=dict)
    dropout_rng: dict = field(default_factory=dict)

    @classmethod
    def for_seed(cls, seed):
        streams = {
            role: np.random.default_rng(np.random.SeedSequence(entropy=[int(seed), tag]))
            for role, tag in (("elr", 0x0E17), ("hr", 0x0E18))
        }
        return cls(dropout_rng=streams)


@dataclass
class Batch:
    """Network inputs plus integer labels; inputs may be an (rgb, flow) pair."""

    inputs: object
    labels: np.ndarray


def sgd_update(store: CoupledParameterStore, role: str, net: Network, grads: dict,
               lr: float, momentum: float, weight_decay: float):
    """Momentum SGD over one network's segments; shared storage updates in place."""
    layout = store.layouts[role]
    for d in net.defs:
        pieces = net.split_grad(d.name, grads[d.name])
        for key, g in zip(layout[d.name], pieces):
            theta = store.tensors[key]
            v = store.velocity[key]
            v *= momentum
            v -= lr * (g + weight_decay * theta)
            theta += v
            store.update_counts[key] += 1


def train_step(pair: CoupledPair, elr_batch: Batch, hr_batch: Batch | None,
               config: TrainerConfig, state: TrainerState) -> TrainerState:
    """One iteration: eLR forward/backward/update, then HR, sharing k_n filters.

    Shared tensors are updated in both phases (twice per iteration); the HR
    gradient is evaluated after the eLR update has landed.
    """
    if (pair.hr is None) != (hr_batch is None):
        raise ValueError("hr_batch must be given exactly when the pair has an HR network")
    if hr_batch is not None and not np.array_equal(elr_batch.labels, hr_batch.labels):
        raise ValueError("paired batches must carry identical labels (same videos)")

    lr = lr_schedule(config, state.epoch)
    state.last_loss = {}
    for role, batch in (("elr", elr_batch), ("hr", hr_batch)):
        if batch is None:
            continue
        net = pair.network(role)
        logits, cache = net.forward(batch.inputs, "train", state.dropout_rng[role])
        loss, probs = ops.softmax_cross_entropy(logits, batch.labels)
        dlogits = ops.softmax_cross_entropy_backward(probs, batch.labels)
        grads = net.backward(cache, dlogits)
        sgd_update(pair.store, role, net, grads, lr, config.momentum, config.weight_decay)
        pair.bump_versions()
        state.last_loss[role] = float(loss)
    state.iteration += 1
    return state


# ---------------------------------------------------------------------------
# augmentation

def flip_samples(rgb, flow_fields, mask):
    """Mirror selected samples across the vertical axis.

    ``rgb`` is [N,H,W,C], ``flow_fields`` is [N,K,H,W,2] of raw (u, v)
    displacement fields.  Mirroring reverses x-motion, so the horizontal
    component is negated; callers color-encode after augmentation.
    """
    rgb = rgb.copy()
    flow_fields = flow_fields.copy()
    rgb[mask] = rgb[mask][:, :, ::-1, :]
    flipped = flow_fields[mask][:, :, :, ::-1, :]
    flipped[..., 0] = -flipped[..., 0]
    flow_fields[mask] = flipped
    return rgb, flow_fields


def augment_flip(rgb, flow_fields, probability, rng):
    """Independently mirror each sample (and its flow stack) with the given probability."""
    if not 0.0 <= probability <= 1.0:
        raise ValueError(f"flip probability must be in [0, 1], got {probability}")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    mask = gen.random(rgb.shape[0]) < probability
    return flip_samples(rgb, flow_fields, mask)


def decouple(pair: CoupledPair) -> Network:
    """Snapshot the eLR network (shared filters included) as a standalone net."""
    src = pair.elr
    out = Network(src.spec, src.dtype)
    for d in src.defs:
        out.params[d.name] = [src.get(d.name).copy()]
    for name, (mean, var) in src.bn_running.items():
        out.bn_running[name] = (mean.copy(), var.copy())
    return out
