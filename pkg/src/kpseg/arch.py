"""U-Net of stacked kernel point convolutions, its training step and full-cloud inference."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import kpkernel as kp
from . import nncore as nn
from .pccore import (
    IGNORE_LABEL,
    NUM_CLASSES,
    AugConfig,
    LabeledCloud,
    NeighborTable,
    augment,
    extract_sphere,
    grid_subsample,
    nearest_index,
    radius_search,
)

DEFAULT_RADII = (0.1, 0.2, 0.4, 0.8, 1.6)
DEFAULT_CHANNELS = (32, 64, 128, 256, 512)
TINY_CHANNELS = (8, 16, 32, 64, 128)


@dataclass
class NetworkConfig:
    num_layers: int = 5
    radii: tuple = DEFAULT_RADII
    cell_sizes: Optional[tuple] = None
    radius_multiplier: float = 1.0
    stack_depth: int = 3
    channels: tuple = DEFAULT_CHANNELS
    num_classes: int = NUM_CLASSES
    sphere_radius: float = 5.0
    batch_spheres: int = 6
    kernel_points: int = 15
    influence_ratio: float = 1.5
    max_neighbors: int = 40
    leaky_slope: float = 0.1
    bn_momentum: float = 0.98
    bn_epsilon: float = 1e-6
    use_intensity: bool = False
    kernel_seed: int = 0

    def __post_init__(self):
        self.radii = tuple(float(r) for r in self.radii)
        self.channels = tuple(int(c) for c in self.channels)
        if self.cell_sizes is None:
            self.cell_sizes = self.radii
        self.cell_sizes = tuple(float(c) for c in self.cell_sizes)
        self.validate()

    def validate(self):
        L = self.num_layers
        if L < 1:
            raise ValueError("num_layers must be >= 1")
        if len(self.radii) != L or len(self.cell_sizes) != L or len(self.channels) != L:
            raise ValueError(f"radii, cell_sizes and channels need {L} entries each")
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])) or self.radii[0] <= 0:
            raise ValueError(f"radii must be positive and strictly increasing, got {self.radii}")
        if any(c <= 0 for c in self.cell_sizes):
            raise ValueError("cell sizes must be positive")
        if self.stack_depth < 1:
            raise ValueError(f"stack_depth must be >= 1, got {self.stack_depth}")
        if any(c < 1 for c in self.channels):
            raise ValueError("channel widths must be >= 1")
        if self.kernel_points < 2:
            raise ValueError("kernel_points must be >= 2")
        for name in ("radius_multiplier", "influence_ratio", "sphere_radius", "bn_epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_spheres < 1 or self.max_neighbors < 1 or self.num_classes < 2:
            raise ValueError("batch_spheres, max_neighbors must be >= 1 and num_classes >= 2")

    def conv_radius(self, layer: int) -> float:
        return self.radius_multiplier * self.radii[layer]

    @property
    def in_channels(self) -> int:
        return 2 if self.use_intensity else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


# ----------------------------------------------------------------------------
# Multiscale batch
# ----------------------------------------------------------------------------


@dataclass
class MultiscaleBatch:
    points: List[np.ndarray]
    neighbors: List[NeighborTable]
    pools: List[NeighborTable]  # pools[l]: layer l+1 queries over layer l supports
    upsamples: List[np.ndarray]  # upsamples[l]: nearest layer l+1 point of every layer l point
    lengths: List[np.ndarray]  # per layer, points per sphere
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    _ops: dict = field(default_factory=dict, repr=False)

    @property
    def num_layers(self) -> int:
        return len(self.points)

    def conv_operator(self, layer: int, kd: kp.KernelDisposition):
        key = ("conv", layer)
        if key not in self._ops:
            p = self.points[layer]
            self._ops[key] = kp.influence_operator(p, p, self.neighbors[layer], kd)
        return self._ops[key]

    def pool_operator(self, layer: int, kd: kp.KernelDisposition):
        """Operator taking layer ``layer`` features to layer ``layer + 1`` points."""
        key = ("pool", layer)
        if key not in self._ops:
            self._ops[key] = kp.influence_operator(
                self.points[layer + 1], self.points[layer], self.pools[layer], kd
            )
        return self._ops[key]


def _merge_tables(tables, query_offsets, support_offsets, n_supports, radius):
    width = max(t.indices.shape[1] for t in tables)
    rows = []
    for t, so in zip(tables, support_offsets):
        idx = t.indices
        merged = np.where(idx < t.n_supports, idx + so, n_supports)
        if idx.shape[1] < width:
            pad = np.full((idx.shape[0], width - idx.shape[1]), n_supports, dtype=np.int64)
            merged = np.hstack([merged, pad])
        rows.append(merged)
    return NeighborTable(np.vstack(rows).astype(np.int64), radius, n_supports)


def _sphere_pyramid(coords: np.ndarray, cfg: NetworkConfig):
    # cells are anchored at the sphere's own min corner so a rigid translation of the batch keeps the layout
    origin = coords.min(axis=0)
    pts = [coords]
    for l in range(1, cfg.num_layers):
        sub = grid_subsample(LabeledCloud(pts[-1]), cfg.cell_sizes[l], "none", origin=origin)
        if len(sub) == 0:
            raise ValueError(f"layer {l} is empty after subsampling")
        pts.append(sub.coords)
    neigh = [radius_search(p, p, cfg.conv_radius(l), cfg.max_neighbors) for l, p in enumerate(pts)]
    pools = [
        radius_search(pts[l + 1], pts[l], cfg.conv_radius(l + 1), cfg.max_neighbors)
        for l in range(cfg.num_layers - 1)
    ]
    ups = [nearest_index(pts[l], pts[l + 1]) for l in range(cfg.num_layers - 1)]
    return pts, neigh, pools, ups


def input_features(clouds: Sequence[LabeledCloud], cfg: NetworkConfig) -> np.ndarray:
    n = sum(len(c) for c in clouds)
    ones = np.ones((n, 1))
    if not cfg.use_intensity:
        return ones
    inten = np.concatenate([
        c.intensity if c.intensity is not None else np.zeros(len(c)) for c in clouds
    ])
    return np.hstack([ones, inten[:, None]])


def build_pyramid(batch, cfg: NetworkConfig, lengths=None) -> MultiscaleBatch:
    """Subsampled layers, neighbor tables and pooling/upsampling maps for a batch.

    ``batch`` is a LabeledCloud (optionally split into spheres by ``lengths``)
    or a list of clouds. Spheres never share neighbors.
    """
    if isinstance(batch, LabeledCloud):
        if lengths is None:
            clouds = [batch]
        else:
            bounds = np.cumsum([0] + list(lengths))
            if bounds[-1] != len(batch):
                raise ValueError("sphere lengths do not sum to the batch size")
            clouds = [batch.subset(slice(a, b)) for a, b in zip(bounds[:-1], bounds[1:])]
    else:
        clouds = list(batch)
    if not clouds or any(len(c) == 0 for c in clouds):
        raise ValueError("build_pyramid needs non-empty spheres")
    L = cfg.num_layers
    per = [_sphere_pyramid(c.coords, cfg) for c in clouds]
    lengths_l = [np.array([len(p[0][l]) for p in per], dtype=np.int64) for l in range(L)]
    offsets = [np.concatenate([[0], np.cumsum(n)[:-1]]) for n in lengths_l]
    totals = [int(n.sum()) for n in lengths_l]
    points = [np.vstack([p[0][l] for p in per]) for l in range(L)]
    neighbors = [
        _merge_tables([p[1][l] for p in per], offsets[l], offsets[l], totals[l], cfg.conv_radius(l))
        for l in range(L)
    ]
    pools = [
        _merge_tables([p[2][l] for p in per], offsets[l + 1], offsets[l], totals[l], cfg.conv_radius(l + 1))
        for l in range(L - 1)
    ]
    ups = [np.concatenate([p[3][l] + offsets[l + 1][i] for i, p in enumerate(per)]) for l in range(L - 1)]
    labels = None
    if all(c.labels is not None for c in clouds):
        labels = np.concatenate([c.labels for c in clouds])
    return MultiscaleBatch(points, neighbors, pools, ups, lengths_l, input_features(clouds, cfg), labels)


def upsample_nearest(features: np.ndarray, index: np.ndarray) -> np.ndarray:
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= len(features)):
        raise IndexError("upsampling index out of range")
    return features[index]


def upsample_nearest_backward(grad_out: np.ndarray, index: np.ndarray, n_coarse: int) -> np.ndarray:
    grad = np.zeros((n_coarse, grad_out.shape[1]))
    np.add.at(grad, index, grad_out)
    return grad


def _pad(x):
    return np.vstack([x, np.zeros((1, x.shape[1]))])


# ----------------------------------------------------------------------------
# Network
# ----------------------------------------------------------------------------


class Network:
    """Encoder of stacked BN-KPConv-LeakyReLU blocks with strided-KPConv pooling,
    nearest upsampling decoder with skip links, and a linear head."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        self.cfg = cfg
        self.params = nn.ParameterStore()
        self.bn: dict = {}
        base = kp.generate_kernel_points(cfg.kernel_points, 1.0, cfg.kernel_seed, influence_ratio=cfg.influence_ratio)
        self.kernels = [base.scaled(cfg.conv_radius(l), cfg.influence_ratio) for l in range(cfg.num_layers)]
        rng = np.random.default_rng(seed)
        K = cfg.kernel_points
        C = cfg.channels
        c_prev = cfg.in_channels
        for l in range(cfg.num_layers):
            if l > 0:
                self._kp_param(f"pool{l - 1}.kp.W", K, C[l - 1], C[l], rng)
                c_prev = C[l]
            for j in range(cfg.stack_depth):
                if self.has_bn(l, j):
                    self._bn(f"enc{l}.unit{j}.bn", c_prev)
                self._kp_param(f"enc{l}.unit{j}.kp.W", K, c_prev, C[l], rng)
                c_prev = C[l]
        for l in range(cfg.num_layers - 2, -1, -1):
            c_in = C[l + 1] + C[l]
            self._bn(f"dec{l}.bn", c_in)
            self.params.add(f"dec{l}.unary.W", rng.normal(0.0, np.sqrt(2.0 / c_in), (c_in, C[l])))
            self.params.add(f"dec{l}.unary.b", np.zeros(C[l]))
        self.params.add("head.W", rng.normal(0.0, np.sqrt(1.0 / C[0]), (C[0], cfg.num_classes)))
        self.params.add("head.b", np.zeros(cfg.num_classes))
        self.step = 0

    @staticmethod
    def has_bn(layer: int, unit: int) -> bool:
        # standardizing the constant-one input feature would erase it
        return not (layer == 0 and unit == 0)

    def _kp_param(self, name, K, c_in, c_out, rng):
        self.params.add(name, rng.normal(0.0, np.sqrt(2.0 / (K * c_in)), (K, c_in, c_out)))

    def _bn(self, name, channels):
        g = self.params.add(name + ".gamma", np.ones(channels))
        b = self.params.add(name + ".beta", np.zeros(channels))
        self.bn[name] = nn.BNState(g.value, b.value, np.zeros(channels), np.ones(channels),
                                   momentum=self.cfg.bn_momentum, epsilon=self.cfg.bn_epsilon)

    def set_mode(self, mode: str):
        for s in self.bn.values():
            s.mode = mode

    def buffers(self) -> dict:
        out = {}
        for name, s in self.bn.items():
            out[name + ".running_mean"] = s.running_mean
            out[name + ".running_var"] = s.running_var
        return out

    # -- building blocks ---------------------------------------------------

    def _unit(self, x, A, prefix, tape, update_stats):
        """BN -> KPConv -> LeakyReLU."""
        bn_cache = None
        if prefix + ".bn" in self.bn:
            x, bn_cache = nn.batch_norm(x, self.bn[prefix + ".bn"], update_stats)
        W = self.params[prefix + ".kp.W"].value
        pre, weighted = kp.apply_operator(A, _pad(x), W)
        out = nn.leaky_relu(pre, self.cfg.leaky_slope)
        tape.append(("unit", prefix, A, weighted, pre, bn_cache))
        return out

    def _unit_backward(self, g, entry):
        _, prefix, A, weighted, pre, bn_cache = entry
        p = self.params[prefix + ".kp.W"]
        g = nn.leaky_relu_backward(pre, g, self.cfg.leaky_slope)
        gx, gW = kp.apply_operator_backward(A, weighted, p.value, g)
        p.grad += gW
        gx = gx[:-1]
        if bn_cache is not None:
            gamma = self.params[prefix + ".bn.gamma"]
            gx, gg, gb = nn.batch_norm_backward(gx, gamma.value, bn_cache)
            gamma.grad += gg
            self.params[prefix + ".bn.beta"].grad += gb
        return gx

    def stacked_block(self, layer: int, x, A, tape=None, update_stats=True):
        tape = [] if tape is None else tape
        for j in range(self.cfg.stack_depth):
            x = self._unit(x, A, f"enc{layer}.unit{j}", tape, update_stats)
        return x

    def pool_block(self, layer: int, x, A, tape=None):
        """Strided KPConv from layer ``layer`` to ``layer + 1``, then LeakyReLU."""
        tape = [] if tape is None else tape
        W = self.params[f"pool{layer}.kp.W"].value
        pre, weighted = kp.apply_operator(A, _pad(x), W)
        tape.append(("pool", f"pool{layer}", A, weighted, pre, None))
        return nn.leaky_relu(pre, self.cfg.leaky_slope)

    # -- full pass ---------------------------------------------------------

    def forward(self, batch: MultiscaleBatch, update_stats: bool = True):
        cfg = self.cfg
        if batch.num_layers != cfg.num_layers:
            raise ValueError(f"batch has {batch.num_layers} layers, network expects {cfg.num_layers}")
        if batch.features.shape[1] != cfg.in_channels:
            raise ValueError(f"batch features have {batch.features.shape[1]} channels, expected {cfg.in_channels}")
        for l, t in enumerate(batch.neighbors):
            if not np.isclose(t.radius, cfg.conv_radius(l)):
                raise ValueError(f"layer {l} neighbors built at radius {t.radius}, expected {cfg.conv_radius(l)}")
        self._batch = batch
        tape = []
        skips = []
        x = batch.features
        for l in range(cfg.num_layers):
            if l > 0:
                x = self.pool_block(l - 1, x, batch.pool_operator(l - 1, self.kernels[l]), tape)
            x = self.stacked_block(l, x, batch.conv_operator(l, self.kernels[l]), tape, update_stats)
            skips.append(x)
            tape.append(("skip", l))
        y = skips[-1]
        for l in range(cfg.num_layers - 2, -1, -1):
            up = upsample_nearest(y, batch.upsamples[l])
            z = np.hstack([up, skips[l]])
            zn, bn_cache = nn.batch_norm(z, self.bn[f"dec{l}.bn"], update_stats)
            W, b = self.params[f"dec{l}.unary.W"].value, self.params[f"dec{l}.unary.b"].value
            pre = nn.unary_forward(zn, W, b)
            tape.append(("dec", l, zn, pre, bn_cache, len(y)))
            y = nn.leaky_relu(pre, cfg.leaky_slope)
        logits = nn.unary_forward(y, self.params["head.W"].value, self.params["head.b"].value)
        tape.append(("head", y))
        self._tape = tape
        return logits

    def backward(self, grad_logits):
        """Accumulate parameter gradients of the last forward; returns the input-feature gradient."""
        cfg = self.cfg
        tape = list(self._tape)
        _, y = tape.pop()
        gy, gW, gb = nn.unary_backward(y, self.params["head.W"].value, grad_logits)
        self.params["head.W"].grad += gW
        self.params["head.b"].grad += gb
        skip_grads = {}
        while tape and tape[-1][0] == "dec":
            _, l, zn, pre, bn_cache, n_coarse = tape.pop()
            g = nn.leaky_relu_backward(pre, gy, cfg.leaky_slope)
            W = self.params[f"dec{l}.unary.W"]
            gz, gW, gb = nn.unary_backward(zn, W.value, g)
            W.grad += gW
            self.params[f"dec{l}.unary.b"].grad += gb
            gamma = self.params[f"dec{l}.bn.gamma"]
            gz, gg, gbeta = nn.batch_norm_backward(gz, gamma.value, bn_cache)
            gamma.grad += gg
            self.params[f"dec{l}.bn.beta"].grad += gbeta
            c_up = gz.shape[1] - cfg.channels[l]
            skip_grads[l] = gz[:, c_up:]
            gy = upsample_nearest_backward(gz[:, :c_up], self._upsample_index(l), n_coarse)
        skip_grads[cfg.num_layers - 1] = gy
        g = None
        while tape:
            entry = tape.pop()
            kind = entry[0]
            if kind == "skip":
                l = entry[1]
                g = skip_grads[l] if g is None else g + skip_grads[l]
            elif kind == "unit":
                g = self._unit_backward(g, entry)
            elif kind == "pool":
                _, prefix, A, weighted, pre, _ = entry
                p = self.params[prefix + ".kp.W"]
                gp = nn.leaky_relu_backward(pre, g, cfg.leaky_slope)
                gx, gW = kp.apply_operator_backward(A, weighted, p.value, gp)
                p.grad += gW
                g = gx[:-1]
        self._tape = None
        return g

    def _upsample_index(self, l):
        return self._batch.upsamples[l]

    def __call__(self, batch: MultiscaleBatch, update_stats: bool = True):
        return self.forward(batch, update_stats)


def network_forward(net: Network, batch: MultiscaleBatch, update_stats: bool = True) -> np.ndarray:
    return net(batch, update_stats)


# ----------------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.98
    steps_per_epoch: int = 500
    epochs: int = 50
    lr_decay: float = 1.0  # multiplied into lr once per epoch
    grad_clip: Optional[float] = None
    class_weighting: str = "none"  # "none" | "inverse_frequency"
    center_sampling: str = "uniform"  # "uniform" over points | "class_balanced": class first, then a point of it
    scale_range: tuple = (0.9, 1.1)
    rotate_z: bool = True
    shuffle: bool = True
    max_retries: int = 20
    # fresh batches used to re-estimate BN statistics once training ends (0 keeps the running averages)
    bn_refresh_batches: int = 16

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.steps_per_epoch < 1 or self.epochs < 1:
            raise ValueError("steps_per_epoch and epochs must be >= 1")
        if self.class_weighting not in ("none", "inverse_frequency"):
            raise ValueError(f"unknown class_weighting {self.class_weighting!r}")
        if self.center_sampling not in ("uniform", "class_balanced"):
            raise ValueError(f"unknown center_sampling {self.center_sampling!r}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")
        if self.bn_refresh_batches < 0:
            raise ValueError("bn_refresh_batches must be >= 0")

    def lr_at(self, step: int) -> float:
        return self.lr * self.lr_decay ** (step // self.steps_per_epoch)


@dataclass
class StepReport:
    step: int
    loss: float
    batch_oa: float
    lr: float

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "loss": self.loss, "batch_oa": self.batch_oa, "lr": self.lr})


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def sample_spheres(clouds: Sequence[LabeledCloud], cfg: NetworkConfig, tcfg: TrainConfig,
                   rng: np.random.Generator) -> List[LabeledCloud]:
    """Draw ``batch_spheres`` augmented spheres around random labeled points."""
    sizes = np.array([len(c) for c in clouds], dtype=np.float64)
    aug = AugConfig(tcfg.scale_range, tcfg.rotate_z, tcfg.shuffle)
    pick = _balanced_picker(clouds) if tcfg.center_sampling == "class_balanced" else None
    spheres = []
    for _ in range(cfg.batch_spheres):
        for attempt in range(tcfg.max_retries):
            if pick is None:
                ci = int(rng.choice(len(clouds), p=sizes / sizes.sum()))
                pi = int(rng.integers(len(clouds[ci])))
            else:
                ci, pi = pick(rng)
            cloud = clouds[ci]
            center = cloud.coords[pi]
            sphere, _ = extract_sphere(cloud, center, cfg.sphere_radius)
            if len(sphere) >= 2 and np.any(sphere.labels != IGNORE_LABEL):
                break
        else:
            raise RuntimeError(f"no sphere with labeled points after {tcfg.max_retries} draws")
        # sphere-local frame keeps coordinates small
        sphere = sphere.with_coords(sphere.coords - center)
        spheres.append(augment(sphere, aug, rng))
    return spheres


def _balanced_picker(clouds):
    """Draw a present class uniformly, then a point of that class uniformly over all clouds."""
    owners = {}
    for ci, c in enumerate(clouds):
        if c.labels is None:
            continue
        for cls in np.unique(c.labels):
            if cls == IGNORE_LABEL:
                continue
            idx = np.flatnonzero(c.labels == cls)
            owners.setdefault(int(cls), []).append((ci, idx))
    if not owners:
        raise RuntimeError("class-balanced sampling needs labeled points")
    classes = sorted(owners)

    def pick(rng):
        parts = owners[classes[int(rng.integers(len(classes)))]]
        sizes = np.array([len(idx) for _, idx in parts], dtype=np.float64)
        ci, idx = parts[int(rng.choice(len(parts), p=sizes / sizes.sum()))]
        return ci, int(idx[rng.integers(len(idx))])

    return pick


def make_training_batch(clouds, cfg: NetworkConfig, tcfg: TrainConfig, seed: int, step: int) -> MultiscaleBatch:
    spheres = sample_spheres(clouds, cfg, tcfg, step_rng(seed, step))
    return build_pyramid(spheres, cfg)


def class_weights_from(clouds, num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes)
    for c in clouds:
        counts += c.class_histogram()[:num_classes]
    freq = counts / max(counts.sum(), 1.0)
    w = np.where(freq > 0, 1.0 / np.maximum(freq, 1e-12), 0.0)
    return w / w[w > 0].mean()


def train_step(net: Network, batch: MultiscaleBatch, tcfg: TrainConfig, class_weights=None) -> StepReport:
    net.set_mode("train")
    logits = net(batch)
    loss, grad = nn.softmax_cross_entropy(logits, batch.labels, class_weights=class_weights)
    net.backward(grad)
    lr = tcfg.lr_at(net.step)
    nn.momentum_step(net.params, lr, tcfg.momentum, tcfg.grad_clip)
    mask = batch.labels != IGNORE_LABEL
    oa = float((logits[mask].argmax(axis=1) == batch.labels[mask]).mean())
    report = StepReport(net.step, loss, oa, lr)
    net.step += 1
    return report


def refresh_bn_stats(net: Network, clouds: Sequence[LabeledCloud], tcfg: TrainConfig, seed: int,
                     batches: int) -> None:
    """Replace the running BN statistics by population estimates under the current weights.

    The exponential averages collected during training trail the weights by
    roughly 1 / (1 - momentum) steps; this pools ``batches`` fresh training
    batches instead. Weights are untouched.
    """
    if batches <= 0:
        return
    states = net.bn
    saved = {k: s.momentum for k, s in states.items()}
    means = {k: [] for k in states}
    varis = {k: [] for k in states}
    net.set_mode("train")
    try:
        for s in states.values():
            s.momentum = 0.0
        for i in range(batches):
            rng = np.random.default_rng([seed, net.step, i, 1])
            batch = build_pyramid(sample_spheres(clouds, net.cfg, tcfg, rng), net.cfg)
            net(batch)
            net._tape = None
            for k, s in states.items():
                means[k].append(s.running_mean.copy())
                varis[k].append(s.running_var.copy())
    finally:
        for k, s in states.items():
            s.momentum = saved[k]
    for k, s in states.items():
        m = np.array(means[k])
        s.running_mean = m.mean(axis=0)
        s.running_var = np.array(varis[k]).mean(axis=0) + m.var(axis=0)


def train(net: Network, clouds: Sequence[LabeledCloud], tcfg: TrainConfig, steps: int, seed: int = 0,
          workers: int = 1, log=None, callback=None) -> List[StepReport]:
    """Run ``steps`` training steps from ``net.step``.

    Batches depend only on (seed, step); with ``workers > 1`` they are
    prepared ahead in background threads, which leaves results unchanged.
    Afterwards the BN statistics are refreshed (see ``refresh_bn_stats``).
    """
    cfg = net.cfg
    weights = class_weights_from(clouds, cfg.num_classes) if tcfg.class_weighting == "inverse_frequency" else None
    start = net.step
    reports = []

    def make(i):
        return make_training_batch(clouds, cfg, tcfg, seed, i)

    def consume(batch):
        r = train_step(net, batch, tcfg, weights)
        reports.append(r)
        if log is not None:
            log.write(r.to_json() + "\n")
            log.flush()
        if callback is not None:
            callback(r)

    if workers <= 1:
        for i in range(start, start + steps):
            consume(make(i))
    else:
        _train_threaded(make, consume, start, steps, workers)
    if steps > 0:
        refresh_bn_stats(net, clouds, tcfg, seed, tcfg.bn_refresh_batches)
    return reports


def _train_threaded(make, consume, start, steps, workers):
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers - 1 or 1) as pool:
        pending = {}
        ahead = max(1, workers - 1)
        nxt = start
        for i in range(start, start + steps):
            while nxt < start + steps and nxt < i + 1 + ahead:
                pending[nxt] = pool.submit(make, nxt)
                nxt += 1
            consume(pending.pop(i).result())


# ----------------------------------------------------------------------------
# Inference
# ----------------------------------------------------------------------------


def tile_centers(coords: np.ndarray, stride: float) -> np.ndarray:
    """Centers of the occupied cells of a grid of spacing ``stride`` anchored at the cloud's min corner."""
    origin = coords.min(axis=0)
    cells = np.unique(np.floor((coords - origin) / stride).astype(np.int64), axis=0)
    return origin + (cells + 0.5) * stride


def predict_proba(net: Network, cloud: LabeledCloud, tile_stride: float = 2.5) -> np.ndarray:
    """Per-point class probabilities averaged over every covering sphere."""
    cfg = net.cfg
    R = cfg.sphere_radius
    if not 0 < tile_stride <= R:
        raise ValueError(f"tile stride must be in (0, {R}], got {tile_stride}")
    n = len(cloud)
    votes = np.zeros((n, cfg.num_classes))
    hits = np.zeros(n)
    if n == 0:
        return votes
    net.set_mode("eval")
    centers = tile_centers(cloud.coords, tile_stride)
    group = max(1, cfg.batch_spheres)
    for g0 in range(0, len(centers), group):
        spheres, indices = [], []
        for c in centers[g0:g0 + group]:
            sphere, idx = extract_sphere(cloud, c, R)
            if len(idx) == 0:
                continue
            spheres.append(sphere.with_coords(sphere.coords - c))
            indices.append(idx)
        if not spheres:
            continue
        batch = build_pyramid(spheres, cfg)
        probs = nn.softmax(net(batch, update_stats=False))
        idx = np.concatenate(indices)
        np.add.at(votes, idx, probs)
        np.add.at(hits, idx, 1.0)
    if np.any(hits == 0):
        raise RuntimeError("a point is not covered by any tile")
    return votes / hits[:, None]


def predict_cloud(net: Network, cloud: LabeledCloud, tile_stride: float = 2.5, subsample: bool = True) -> np.ndarray:
    """Label every point of ``cloud``.

    With ``subsample`` the cloud is first reduced to the first-layer grid
    (anchored at its min corner) and each point inherits the label of its cell.
    """
    if len(cloud) == 0:
        return np.zeros(0, dtype=np.uint8)
    if subsample:
        sub, inverse = grid_subsample(
            LabeledCloud(cloud.coords, cloud.intensity), net.cfg.cell_sizes[0], "none",
            origin=cloud.coords.min(axis=0), return_inverse=True,
        )
        labels = predict_proba(net, sub, tile_stride).argmax(axis=1).astype(np.uint8)
        return labels[inverse]
    return predict_proba(net, cloud, tile_stride).argmax(axis=1).astype(np.uint8)


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------

CKPT_MAGIC = b"KPCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode()
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def checkpoint_bytes(net: Network, rng_state: Optional[dict] = None) -> bytes:
    meta = {"config": net.cfg.to_dict(), "step": net.step, "rng_state": rng_state}
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    records = []
    for l, kd in enumerate(net.kernels):
        records.append(_record(f"kernel{l}.points", kd.points))
    for p in net.params:
        records.append(_record(p.name, p.value))
        records.append(_record(p.name + "@momentum", p.momentum_buffer))
    for name, arr in net.buffers().items():
        records.append(_record(name, arr))
    out = CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(blob)) + blob
    return out + struct.pack("<I", len(records)) + b"".join(records)


def save_checkpoint(net: Network, path, rng_state: Optional[dict] = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(net, rng_state))


def _parse_records(raw: bytes, pos: int):
    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointError(f"truncated checkpoint at offset {pos}")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(raw):
            raise CheckpointError(f"truncated checkpoint at offset {pos}")
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) * 8
        if pos + size > len(raw):
            raise CheckpointError(f"truncated checkpoint in record {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
        pos += size
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after the last record")
    return out


def read_checkpoint(path):
    """Returns (meta, records) after validating the container."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, blen = struct.unpack_from("<IQ", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    if 16 + blen > len(raw):
        raise CheckpointError(f"{path}: truncated config blob")
    try:
        meta = json.loads(raw[16:16 + blen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config blob ({exc})") from None
    return meta, _parse_records(raw, 16 + blen)


def load_checkpoint(path, expect: Optional[NetworkConfig] = None):
    """Rebuild a network from a checkpoint. Returns (net, rng_state).

    With ``expect`` the stored configuration must match it exactly.
    """
    meta, records = read_checkpoint(path)
    cfg = NetworkConfig.from_dict(meta["config"])
    if expect is not None:
        a, b = cfg.to_dict(), expect.to_dict()
        diff = [f"{k}: checkpoint {a[k]!r} vs requested {b[k]!r}" for k in a if a[k] != b[k]]
        if diff:
            raise CheckpointError(f"{path}: config mismatch ({'; '.join(diff)})")
    net = Network(cfg)
    staged = {}
    for l, kd in enumerate(net.kernels):
        arr = records.pop(f"kernel{l}.points", None)
        if arr is None or arr.shape != kd.points.shape:
            raise CheckpointError(f"{path}: missing or misshapen kernel{l}.points")
        staged[("kernel", l)] = arr
    for p in net.params:
        for name in (p.name, p.name + "@momentum"):
            arr = records.pop(name, None)
            if arr is None:
                raise CheckpointError(f"{path}: missing parameter {name!r}")
            if arr.shape != p.shape:
                raise CheckpointError(f"{path}: parameter {name!r} has shape {arr.shape}, expected {p.shape}")
            staged[name] = arr
    buffers = net.buffers()
    for name, ref in buffers.items():
        arr = records.pop(name, None)
        if arr is None or arr.shape != ref.shape:
            raise CheckpointError(f"{path}: missing or misshapen buffer {name!r}")
        staged[name] = arr
    if records:
        raise CheckpointError(f"{path}: unexpected records {sorted(records)}")
    # everything validated; now commit
    net.kernels = [
        kp.KernelDisposition(staged[("kernel", l)], kd.radius, kd.influence) for l, kd in enumerate(net.kernels)
    ]
    for p in net.params:
        p.value[...] = staged[p.name]
        p.momentum_buffer[...] = staged[p.name + "@momentum"]
    for name, s in net.bn.items():
        s.running_mean = staged[name + ".running_mean"]
        s.running_var = staged[name + ".running_var"]
    net.step = int(meta["step"])
    return net, meta.get("rng_state")
