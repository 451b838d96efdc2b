"""The per-joint two-branch regressor, its backpropagation and Adam training.

All sub-networks of a model share one input and have identical shapes, so
their parameters are stored stacked along a leading axis of length ``K``
(24 for the per-joint models, 1 for the monolithic ones).  A single batched
matmul then evaluates every sub-network at once.

Parameter names: ``emg.{0,1}``, ``angle.{0,1}`` and ``root.{0,1}``, each with
``.W`` of shape ``(K, fan_in, fan_out)`` and ``.b`` of shape ``(K, fan_out)``.
Every layer is rectified except ``root.1``, which is linear.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import containers
from .errors import ContractError, InputError, TrainingDivergedError
from .kinematics import N_DOF
from .signals import DEFAULT_LAYOUT, TrainingWindows, WindowLayout

log = logging.getLogger(__name__)

VARIANTS = ("full", "B", "I", "W", "I-B", "W-B")


@dataclass(frozen=True)
class SubNetworkConfig:
    emg_input_size: int = 1536
    angle_input_size: int = 192
    emg_hidden_width: int = 512
    angle_hidden_width: int = 64
    angle_output_width: int = 24
    root_hidden_width: int = 134
    n_outputs: int = 1

    @classmethod
    def from_inputs(cls, emg_input_size: int, angle_input_size: int, emg_width: int | None = None,
                    width_factor: int = 1, n_outputs: int = 1) -> "SubNetworkConfig":
        """Widths as functions of the branch input sizes.

        EMG branch hidden layers are ``I_E // 3`` wide (or ``emg_width``),
        the angle branch is ``I_A // 3`` then 24, the root hidden layer is a
        quarter of the merged width.  ``width_factor`` scales every hidden
        width.
        """
        we = (emg_input_size // 3 if emg_width is None else emg_width) * width_factor
        if angle_input_size:
            wa = max(angle_input_size // 3, 1) * width_factor
            ao = 24 * width_factor
        else:
            wa = ao = 0
        merged = we + ao
        return cls(emg_input_size, angle_input_size, max(we, 1), wa, ao,
                   max(merged // 4, 1), n_outputs)

    def __post_init__(self):
        if self.emg_input_size < 1 or self.emg_hidden_width < 1 or self.root_hidden_width < 1:
            raise ContractError("layer widths must be >= 1")
        if self.angle_input_size and (self.angle_hidden_width < 1 or self.angle_output_width < 1):
            raise ContractError("angle branch widths must be >= 1")

    @property
    def has_angle_branch(self) -> bool:
        return self.angle_input_size > 0

    @property
    def merged_width(self) -> int:
        return self.emg_hidden_width + (self.angle_output_width if self.has_angle_branch else 0)

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        shapes = {
            "emg.0": (self.emg_input_size, self.emg_hidden_width),
            "emg.1": (self.emg_hidden_width, self.emg_hidden_width),
        }
        if self.has_angle_branch:
            shapes["angle.0"] = (self.angle_input_size, self.angle_hidden_width)
            shapes["angle.1"] = (self.angle_hidden_width, self.angle_output_width)
        shapes["root.0"] = (self.merged_width, self.root_hidden_width)
        shapes["root.1"] = (self.root_hidden_width, self.n_outputs)
        return shapes


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-5
    eps: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    batch_size: int = 10
    epochs: int = 3
    seed: int = 0
    teacher_forcing: bool = True
    # use every n-th window only; 1 keeps them all
    window_stride: int = 1

    def __post_init__(self):
        if not self.teacher_forcing:
            raise InputError("training always feeds recorded angles; teacher_forcing must be True")
        if self.batch_size < 1 or self.epochs < 1 or self.window_stride < 1:
            raise InputError("batch_size, epochs and window_stride must be >= 1")


@dataclass
class SubNetwork:
    """Weights of one sub-network (views into the stacked model)."""

    config: SubNetworkConfig
    params: dict[str, np.ndarray]


def _relu(x):
    return np.maximum(x, 0.0, out=x)


def forward_subnetwork(sub: SubNetwork, emg_input: np.ndarray, angle_input: np.ndarray | None = None) -> np.ndarray:
    """Output of a single sub-network for one input vector or a batch."""
    cfg = sub.config
    p = sub.params
    e = np.atleast_2d(np.asarray(emg_input, dtype=p["emg.0.W"].dtype))
    if e.shape[1] != cfg.emg_input_size:
        raise ContractError(f"EMG input has {e.shape[1]} values, expected {cfg.emg_input_size}")
    h = _relu(e @ p["emg.0.W"] + p["emg.0.b"])
    h = _relu(h @ p["emg.1.W"] + p["emg.1.b"])
    parts = [h]
    if cfg.has_angle_branch:
        a = np.atleast_2d(np.asarray(angle_input, dtype=p["emg.0.W"].dtype))
        if a.shape[1] != cfg.angle_input_size:
            raise ContractError(f"angle input has {a.shape[1]} values, expected {cfg.angle_input_size}")
        g = _relu(a @ p["angle.0.W"] + p["angle.0.b"])
        parts.append(_relu(g @ p["angle.1.W"] + p["angle.1.b"]))
    m = np.concatenate(parts, axis=1)
    r = _relu(m @ p["root.0.W"] + p["root.0.b"])
    out = r @ p["root.1.W"] + p["root.1.b"]
    return out[0] if np.ndim(emg_input) == 1 else out


class RpcNet:
    """A family member: per-joint (K=24, one output each) or monolithic (K=1, 24 outputs)."""

    def __init__(self, config: SubNetworkConfig, variant: str = "full", n_networks: int = N_DOF,
                 layout: WindowLayout = DEFAULT_LAYOUT, channels: Sequence[int] | None = None,
                 dtype=np.float32, seed: int = 0, params: dict | None = None, tag: str | None = None):
        if variant not in VARIANTS:
            raise InputError(f"unknown variant {variant!r}")
        if n_networks * config.n_outputs != N_DOF:
            raise ContractError("n_networks * n_outputs must equal 24")
        self.config = config
        self.variant = variant
        self.n_networks = n_networks
        self.layout = layout
        self.channels = None if channels is None else np.asarray(channels, dtype=int)
        self.dtype = np.dtype(dtype)
        self.tag = tag or variant
        self.params = params if params is not None else self._init_params(seed)

    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        params = {}
        K = self.n_networks
        for name, (fi, fo) in self.config.layer_shapes().items():
            bound = 1.0 / np.sqrt(fi)
            params[f"{name}.W"] = rng.uniform(-bound, bound, (K, fi, fo)).astype(self.dtype)
            params[f"{name}.b"] = rng.uniform(-bound, bound, (K, fo)).astype(self.dtype)
        return params

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def emg_input_size(self) -> int:
        return self.config.emg_input_size

    @property
    def angle_input_size(self) -> int:
        return self.config.angle_input_size

    def subnetwork(self, k: int) -> SubNetwork:
        return SubNetwork(self.config, {n: p[k] for n, p in self.params.items()})

    def multiply_count(self) -> int:
        """Multiplications in one forward pass of the whole model."""
        return int(sum(self.n_networks * fi * fo for fi, fo in self.config.layer_shapes().values()))

    # -- forward / backward ---------------------------------------------------

    def _check(self, emg_in, angle_in):
        e = np.asarray(emg_in, dtype=self.dtype)
        if e.ndim != 2 or e.shape[1] != self.config.emg_input_size:
            raise ContractError(f"EMG input must be (B, {self.config.emg_input_size}), got {e.shape}")
        a = None
        if self.config.has_angle_branch:
            if angle_in is None:
                raise ContractError("this variant needs an angle input")
            a = np.asarray(angle_in, dtype=self.dtype)
            if a.ndim != 2 or a.shape != (e.shape[0], self.config.angle_input_size):
                raise ContractError(f"angle input must be (B, {self.config.angle_input_size}), got {a.shape}")
        return e, a

    def emg_features(self, emg_in: np.ndarray) -> np.ndarray:
        """EMG branch output, (K, B, W_E)."""
        p = self.params
        e = np.asarray(emg_in, dtype=self.dtype)
        h = _relu(np.matmul(e, p["emg.0.W"]) + p["emg.0.b"][:, None, :])
        return _relu(np.matmul(h, p["emg.1.W"]) + p["emg.1.b"][:, None, :])

    def _forward(self, e, a):
        p = self.params
        cache = {"e": e, "a": a}
        h0 = _relu(np.matmul(e, p["emg.0.W"]) + p["emg.0.b"][:, None, :])
        h1 = _relu(np.matmul(h0, p["emg.1.W"]) + p["emg.1.b"][:, None, :])
        cache["h0"], cache["h1"] = h0, h1
        if a is not None:
            g0 = _relu(np.matmul(a, p["angle.0.W"]) + p["angle.0.b"][:, None, :])
            g1 = _relu(np.matmul(g0, p["angle.1.W"]) + p["angle.1.b"][:, None, :])
            cache["g0"], cache["g1"] = g0, g1
            m = np.concatenate([h1, g1], axis=2)
        else:
            m = h1
        cache["m"] = m
        r = _relu(np.matmul(m, p["root.0.W"]) + p["root.0.b"][:, None, :])
        cache["r"] = r
        out = np.matmul(r, p["root.1.W"]) + p["root.1.b"][:, None, :]
        return out, cache

    def _to_joints(self, out):
        # (K, B, n_out) -> (B, 24), joint index = k * n_out + o
        return np.transpose(out, (1, 0, 2)).reshape(out.shape[1], N_DOF)

    def _from_joints(self, y):
        B = y.shape[0]
        return np.transpose(y.reshape(B, self.n_networks, self.config.n_outputs), (1, 0, 2))

    def forward(self, emg_in: np.ndarray, angle_in: np.ndarray | None = None) -> np.ndarray:
        """Normalised joint angles (B, 24) for a batch of flattened inputs."""
        e, a = self._check(emg_in, angle_in)
        out, _ = self._forward(e, a)
        return self._to_joints(out)

    def loss_and_grads(self, emg_in, angle_in, targets) -> tuple[float, dict[str, np.ndarray]]:
        """Mean-squared error and its analytic gradient.

        Each sub-network is trained on the MSE of its own outputs, so the
        gradient for sub-network ``k`` is that of its own loss.  The returned
        scalar is the mean of those losses (the MSE over all 24 joints), i.e.
        the gradients are those of ``K * loss``.
        """
        e, a = self._check(emg_in, angle_in)
        out, c = self._forward(e, a)
        y = self._from_joints(np.asarray(targets, dtype=self.dtype))
        diff = out - y
        B, n_out = out.shape[1], out.shape[2]
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite training loss ({loss})")
        p = self.params
        grads = {}
        d = diff * (2.0 / (B * n_out))

        grads["root.1.W"] = np.matmul(np.swapaxes(c["r"], 1, 2), d)
        grads["root.1.b"] = d.sum(axis=1)
        d = np.matmul(d, np.swapaxes(p["root.1.W"], 1, 2))
        d *= c["r"] > 0
        grads["root.0.W"] = np.matmul(np.swapaxes(c["m"], 1, 2), d)
        grads["root.0.b"] = d.sum(axis=1)
        dm = np.matmul(d, np.swapaxes(p["root.0.W"], 1, 2))
        we = self.config.emg_hidden_width

        dh = dm[:, :, :we] * (c["h1"] > 0)
        grads["emg.1.W"] = np.matmul(np.swapaxes(c["h0"], 1, 2), dh)
        grads["emg.1.b"] = dh.sum(axis=1)
        dh = np.matmul(dh, np.swapaxes(p["emg.1.W"], 1, 2))
        dh *= c["h0"] > 0
        grads["emg.0.W"] = np.matmul(c["e"].T, dh)
        grads["emg.0.b"] = dh.sum(axis=1)

        if a is not None:
            dg = dm[:, :, we:] * (c["g1"] > 0)
            grads["angle.1.W"] = np.matmul(np.swapaxes(c["g0"], 1, 2), dg)
            grads["angle.1.b"] = dg.sum(axis=1)
            dg = np.matmul(dg, np.swapaxes(p["angle.1.W"], 1, 2))
            dg *= c["g0"] > 0
            grads["angle.0.W"] = np.matmul(c["a"].T, dg)
            grads["angle.0.b"] = dg.sum(axis=1)
        return loss, grads

    # -- persistence ----------------------------------------------------------

    def describe(self) -> dict:
        return {
            "variant": self.variant,
            "tag": self.tag,
            "n_networks": self.n_networks,
            "config": asdict(self.config),
            "layout": asdict(self.layout),
            "channels": None if self.channels is None else self.channels.tolist(),
        }

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        """Checkpoint: model description in the header, float32 parameter blobs."""
        meta = self.describe()
        if extra:
            meta["extra"] = extra
        arrays = {n: p.astype("<f4") for n, p in sorted(self.params.items())}
        containers.write(path, "checkpoint", meta, arrays)

    @classmethod
    def load(cls, path: str | Path, dtype=np.float32) -> "RpcNet":
        _, meta, arrays = containers.read(path, expect_kind="checkpoint")
        cfg = SubNetworkConfig(**meta["config"])
        net = cls(cfg, meta["variant"], meta["n_networks"], WindowLayout(**meta["layout"]),
                  meta["channels"], dtype=dtype, params={n: a.astype(dtype) for n, a in arrays.items()},
                  tag=meta.get("tag"))
        for name, (fi, fo) in cfg.layer_shapes().items():
            if net.params[f"{name}.W"].shape != (net.n_networks, fi, fo):
                raise ContractError(f"checkpoint layer {name} has the wrong shape")
        return net


class Adam:
    """Adam with PyTorch's update rule, applied in place to float arrays."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-5, betas=(0.9, 0.99), eps=1e-3):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros(p.shape, p.dtype) for n, p in params.items()}
        self.v = {n: np.zeros(p.shape, p.dtype) for n, p in params.items()}
        # updates run over flat blocks small enough to stay in cache
        self._tmp = np.empty(self.BLOCK, dtype=np.result_type(*params.values()))

    BLOCK = 1 << 16

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = self.lr / bc1
        root_bc2 = np.sqrt(bc2)
        for name, g in grads.items():
            p = params[name]
            flat = p.reshape(-1) if p.flags.c_contiguous else p.flatten()
            self._update(flat, np.ravel(g), self.m[name].reshape(-1), self.v[name].reshape(-1), step_size, root_bc2)
            if not np.shares_memory(flat, p):
                p[...] = flat.reshape(p.shape)

    def _update(self, p, g, m, v, step_size, root_bc2):
        b1, b2 = self.beta1, self.beta2
        for s in range(0, p.size, self.BLOCK):
            e = min(s + self.BLOCK, p.size)
            gb, mb, vb, pb = g[s:e], m[s:e], v[s:e], p[s:e]
            tmp = self._tmp[:e - s]
            mb *= b1
            np.multiply(gb, 1.0 - b1, out=tmp)
            mb += tmp
            vb *= b2
            np.multiply(gb, gb, out=tmp)
            tmp *= 1.0 - b2
            vb += tmp
            np.sqrt(vb, out=tmp)
            tmp /= root_bc2
            tmp += self.eps
            np.divide(mb, tmp, out=tmp)
            tmp *= step_size
            pb -= tmp


def backward_and_step(net: RpcNet, batch, cfg: TrainingConfig, optimizer: Adam | None = None):
    """One Adam step on one batch ``(emg_in, angle_in, targets)``; returns the batch loss."""
    emg_in, angle_in, targets = batch
    if optimizer is None:
        optimizer = Adam(net.params, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.eps)
    try:
        loss, grads = net.loss_and_grads(emg_in, angle_in, targets)
    except TrainingDivergedError as exc:
        raise TrainingDivergedError(f"{exc} after {optimizer.t} steps") from None
    optimizer.step(net.params, grads)
    return loss


@dataclass
class TrainResult:
    net: RpcNet
    epoch_losses: list[float] = field(default_factory=list)
    batch_losses: np.ndarray | None = None
    steps: int = 0


def window_pool(trials: Sequence[TrainingWindows], stride: int = 1) -> np.ndarray:
    """(trial, window) index pairs used for training."""
    pairs = [np.stack([np.full(len(w), i), np.arange(len(w))], axis=1)[::stride] for i, w in enumerate(trials)]
    return np.concatenate(pairs) if pairs else np.empty((0, 2), dtype=int)


def gather(trials: Sequence[TrainingWindows], pairs: np.ndarray, dtype):
    parts = []
    for i in np.unique(pairs[:, 0]):
        sel = pairs[pairs[:, 0] == i, 1]
        parts.append(trials[i].batch(sel, dtype))
    e = np.concatenate([p[0] for p in parts])
    a = np.concatenate([p[1] for p in parts])
    y = np.concatenate([p[2] for p in parts])
    return e, a, y


def train(net: RpcNet, trials: Sequence[TrainingWindows], cfg: TrainingConfig = TrainingConfig(),
          progress=None) -> TrainResult:
    """Teacher-forced training: angle inputs always come from the recordings.

    Windows are shuffled uniformly each epoch with a generator seeded from
    ``cfg.seed``.  ``progress(epoch, step, loss)`` is called after each step
    when given.
    """
    if not trials or sum(len(w) for w in trials) == 0:
        raise InputError("training set is empty")
    pool = window_pool(trials, cfg.window_stride)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.eps)
    need_angles = net.config.has_angle_branch
    epoch_losses = []
    batch_losses = []
    for epoch in range(cfg.epochs):
        order = pool[rng.permutation(len(pool))]
        total = 0.0
        nb = 0
        for s in range(0, len(order), cfg.batch_size):
            pairs = order[s:s + cfg.batch_size]
            e, a, y = gather(trials, pairs, net.dtype)
            loss = backward_and_step(net, (e, a if need_angles else None, y), cfg, opt)
            total += loss
            nb += 1
            batch_losses.append(loss)
            if progress is not None:
                progress(epoch, opt.t, loss)
        epoch_losses.append(total / nb)
        log.info("epoch %d/%d mean loss %.6g", epoch + 1, cfg.epochs, epoch_losses[-1])
    return TrainResult(net, epoch_losses, np.asarray(batch_losses), opt.t)


def write_loss_curve(path: str | Path, result: TrainResult) -> None:
    lines = ["epoch,mean_loss"] + [f"{i + 1},{v:.10g}" for i, v in enumerate(result.epoch_losses)]
    Path(path).write_text("\n".join(lines) + "\n")
