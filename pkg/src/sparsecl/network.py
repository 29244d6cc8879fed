"""Fixed-capacity multi-head CNN with addressable per-filter parameter groups.

The trunk is a stack of conv blocks (same-padded conv -> ReLU -> 2x2 max
pool); each task gets its own dense head off the flattened trunk output.
Filter groups are live numpy views into the trunk parameters, so mutating
a group mutates the network.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, ShapeError, StateError
from .tensor import Node, Tape, conv2d, dense, flatten, maxpool2x2, relu

__all__ = [
    "ArchitectureSpec",
    "FilterGroup",
    "ForwardPass",
    "LayerParams",
    "HeadParams",
    "MultiHeadNetwork",
    "build_network",
    "add_head",
    "forward",
    "filter_groups",
    "he_uniform",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchitectureSpec:
    """Trunk layout: input shape plus (kernel_size, num_filters) per block."""

    input_shape: tuple[int, int, int]
    blocks: tuple[tuple[int, int], ...]

    def __post_init__(self):
        h, w, c = self.input_shape
        if min(h, w, c) < 1:
            raise ConfigError(f"input_shape entries must be positive, got {self.input_shape}")
        if len(self.blocks) < 2:
            raise ConfigError("architecture needs at least 2 conv blocks")
        for k, f in self.blocks:
            if k < 1:
                raise ConfigError(f"kernel size must be >= 1, got {k}")
            if f < 1:
                raise ConfigError(f"block filter count must be >= 1, got {f}")
        if min(self.spatial_after_trunk()) < 1:
            raise ConfigError(
                f"input {h}x{w} pools away to nothing over {len(self.blocks)} blocks"
            )

    @property
    def num_layers(self) -> int:
        return len(self.blocks)

    def spatial_after_trunk(self) -> tuple[int, int]:
        h, w, _ = self.input_shape
        for _ in self.blocks:
            h, w = h // 2, w // 2
        return h, w

    def flat_dim(self) -> int:
        h, w = self.spatial_after_trunk()
        return h * w * self.blocks[-1][1]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "blocks": [list(b) for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        try:
            return cls(
                input_shape=tuple(int(v) for v in d["input_shape"]),
                blocks=tuple((int(k), int(f)) for k, f in d["blocks"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid architecture spec: {e}") from e


@dataclass
class LayerParams:
    """One conv layer: kernel (kh, kw, c_in, c_out) and bias (c_out,)."""

    kernel: Node
    bias: Node

    @property
    def num_filters(self) -> int:
        return self.kernel.data.shape[3]


@dataclass
class HeadParams:
    """One task head: dense weight (flat_dim, C) and bias (C,)."""

    weight: Node
    bias: Node

    @property
    def num_classes(self) -> int:
        return self.bias.data.shape[0]


@dataclass
class FilterGroup:
    """One filter's kernel slice and bias entry, aliasing network storage."""

    layer: int
    index: int
    kernel: np.ndarray  # view, (kh, kw, c_in)
    bias: np.ndarray  # view, (1,)

    def vector(self) -> np.ndarray:
        """Kernel and bias concatenated into a flat copy."""
        return np.concatenate([self.kernel.ravel(), self.bias])


@dataclass
class ForwardPass:
    """Result of one forward evaluation."""

    logits: Node
    tape: Tape
    conv_activations: list[Node]  # post-ReLU, pre-pool, one per conv layer
    head: int


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class MultiHeadNetwork:
    """Shared conv trunk plus one dense classifier head per task."""

    def __init__(self, arch: ArchitectureSpec, seed: int):
        self.arch = arch
        self.seed = int(seed)
        self._rng = np.random.default_rng(self.seed)
        self.conv_layers: list[LayerParams] = []
        cin = arch.input_shape[2]
        for k, f in arch.blocks:
            fan_in = k * k * cin
            kernel = he_uniform(self._rng, (k, k, cin, f), fan_in)
            self.conv_layers.append(
                LayerParams(kernel=Node(kernel), bias=Node(np.zeros(f)))
            )
            cin = f
        self.heads: list[HeadParams] = []

    @property
    def num_layers(self) -> int:
        return len(self.conv_layers)

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    def filter_index_set(self) -> frozenset[tuple[int, int]]:
        return frozenset(
            (i, j)
            for i, lp in enumerate(self.conv_layers)
            for j in range(lp.num_filters)
        )

    def add_head(self, num_classes: int) -> int:
        """Append a dense head for a new task; earlier heads stay frozen."""
        if num_classes < 2:
            raise ConfigError(f"a head needs at least 2 classes, got {num_classes}")
        d = self.arch.flat_dim()
        weight = he_uniform(self._rng, (d, num_classes), d)
        self.heads.append(HeadParams(weight=Node(weight), bias=Node(np.zeros(num_classes))))
        return len(self.heads) - 1

    def forward(self, batch: np.ndarray, head: int) -> ForwardPass:
        """Run the trunk and the selected head, recording on a fresh tape."""
        if not 0 <= head < len(self.heads):
            raise InputError(f"unknown head {head}; network has {len(self.heads)}")
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 4:
            raise ShapeError(f"batch must be 4-D NHWC, got shape {batch.shape}")
        if batch.shape[3] != self.arch.input_shape[2]:
            raise ShapeError(
                f"batch has {batch.shape[3]} channels, architecture expects "
                f"{self.arch.input_shape[2]}"
            )
        tape = Tape()
        x = Node(batch, needs_grad=False)
        activations: list[Node] = []
        for lp in self.conv_layers:
            z = conv2d(tape, x, lp.kernel, lp.bias)
            a = relu(tape, z)
            activations.append(a)
            x = maxpool2x2(tape, a)
        flat = flatten(tape, x)
        hp = self.heads[head]
        logits = dense(tape, flat, hp.weight, hp.bias)
        if not np.isfinite(logits.data).all():
            raise StateError("forward pass produced non-finite logits")
        return ForwardPass(logits=logits, tape=tape, conv_activations=activations, head=head)

    def filter_groups(self):
        """Yield every conv filter exactly once, in (layer, filter) order.

        The yielded kernel/bias arrays are views: writes through them hit
        the network parameters directly.
        """
        for i, lp in enumerate(self.conv_layers):
            for j in range(lp.num_filters):
                yield FilterGroup(
                    layer=i,
                    index=j,
                    kernel=lp.kernel.data[:, :, :, j],
                    bias=lp.bias.data[j : j + 1],
                )

    def next_layer_channel(self, layer: int, channel: int) -> np.ndarray:
        """View of layer ``layer + 1`` kernels at input channel ``channel``."""
        if not 0 <= layer < self.num_layers - 1:
            raise InputError(f"layer {layer} has no successor conv layer")
        return self.conv_layers[layer + 1].kernel.data[:, :, channel, :]

    def trainable_params(self, head: int) -> list[Node]:
        """Trunk parameters plus the selected head's parameters."""
        params: list[Node] = []
        for lp in self.conv_layers:
            params.extend((lp.kernel, lp.bias))
        hp = self.heads[head]
        params.extend((hp.weight, hp.bias))
        return params

    def reinit_rng(self, seed) -> np.random.Generator:
        """Fresh generator for filter reinitialization, seeded explicitly."""
        return np.random.default_rng(seed)


def build_network(arch: ArchitectureSpec, seed: int) -> MultiHeadNetwork:
    """Deterministically initialize a trunk (He-uniform kernels, zero biases)."""
    return MultiHeadNetwork(arch, seed)


def add_head(net: MultiHeadNetwork, num_classes: int) -> int:
    return net.add_head(num_classes)


def forward(net: MultiHeadNetwork, batch: np.ndarray, head: int) -> ForwardPass:
    return net.forward(batch, head)


def filter_groups(net: MultiHeadNetwork):
    return net.filter_groups()


def save_checkpoint(net: MultiHeadNetwork, importance, path) -> None:
    """Write a versioned binary container with everything needed to rebuild.

    ``importance`` may be None (e.g. before the first task finishes).
    Reloading reproduces forward outputs bit-exactly.
    """
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    meta = {
        "version": CHECKPOINT_VERSION,
        "arch": net.arch.to_dict(),
        "seed": net.seed,
        "rng_state": net._rng.bit_generator.state,
        "num_heads": net.num_heads,
        "head_classes": [hp.num_classes for hp in net.heads],
        "has_importance": importance is not None,
    }
    if importance is not None:
        meta["importance_nu"] = importance.nu
        meta["importance_epsilon"] = importance.epsilon
        for i in range(net.num_layers):
            arrays[f"imp{i}_gamma_t"] = importance.gamma_t[i]
            arrays[f"imp{i}_gamma_hat"] = importance.gamma_hat[i]
            arrays[f"imp{i}_mask"] = importance.mask[i]
    for i, lp in enumerate(net.conv_layers):
        arrays[f"conv{i}_kernel"] = lp.kernel.data
        arrays[f"conv{i}_bias"] = lp.bias.data
    for h, hp in enumerate(net.heads):
        arrays[f"head{h}_weight"] = hp.weight.data
        arrays[f"head{h}_bias"] = hp.bias.data
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> tuple[MultiHeadNetwork, "ImportanceState | None"]:
    """Rebuild a network (and importance state, if stored) from disk."""
    from .importance import ImportanceState

    path = Path(path)
    if not path.exists():
        raise StateError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise StateError(f"unsupported checkpoint version {meta.get('version')}")
        arch = ArchitectureSpec.from_dict(meta["arch"])
        net = MultiHeadNetwork(arch, meta["seed"])
        for i, lp in enumerate(net.conv_layers):
            lp.kernel.data[...] = data[f"conv{i}_kernel"]
            lp.bias.data[...] = data[f"conv{i}_bias"]
        net.heads = []
        for h, ncls in enumerate(meta["head_classes"]):
            net.heads.append(
                HeadParams(
                    weight=Node(data[f"head{h}_weight"].copy()),
                    bias=Node(data[f"head{h}_bias"].copy()),
                )
            )
        net._rng.bit_generator.state = meta["rng_state"]
        importance = None
        if meta["has_importance"]:
            importance = ImportanceState(
                gamma_t=[data[f"imp{i}_gamma_t"].copy() for i in range(net.num_layers)],
                gamma_hat=[data[f"imp{i}_gamma_hat"].copy() for i in range(net.num_layers)],
                mask=[data[f"imp{i}_mask"].copy() for i in range(net.num_layers)],
                nu=meta["importance_nu"],
                epsilon=meta["importance_epsilon"],
            )
    return net, importance
