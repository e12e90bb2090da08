"""Pre-activation residual and multi-residual networks for small images.

A multi-residual block sums ``k`` parallel residual functions onto its skip
path::

    x_{l+1} = x_l + f^1(x_l) + ... + f^k(x_l)

and ``k == 1`` is the ordinary pre-activation residual block. Networks use
the CIFAR layout: a 3x3 stem, three stages of ``n`` blocks with widths
16w/32w/64w (bottleneck blocks expand the output by 4), and a
norm-ReLU-pool-linear head.
"""

from __future__ import annotations

import copy
import enum
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormStats, Tensor

SKIP = -1
"""Gradient route that keeps only the skip path of a block (see ``Network.forward``)."""


class BlockKind(str, enum.Enum):
    BASIC = "basic"
    BOTTLENECK = "bottleneck"

    @property
    def convs(self) -> int:
        return 2 if self is BlockKind.BASIC else 3

    @property
    def expansion(self) -> int:
        return 1 if self is BlockKind.BASIC else 4


@dataclass(frozen=True)
class NetworkConfig:
    blocks_per_stage: int
    k: int = 1
    w: int = 1
    block_kind: BlockKind = BlockKind.BASIC
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    residual: bool = True
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "block_kind", BlockKind(self.block_kind))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.blocks_per_stage < 1 or self.k < 1 or self.w < 1 or self.num_classes < 1:
            raise ValueError(f"invalid network config: {self}")
        _, h, w = self.input_shape
        if h % 4 or w % 4:
            raise ValueError(f"input spatial size {h}x{w} must be divisible by 4 (two stride-2 stages)")

    @classmethod
    def from_depth(cls, depth: int, k: int = 1, block_kind: BlockKind | str = BlockKind.BASIC, **kw):
        kind = BlockKind(block_kind)
        span = depth - 2
        if span <= 0 or span % (3 * kind.convs):
            form = "6n+2" if kind is BlockKind.BASIC else "9n+2"
            raise ValueError(f"depth {depth} is not of the form {form} for {kind.value} blocks")
        return cls(blocks_per_stage=span // (3 * kind.convs), k=k, block_kind=kind, **kw)

    @property
    def depth(self) -> int:
        return 3 * self.block_kind.convs * self.blocks_per_stage + 2

    @property
    def total_blocks(self) -> int:
        return 3 * self.blocks_per_stage

    def to_json(self) -> str:
        d = asdict(self)
        d["block_kind"] = self.block_kind.value
        d["input_shape"] = list(self.input_shape)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        d = json.loads(text)
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


def _stage_widths(config: NetworkConfig) -> list[int]:
    return [16 * config.w, 32 * config.w, 64 * config.w]


def _unit_specs(kind: BlockKind, cin: int, width: int, stride: int) -> list[tuple[int, int, int, int]]:
    """(in_channels, out_channels, kernel, stride) for each norm-ReLU-conv unit."""
    if kind is BlockKind.BASIC:
        return [(cin, width, 3, stride), (width, width, 3, 1)]
    return [(cin, width, 1, 1), (width, width, 3, stride), (width, 4 * width, 1, 1)]


def _block_plan(config: NetworkConfig):
    """Yield (stage, index_in_stage, cin, cout, stride) for every block."""
    cin = 16
    for s, width in enumerate(_stage_widths(config)):
        cout = width * config.block_kind.expansion
        for b in range(config.blocks_per_stage):
            stride = 2 if (s > 0 and b == 0) else 1
            yield s, b, cin, cout, stride
            cin = cout


def count_config_parameters(config: NetworkConfig) -> int:
    """Learnable scalars of the network ``build_network(config)`` would produce."""
    c0 = config.input_shape[0]
    total = 16 * c0 * 9  # stem
    cin = 16
    for _, _, cin, cout, stride in _block_plan(config):
        width = cout // config.block_kind.expansion
        per_fn = sum(2 * ui + uo * ui * kk * kk for ui, uo, kk, _ in _unit_specs(config.block_kind, cin, width, stride))
        total += config.k * per_fn
        if stride != 1 or cin != cout:
            total += cout * cin
    c_last = 64 * config.w * config.block_kind.expansion
    total += 2 * c_last + c_last * config.num_classes + config.num_classes
    return total


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


@dataclass
class _Unit:
    gamma: Tensor
    beta: Tensor
    stats: BatchNormStats
    weight: Tensor
    stride: int

    def __call__(self, x: Tensor, training: bool, momentum: float, eps: float) -> Tensor:
        y = ad.batch_norm(x, self.gamma, self.beta, self.stats, training, momentum, eps)
        y = ad.relu(y)
        kh = self.weight.shape[2]
        return ad.conv2d(y, self.weight, self.stride, kh // 2)


@dataclass
class ResidualFunction:
    units: list[_Unit]

    def __call__(self, x: Tensor, training: bool, momentum: float, eps: float) -> Tensor:
        for unit in self.units:
            x = unit(x, training, momentum, eps)
        return x


@dataclass
class Block:
    index: int
    stage: int
    functions: list[ResidualFunction]
    projection: Optional[Tensor]
    stride: int
    in_channels: int
    out_channels: int
    residual: bool = True
    momentum: float = 0.9
    eps: float = 1e-5

    @property
    def k(self) -> int:
        return len(self.functions)

    @property
    def downsamples(self) -> bool:
        return self.projection is not None

    def skip(self, x: Tensor) -> Tensor:
        if self.projection is None:
            return x
        return ad.conv2d(x, self.projection, self.stride, 0)

    def forward(self, x: Tensor, mask=None, training: bool = False, route: Optional[int] = None) -> Tensor:
        """Skip path plus the active residual functions.

        ``route`` restricts the *gradient* (not the value) to one path:
        ``SKIP`` keeps only the skip connection, ``i >= 0`` only function i.
        """
        if mask is None:
            mask = np.ones(self.k, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.k,):
            raise ValueError(f"block {self.index}: mask must have length {self.k}, got {mask.shape}")
        if self.residual:
            out = self.skip(x)
            if route is not None and route != SKIP:
                out = ad.detach(out)
        else:
            out = None
        for i, fn in enumerate(self.functions):
            if not mask[i]:
                continue
            y = fn(x, training, self.momentum, self.eps)
            if route is not None and route != i:
                y = ad.detach(y)
            out = y if out is None else ad.add(out, y)
        if out is None:
            # plain block with every function switched off
            out = self.skip(x)
        return out


def multi_block_forward(x: Tensor, block: Block, mask=None, training: bool = False) -> Tensor:
    """``x + sum of f^i(x) over the functions enabled in mask``."""
    return block.forward(x, mask, training)


@dataclass
class Network:
    config: NetworkConfig
    stem: Tensor
    blocks: list[Block]
    head_gamma: Tensor
    head_beta: Tensor
    head_stats: BatchNormStats
    fc_weight: Tensor
    fc_bias: Tensor
    masks: list[np.ndarray]
    dropped: frozenset = field(default_factory=frozenset)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        params = {"stem.weight": self.stem}
        for blk in self.blocks:
            pre = f"block{blk.index}"
            for i, fn in enumerate(blk.functions):
                for j, u in enumerate(fn.units):
                    params[f"{pre}.f{i}.u{j}.bn.gamma"] = u.gamma
                    params[f"{pre}.f{i}.u{j}.bn.beta"] = u.beta
                    params[f"{pre}.f{i}.u{j}.conv.weight"] = u.weight
            if blk.projection is not None:
                params[f"{pre}.proj.weight"] = blk.projection
        params["head.bn.gamma"] = self.head_gamma
        params["head.bn.beta"] = self.head_beta
        params["head.fc.weight"] = self.fc_weight
        params["head.fc.bias"] = self.fc_bias
        return params

    def parameters(self) -> dict[str, Tensor]:
        return self.named_parameters()

    def decay_exempt(self, name: str) -> bool:
        return name.endswith(".beta") or name.endswith(".bias")

    def named_stats(self) -> dict[str, BatchNormStats]:
        stats = {}
        for blk in self.blocks:
            for i, fn in enumerate(blk.functions):
                for j, u in enumerate(fn.units):
                    stats[f"block{blk.index}.f{i}.u{j}.bn"] = u.stats
        stats["head.bn"] = self.head_stats
        return stats

    def branch_parameter_names(self) -> list[str]:
        return [n for n in self.named_parameters() if n.startswith("block") and ".proj." not in n]

    def lesionable_blocks(self) -> list[int]:
        return [b.index for b in self.blocks if not b.downsamples]

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        x,
        training: bool = False,
        masks: Optional[Sequence] = None,
        grad_routes: Optional[Sequence[int]] = None,
    ) -> Tensor:
        """Logits for a batch ``x[N,C,H,W]``.

        ``masks`` overrides the network's per-block function masks.
        ``grad_routes`` gives one route per block (see ``Block.forward``);
        the values are unchanged, only the gradient is confined to one path.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[1:] != self.config.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match network input {self.config.input_shape}")
        masks = self.masks if masks is None else masks
        cfg = self.config
        h = ad.conv2d(x, self.stem, 1, 1)
        for blk in self.blocks:
            if blk.index in self.dropped:
                continue
            route = None if grad_routes is None else grad_routes[blk.index]
            h = blk.forward(h, masks[blk.index], training, route)
        h = ad.batch_norm(h, self.head_gamma, self.head_beta, self.head_stats, training, cfg.bn_momentum, cfg.bn_eps)
        h = ad.relu(h)
        h = ad.global_avg_pool(h)
        return ad.linear(h, self.fc_weight, self.fc_bias)

    __call__ = forward

    def loss(self, batch, training: bool = True) -> Tensor:
        images, labels = batch
        return ad.softmax_cross_entropy(self.forward(images, training), labels)

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        preds = []
        for start in range(0, len(images), batch_size):
            logits = self.forward(images[start : start + batch_size], training=False)
            preds.append(np.argmax(logits.data, axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def build_network(config: NetworkConfig, seed: int = 0) -> Network:
    """Realize ``config`` with He-normal convolution weights (variance 2/fan_in)."""
    rng = np.random.default_rng(seed)
    c0 = config.input_shape[0]
    stem = Tensor(_he(rng, (16, c0, 3, 3), c0 * 9), True, "stem.weight")
    blocks = []
    for idx, (stage, _, cin, cout, stride) in enumerate(_block_plan(config)):
        width = cout // config.block_kind.expansion
        fns = []
        for _ in range(config.k):
            units = []
            for ui, uo, kk, st in _unit_specs(config.block_kind, cin, width, stride):
                units.append(
                    _Unit(
                        gamma=Tensor(np.ones(ui), True),
                        beta=Tensor(np.zeros(ui), True),
                        stats=BatchNormStats.fresh(ui),
                        weight=Tensor(_he(rng, (uo, ui, kk, kk), ui * kk * kk), True),
                        stride=st,
                    )
                )
            fns.append(ResidualFunction(units))
        proj = None
        if stride != 1 or cin != cout:
            proj = Tensor(_he(rng, (cout, cin, 1, 1), cin), True)
        blocks.append(
            Block(idx, stage, fns, proj, stride, cin, cout, config.residual, config.bn_momentum, config.bn_eps)
        )
    c_last = blocks[-1].out_channels
    net = Network(
        config=config,
        stem=stem,
        blocks=blocks,
        head_gamma=Tensor(np.ones(c_last), True),
        head_beta=Tensor(np.zeros(c_last), True),
        head_stats=BatchNormStats.fresh(c_last),
        fc_weight=Tensor(_he(rng, (c_last, config.num_classes), c_last), True),
        fc_bias=Tensor(np.zeros(config.num_classes), True),
        masks=[np.ones(config.k, dtype=bool) for _ in blocks],
    )
    for name, t in net.named_parameters().items():
        t.name = name
    return net


def count_parameters(network: Network) -> int:
    return sum(t.size for t in network.named_parameters().values())


def drop_block(network: Network, block_index: int) -> Network:
    """A view of ``network`` with one block replaced by the identity.

    Parameters and statistics are shared with the original; only the set of
    dropped blocks differs, so the original stays usable as the restored net.
    """
    if not 0 <= block_index < len(network.blocks):
        raise IndexError(f"block index {block_index} out of range [0, {len(network.blocks)})")
    blk = network.blocks[block_index]
    if blk.downsamples:
        raise ValueError(
            f"block {block_index} changes shape ({blk.in_channels}->{blk.out_channels} channels, "
            f"stride {blk.stride}); the identity is undefined there"
        )
    view = copy.copy(network)
    view.dropped = network.dropped | {block_index}
    return view


def restore_block(network: Network, block_index: int) -> Network:
    view = copy.copy(network)
    view.dropped = network.dropped - {block_index}
    return view


def sample_configuration(network: Network, p: float, rng: np.random.Generator) -> list[np.ndarray]:
    """Independent Bernoulli(p) on/off mask for every residual function."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    return [rng.random(blk.k) < p for blk in network.blocks]


# -- checkpoints ---------------------------------------------------------------
#
# Layout (little-endian):
#   magic b"MRESNET\0" | u32 version | u32 len + UTF-8 JSON config
#   u32 tensor count | per tensor: u32 name len, name, u32 rank, u32 dims..., float64 data

MAGIC = b"MRESNET\x00"
VERSION = 1


def _write_tensor(buf: bytearray, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf += struct.pack("<I", len(raw)) + raw
    buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()


def checkpoint_arrays(network: Network) -> dict[str, np.ndarray]:
    arrays = {name: t.data for name, t in network.named_parameters().items()}
    for name, st in network.named_stats().items():
        arrays[f"{name}.running_mean"] = st.mean
        arrays[f"{name}.running_var"] = st.var
    return arrays


def save_checkpoint(network: Network, path, extras: Optional[dict[str, np.ndarray]] = None) -> None:
    arrays = checkpoint_arrays(network)
    for name, arr in (extras or {}).items():
        arrays[f"extra.{name}"] = np.asarray(arr, dtype=np.float64)
    buf = bytearray(MAGIC)
    cfg = network.config.to_json().encode("utf-8")
    buf += struct.pack("<II", VERSION, len(cfg)) + cfg
    buf += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        _write_tensor(buf, name, arr)
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[Network, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a multiresnet checkpoint")
    version, clen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    config = NetworkConfig.from_json(data[pos : pos + clen].decode("utf-8"))
    pos += clen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        arrays[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims).copy()
        pos += nbytes
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")

    net = build_network(config)
    for name, t in net.named_parameters().items():
        t.data = arrays.pop(name)
    for name, st in net.named_stats().items():
        st.mean = arrays.pop(f"{name}.running_mean")
        st.var = arrays.pop(f"{name}.running_var")
    extras = {name[len("extra."):]: arr for name, arr in arrays.items() if name.startswith("extra.")}
    return net, extras
