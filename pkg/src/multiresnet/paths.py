"""Ensemble view of (multi-)residual networks.

Unrolling ``n`` blocks of ``x + f^1(x) + ... + f^k(x)`` gives ``(k+1)^n``
additive path terms; ``C(n, d) * k^d`` of them traverse exactly ``d``
residual functions. If every traversed function scales the gradient by
``r``, paths of depth ``d`` carry a total weight ``C(n, d) * (k*r)^d`` (up to
a common factor), and the *effective range* is the narrowest band of depths
holding a given share of that weight.

Counts and weights are exact integers/rationals; floats appear only in the
normalized views.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .model import SKIP, BlockKind, Network, drop_block
from .trainer import evaluate


def _check_nk(n: int, k: int) -> None:
    if n < 1 or k < 1:
        raise ValueError(f"n and k must be positive, got n={n}, k={k}")


def multiplicity(n: int, k: int = 1) -> int:
    """Number of on/off configurations of the ``k*n`` residual functions."""
    _check_nk(n, k)
    return 2 ** (k * n)


def path_term_count(n: int, k: int = 1) -> int:
    """Number of additive terms in the fully distributed expansion."""
    _check_nk(n, k)
    return (k + 1) ** n


def to_layer_depth(depth: int, kind: BlockKind | str = BlockKind.BASIC) -> int:
    """Convolutional layers traversed by a path through ``depth`` residual functions."""
    return depth * BlockKind(kind).convs


@dataclass(frozen=True)
class PathDistribution:
    n: int
    k: int
    counts: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.counts)


def path_depth_distribution(n: int, k: int = 1) -> PathDistribution:
    """Exact ``N(d) = C(n, d) * k^d`` for ``d = 0..n``."""
    _check_nk(n, k)
    counts = []
    kd = 1
    for d in range(n + 1):
        counts.append(math.comb(n, d) * kd)
        kd *= k
    return PathDistribution(n, k, tuple(counts))


def _as_fraction(x) -> Fraction:
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


class ContributionCurve:
    """Non-negative weights over path depths ``0..n``.

    Stored as integers that share one implicit positive denominator, which
    keeps every comparison exact.
    """

    def __init__(self, scaled: Sequence[int], denominator: int = 1, n: Optional[int] = None,
                 k: Optional[int] = None, r: Optional[Fraction] = None):
        if any(w < 0 for w in scaled):
            raise ValueError("curve weights must be non-negative")
        if sum(scaled) == 0:
            raise ValueError("curve has no mass")
        self.scaled = tuple(int(w) for w in scaled)
        self.denominator = int(denominator)
        self.n = len(self.scaled) - 1 if n is None else n
        self.k = k
        self.r = r

    @classmethod
    def from_weights(cls, weights: Sequence) -> "ContributionCurve":
        fr = [_as_fraction(w) for w in weights]
        den = math.lcm(*(f.denominator for f in fr)) if fr else 1
        return cls([int(f * den) for f in fr], den)

    @cached_property
    def weights(self) -> tuple[Fraction, ...]:
        return tuple(Fraction(w, self.denominator) for w in self.scaled)

    @cached_property
    def total_scaled(self) -> int:
        return sum(self.scaled)

    @cached_property
    def normalized(self) -> np.ndarray:
        t = self.total_scaled
        return np.array([float(Fraction(w, t)) for w in self.scaled])

    @property
    def mode(self) -> int:
        best = max(self.scaled)
        return self.scaled.index(best)

    @property
    def mean(self) -> float:
        return float(Fraction(sum(d * w for d, w in enumerate(self.scaled)), self.total_scaled))

    def __len__(self) -> int:
        return len(self.scaled)


def gradient_contribution(n: int, k: int = 1, r=Fraction(1, 2)) -> ContributionCurve:
    """``w(d) = N(d) * r^d``: path count times per-path gradient scale."""
    _check_nk(n, k)
    r = _as_fraction(r)
    if not 0 < r <= 1:
        raise ValueError(f"decay r must lie in (0, 1], got {r}")
    num, den = r.numerator, r.denominator
    # w(d) * den^n = C(n,d) * (k*num)^d * den^(n-d)
    dist = path_depth_distribution(n, k)
    scaled = [dist.counts[d] * num**d * den ** (n - d) for d in range(n + 1)]
    return ContributionCurve(scaled, den**n, n=n, k=k, r=r)


@dataclass(frozen=True)
class EffectiveRange:
    a: int
    b: int
    p: float
    coverage: float

    @property
    def width(self) -> int:
        return self.b - self.a + 1


def effective_range(curve: ContributionCurve, p: float = 0.95) -> EffectiveRange:
    """Narrowest contiguous depth band holding at least ``p`` of the weight.

    Ties go to the band starting at the smaller depth.
    """
    pf = _as_fraction(p)
    if not 0 < pf < 1:
        raise ValueError(f"coverage p must lie in (0, 1), got {p}")
    w = curve.scaled
    total = curve.total_scaled
    # window [a, b] qualifies iff sum * q >= total * pn   (p = pn/q)
    pn, q = pf.numerator, pf.denominator
    target = total * pn
    best: Optional[tuple[int, int]] = None
    b = -1
    acc = 0
    for a in range(len(w)):
        while acc * q < target and b + 1 < len(w):
            b += 1
            acc += w[b]
        if acc * q < target:
            break
        if best is None or (b - a) < (best[1] - best[0]):
            best = (a, b)
        acc -= w[a]
    a, b = best
    cov = float(Fraction(sum(w[a : b + 1]), total))
    return EffectiveRange(a, b, float(pf), cov)


@dataclass(frozen=True)
class ScalingReport:
    n: int
    c: int
    r: float
    p: float
    base: EffectiveRange
    deep: EffectiveRange
    wide: EffectiveRange

    @property
    def b_base(self) -> int:
        return self.base.b

    @property
    def b_deep(self) -> int:
        return self.deep.b

    @property
    def b_wide(self) -> int:
        return self.wide.b

    @property
    def ratio(self) -> float:
        """``b_deep / (c * b_base)``; below 1 means the deep net's range grew sublinearly."""
        return self.b_deep / (self.c * self.b_base) if self.b_base else math.inf


def compare_scaling(n: int, c: int, r=Fraction(1, 2), p: float = 0.95) -> ScalingReport:
    """Effective ranges of ``c*n`` single-function blocks versus ``n`` blocks of ``c`` functions."""
    if c < 1:
        raise ValueError(f"c must be a positive integer, got {c}")
    base = effective_range(gradient_contribution(n, 1, r), p)
    deep = effective_range(gradient_contribution(c * n, 1, r), p)
    wide = effective_range(gradient_contribution(n, c, r), p)
    return ScalingReport(n, c, float(_as_fraction(r)), float(p), base, deep, wide)


# -- empirical gradients --------------------------------------------------------


class LinearizedToyNet:
    """Blocks whose residual functions are all ``gain * identity``.

    The loss is a fixed linear read-out of the last block, so a path through
    ``d`` functions scales the input gradient by exactly ``gain**d``.
    """

    def __init__(self, n_blocks: int, k: int = 1, gain: float = 0.5, dim: int = 16, seed: int = 0):
        _check_nk(n_blocks, k)
        self.n_blocks = n_blocks
        self.k = k
        self.gain = gain
        self.dim = dim
        self.readout = np.random.default_rng(seed).standard_normal(dim)

    def lesionable_blocks(self) -> list[int]:
        return list(range(self.n_blocks))

    def path_loss(self, x: Tensor, labels, routes: Sequence[int]) -> Tensor:
        n = x.shape[0]
        h = x
        for route in routes:
            out = h if route in (None, SKIP) else ad.detach(h)
            for i in range(self.k):
                y = ad.scale(h, self.gain)
                if route is not None and route != i:
                    y = ad.detach(y)
                out = ad.add(out, y)
            h = out
        weights = Tensor(np.broadcast_to(self.readout / n, (n, self.dim)))
        return ad.sum_all(ad.mul(h, weights))


def network_path_loss(network: Network, x: Tensor, labels, routes: Sequence[int]) -> Tensor:
    logits = network.forward(x, training=False, grad_routes=routes)
    return ad.softmax_cross_entropy(logits, labels)


@dataclass(frozen=True)
class PathGradientStats:
    depth: int
    mean: float
    std: float
    norms: tuple[float, ...]


def _path_loss(network, x, labels, routes):
    if isinstance(network, Network):
        return network_path_loss(network, x, labels, routes)
    return network.path_loss(x, labels, routes)


def _n_blocks(network) -> int:
    return len(network.blocks) if isinstance(network, Network) else network.n_blocks


def sample_path_routes(network, depth: int, rng: np.random.Generator) -> list[int]:
    """Routes for one random path through ``depth`` functions on distinct blocks."""
    eligible = network.lesionable_blocks()
    if not 0 <= depth <= len(eligible):
        raise ValueError(f"depth {depth} outside [0, {len(eligible)}] (non-downsampling blocks)")
    k = network.config.k if isinstance(network, Network) else network.k
    routes = [SKIP] * _n_blocks(network)
    for b in rng.choice(eligible, size=depth, replace=False):
        routes[int(b)] = int(rng.integers(k))
    return routes


def empirical_path_gradient(
    network,
    images: np.ndarray,
    labels,
    depth: int,
    n_samples: int = 16,
    rng: Optional[np.random.Generator] = None,
) -> PathGradientStats:
    """Input-gradient norm carried by random single paths of a given depth.

    Each sample picks ``depth`` distinct non-downsampling blocks and one
    function in each; the forward values are those of the full network,
    but the gradient flows only through the chosen functions and through
    the skip connections of every other block.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    norms = []
    for _ in range(n_samples):
        routes = sample_path_routes(network, depth, rng)
        x = Tensor(images, requires_grad=True)
        with Tape() as tape:
            loss = _path_loss(network, x, labels, routes)
        grads = backward(tape, loss)
        norms.append(float(np.linalg.norm(grads[x])))
    arr = np.array(norms)
    return PathGradientStats(depth, float(arr.mean()), float(arr.std()), tuple(norms))


def estimate_decay(depths: Sequence[int], norms: Sequence[float]) -> float:
    """Per-function decay ``r`` from a least-squares line through log-norm vs depth."""
    d = np.asarray(depths, dtype=np.float64)
    y = np.log(np.asarray(norms, dtype=np.float64))
    slope, _ = np.polyfit(d, y, 1)
    return float(np.exp(slope))


# -- lesioning --------------------------------------------------------------------


@dataclass(frozen=True)
class LesionRow:
    block: Optional[int]
    error: float
    delta: float


@dataclass
class LesionReport:
    baseline: float
    rows: list[LesionRow]

    @property
    def max_delta(self) -> float:
        return max(abs(r.delta) for r in self.rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["block", "error", "delta"])
            for r in self.rows:
                w.writerow(["none" if r.block is None else r.block, repr(r.error), repr(r.delta)])


def lesion_sweep(network: Network, test_dataset) -> LesionReport:
    """Test-error change from dropping each non-downsampling block in turn.

    The first row is the unlesioned control.
    """
    baseline = evaluate(network, test_dataset)
    rows = [LesionRow(None, baseline, 0.0)]
    for b in network.lesionable_blocks():
        err = evaluate(drop_block(network, b), test_dataset)
        rows.append(LesionRow(b, err, err - baseline))
    return LesionReport(baseline, rows)


# -- CSV emission ---------------------------------------------------------------------


def write_distribution_csv(path, curve: ContributionCurve) -> None:
    dist = path_depth_distribution(curve.n, curve.k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["d", "count", "weight", "normalized"])
        for d, (count, weight, norm) in enumerate(zip(dist.counts, curve.weights, curve.normalized)):
            w.writerow([d, count, str(weight), repr(float(norm))])


def write_range_csv(path, rows: Sequence[tuple[str, int, int, EffectiveRange]]) -> None:
    """Rows of ``(label, n, k, range)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "n", "k", "p", "a", "b", "coverage"])
        for label, n, k, er in rows:
            w.writerow([label, n, k, repr(er.p), er.a, er.b, repr(er.coverage)])
