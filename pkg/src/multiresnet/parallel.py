"""Analytical step-time model for data, model and hybrid parallel training.

One SGD step is priced as compute + transfer + fixed overhead:

* compute: ``t_fn`` seconds per residual function per *effective* sample,
  where a worker's batch share is rounded up to a multiple of ``warp``;
* transfer: ``latency`` per message plus bytes over ``bandwidth``;
* fixed: ``t_fixed`` per step (optimizer, stem and head).

Every term is linear in ``(t_fn, t_fixed, latency, 1/bandwidth)``, which
makes calibration a non-negative linear least-squares problem.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import nnls

from .config import ConfigError
from .model import BlockKind, NetworkConfig, _block_plan, count_config_parameters

PARAMETERS = ("t_fn", "t_fixed", "latency", "inv_bandwidth")


class Strategy(str, enum.Enum):
    DATA = "data"
    MODEL = "model"
    HYBRID = "hybrid"


def effective_samples(batch_per_worker: int, warp: int = 32) -> int:
    """Samples a worker is billed for: the batch share rounded up to whole warps."""
    if batch_per_worker < 1:
        raise ValueError(f"batch per worker must be >= 1, got {batch_per_worker}")
    if warp < 1:
        raise ValueError(f"warp must be >= 1, got {warp}")
    return -(-batch_per_worker // warp) * warp


@dataclass(frozen=True)
class CostModel:
    t_fn: float = 1e-5
    t_fixed: float = 0.0
    bandwidth: float = 16e9
    latency: float = 1e-5
    warp: int = 32
    bytes_per_value: int = 4

    def __post_init__(self):
        for name in ("t_fn", "t_fixed", "latency"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be a finite non-negative number, got {v}")
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.warp < 1 or self.bytes_per_value < 1:
            raise ValueError("warp and bytes_per_value must be >= 1")

    @property
    def coefficients(self) -> np.ndarray:
        """Values of the linear parameters, in the order of ``PARAMETERS``."""
        return np.array([self.t_fn, self.t_fixed, self.latency, 1.0 / self.bandwidth])

    def scaled(self, factor: float) -> "CostModel":
        """Every time multiplied by ``factor`` (bandwidth divided by it)."""
        return replace(
            self,
            t_fn=self.t_fn * factor,
            t_fixed=self.t_fixed * factor,
            latency=self.latency * factor,
            bandwidth=self.bandwidth / factor,
        )

    def to_config(self) -> dict[str, object]:
        return {
            "t_fn": self.t_fn,
            "t_fixed": self.t_fixed,
            "bandwidth": self.bandwidth,
            "latency": self.latency,
            "warp": self.warp,
            "bytes_per_value": self.bytes_per_value,
        }

    @classmethod
    def from_config(cls, values: Mapping[str, str]) -> "CostModel":
        kw = {}
        for name in ("t_fn", "t_fixed", "bandwidth", "latency"):
            if name in values:
                kw[name] = _number(values, name, float)
        for name in ("warp", "bytes_per_value"):
            if name in values:
                kw[name] = _number(values, name, int)
        return cls(**kw)


@dataclass(frozen=True)
class SimScenario:
    """A network trained on some workers with one parallelization strategy.

    ``model`` splits each block's ``k`` functions evenly over the workers;
    ``hybrid`` runs data parallelism across pairs of workers and a two-way
    model split inside each pair.
    """

    depth: int
    k: int
    batch_size: int
    workers: int = 2
    strategy: Strategy = Strategy.DATA
    block_kind: BlockKind = BlockKind.BASIC
    w: int = 1
    image_size: int = 32
    num_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "block_kind", BlockKind(self.block_kind))
        self.network  # validates depth
        if self.batch_size < 1 or self.workers < 1:
            raise ValueError("batch size and worker count must be >= 1")
        if self.strategy is Strategy.MODEL:
            if self.workers < 2 or self.k % self.workers:
                raise ValueError(
                    f"model parallelism needs k divisible by the worker count >= 2 (k={self.k}, workers={self.workers})"
                )
        if self.strategy is Strategy.HYBRID:
            if self.workers < 2 or self.workers % 2 or self.k % 2:
                raise ValueError(
                    f"hybrid parallelism needs an even worker count and even k (k={self.k}, workers={self.workers})"
                )
        if self.batch_size < self.groups:
            raise ValueError(f"batch {self.batch_size} is smaller than the {self.groups} data-parallel groups")

    @property
    def network(self) -> NetworkConfig:
        return NetworkConfig.from_depth(
            self.depth,
            self.k,
            self.block_kind,
            w=self.w,
            num_classes=self.num_classes,
            input_shape=(3, self.image_size, self.image_size),
        )

    @property
    def groups(self) -> int:
        """Number of data-parallel replicas."""
        return {Strategy.DATA: self.workers, Strategy.MODEL: 1, Strategy.HYBRID: self.workers // 2}[self.strategy]

    @property
    def split(self) -> int:
        """Workers sharing one replica's residual functions."""
        return self.workers // self.groups

    @property
    def conv_layers(self) -> int:
        """Convolutions inside residual functions (the quantity paired networks share)."""
        net = self.network
        return net.total_blocks * self.k * self.block_kind.convs

    def to_config(self) -> dict[str, object]:
        return {
            "depth": self.depth,
            "k": self.k,
            "batch_size": self.batch_size,
            "workers": self.workers,
            "strategy": self.strategy.value,
            "block_kind": self.block_kind.value,
            "w": self.w,
            "image_size": self.image_size,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_config(cls, values: Mapping[str, str]) -> "SimScenario":
        missing = [k for k in ("depth", "k", "batch_size") if k not in values]
        if missing:
            raise ConfigError(f"scenario is missing {', '.join(missing)}")
        kw = {name: _number(values, name, int) for name in ("depth", "k", "batch_size", "workers", "w", "image_size", "num_classes") if name in values}
        for name in ("strategy", "block_kind"):
            if name in values:
                kw[name] = values[name]
        return cls(**kw)


@dataclass(frozen=True)
class SimResult:
    scenario: SimScenario
    compute: float
    transfer: float
    fixed: float

    @property
    def step_time(self) -> float:
        return self.compute + self.transfer + self.fixed


def _number(values, name, kind):
    try:
        return kind(values[name])
    except ValueError:
        raise ConfigError(f"{name}: expected {kind.__name__}, got {values[name]!r}") from None


def _block_io_values(config: NetworkConfig) -> list[int]:
    """Per-sample values entering plus leaving each block."""
    size = config.input_shape[1]
    out = []
    for _, _, cin, cout, stride in _block_plan(config):
        size_out = size // stride
        out.append(cin * size * size + cout * size_out * size_out)
        size = size_out
    return out


@dataclass(frozen=True)
class _Terms:
    """Multipliers of ``(t_fn, t_fixed, latency, 1/bandwidth)`` split by cost kind."""

    compute: float
    messages: float
    bytes: float


def _terms(s: SimScenario, warp: int, bytes_per_value: int) -> _Terms:
    net = s.network
    fn_scale = s.block_kind.convs / 2  # Basic function = 1 unit of t_fn
    per_group = -(-s.batch_size // s.groups)
    eff = effective_samples(per_group, warp)
    fns_per_worker = net.total_blocks * s.k // s.split
    compute = fn_scale * fns_per_worker * eff
    messages = 0.0
    nbytes = 0.0
    if s.split > 1:
        # each block's input goes out to the partner and the partial sum comes back
        io = _block_io_values(net)
        messages += 2 * len(io)
        nbytes += sum(io) * per_group * bytes_per_value
    if s.groups > 1:
        messages += 1
        nbytes += count_config_parameters(net) * bytes_per_value
    return _Terms(compute, messages, nbytes)


def features(scenario: SimScenario, warp: int = 32, bytes_per_value: int = 4) -> np.ndarray:
    """Row of the linear model: ``step_time = features . coefficients``."""
    t = _terms(scenario, warp, bytes_per_value)
    return np.array([t.compute, 1.0, t.messages, t.bytes])


def simulate_step(scenario: SimScenario, cost: CostModel) -> SimResult:
    t = _terms(scenario, cost.warp, cost.bytes_per_value)
    transfer = t.messages * cost.latency + t.bytes / cost.bandwidth
    return SimResult(scenario, t.compute * cost.t_fn, transfer, cost.t_fixed)


# -- calibration ----------------------------------------------------------------


class CalibrationError(ValueError):
    pass


def _unidentifiable(A: np.ndarray) -> list[str]:
    rank = np.linalg.matrix_rank(A)
    names = []
    for j, name in enumerate(PARAMETERS):
        rest = np.delete(A, j, axis=1)
        if np.linalg.matrix_rank(rest) == rank:
            names.append(name)
    return names


def calibrate(observations: Sequence[tuple[SimScenario, float]], initial: Optional[CostModel] = None) -> CostModel:
    """Fit ``t_fn, t_fixed, latency, bandwidth`` to measured step times.

    Non-negative linear least squares on the scenario features; ``warp``
    and ``bytes_per_value`` are taken from ``initial``. A fitted zero
    transfer cost per byte becomes infinite bandwidth.
    """
    initial = CostModel() if initial is None else initial
    if not observations:
        raise CalibrationError("no observations to calibrate against")
    A = np.array([features(s, initial.warp, initial.bytes_per_value) for s, _ in observations])
    y = np.array([t for _, t in observations], dtype=np.float64)
    scale = np.abs(A).max(axis=0)
    scale[scale == 0] = 1.0
    As = A / scale
    if np.linalg.matrix_rank(As) < len(PARAMETERS):
        bad = _unidentifiable(As)
        raise CalibrationError(
            f"observations are rank-deficient ({len(observations)} rows); "
            f"not identifiable: {', '.join(bad)}"
        )
    coef, _ = nnls(As, y)
    coef = coef / scale
    t_fn, t_fixed, latency, inv_bw = (float(c) for c in coef)
    bandwidth = math.inf if inv_bw == 0 else 1.0 / inv_bw
    return replace(initial, t_fn=t_fn, t_fixed=t_fixed, latency=latency, bandwidth=bandwidth)


def residuals(observations: Sequence[tuple[SimScenario, float]], cost: CostModel) -> list[float]:
    """Relative errors ``predicted/measured - 1``."""
    return [simulate_step(s, cost).step_time / t - 1.0 for s, t in observations]


# -- paired comparison ----------------------------------------------------------------


def speedup(baseline_time: float, step_time: float) -> float:
    """Fractional time saved against the baseline: ``1 - t/t_base``."""
    return 1.0 - step_time / baseline_time


@dataclass(frozen=True)
class SpeedupRow:
    base: SimResult
    multi: SimResult

    @property
    def speedup(self) -> float:
        return speedup(self.base.step_time, self.multi.step_time)


def pair_scenarios(scenarios: Sequence[SimScenario]) -> list[tuple[SimScenario, SimScenario]]:
    """Match each ``k>1`` scenario with the ``k=1`` scenario of equal batch and convolution count."""
    bases = [s for s in scenarios if s.k == 1]
    multis = [s for s in scenarios if s.k > 1]
    pairs = []
    used = set()
    for m in multis:
        match = [i for i, b in enumerate(bases) if i not in used and b.batch_size == m.batch_size and b.conv_layers == m.conv_layers]
        if not match:
            raise ValueError(f"unpaired scenario: depth {m.depth}, k={m.k}, batch {m.batch_size}")
        used.add(match[0])
        pairs.append((bases[match[0]], m))
    for i, b in enumerate(bases):
        if i not in used:
            raise ValueError(f"unpaired scenario: depth {b.depth}, k={b.k}, batch {b.batch_size}")
    return pairs


def speedup_table(scenarios: Sequence[SimScenario], cost: CostModel) -> list[SpeedupRow]:
    return [SpeedupRow(simulate_step(b, cost), simulate_step(m, cost)) for b, m in pair_scenarios(scenarios)]


def write_results_csv(path, results: Sequence[SimResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["depth", "k", "batch", "workers", "strategy", "compute", "transfer", "fixed", "step_time"])
        for r in results:
            s = r.scenario
            w.writerow([s.depth, s.k, s.batch_size, s.workers, s.strategy.value,
                        repr(r.compute), repr(r.transfer), repr(r.fixed), repr(r.step_time)])


def _fmt_speedup(x: float) -> str:
    pct = round(100 * x)
    return "-" if pct <= 0 else f"{pct}%"


def speedup_markdown(rows: Sequence[SpeedupRow]) -> str:
    """Markdown table with the published comparison's columns."""
    lines = [
        "| depth | k | time | depth | k | time | batch | speedup |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for r in rows:
        b, m = r.base.scenario, r.multi.scenario
        lines.append(
            f"| {b.depth} | {b.k} | {r.base.step_time * 1e3:.0f}ms | {m.depth} | {m.k} | "
            f"{r.multi.step_time * 1e3:.0f}ms | {b.batch_size} | {_fmt_speedup(r.speedup)} |"
        )
    return "\n".join(lines) + "\n"


def write_speedup_csv(path, rows: Sequence[SpeedupRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["base_depth", "base_k", "base_time", "multi_depth", "multi_k", "multi_time", "batch", "speedup"])
        for r in rows:
            b, m = r.base.scenario, r.multi.scenario
            w.writerow([b.depth, b.k, repr(r.base.step_time), m.depth, m.k, repr(r.multi.step_time),
                        b.batch_size, repr(r.speedup)])


# -- bundled measurements -----------------------------------------------------------------


@dataclass(frozen=True)
class ReferenceRow:
    """One published two-GPU comparison: deep k=1 data-parallel vs multi-residual model-parallel."""

    base_depth: int
    base_ms: float
    multi_depth: int
    multi_k: int
    multi_ms: float
    batch: int
    speedup_pct: Optional[float]

    @property
    def base(self) -> SimScenario:
        return SimScenario(self.base_depth, 1, self.batch, 2, Strategy.DATA)

    @property
    def multi(self) -> SimScenario:
        return SimScenario(self.multi_depth, self.multi_k, self.batch, 2, Strategy.MODEL)


def read_reference_csv(path=None) -> list[ReferenceRow]:
    """Rows of the bundled K80 timing fixture (or a CSV with the same columns)."""
    if path is None:
        text = resources.files("multiresnet").joinpath("data/k80_timings.csv").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    rows = []
    for rec in csv.DictReader(text.splitlines()):
        sp = rec["speedup_pct"].strip()
        rows.append(
            ReferenceRow(
                int(rec["base_depth"]),
                float(rec["base_ms"]),
                int(rec["multi_depth"]),
                int(rec["multi_k"]),
                float(rec["multi_ms"]),
                int(rec["batch"]),
                None if sp == "-" else float(sp),
            )
        )
    return rows


def reference_observations(rows: Sequence[ReferenceRow], batch: Optional[int] = None) -> list[tuple[SimScenario, float]]:
    obs = []
    for r in rows:
        if batch is None or r.batch == batch:
            obs.append((r.base, r.base_ms / 1e3))
            obs.append((r.multi, r.multi_ms / 1e3))
    return obs
