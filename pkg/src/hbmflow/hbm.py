"""HBM2 pseudo-channel model: efficiency table, latency envelope, traffic generator.

The controller is modeled at burst granularity. A token bucket accrues the
configured efficiency every interface cycle and a burst of ``BL`` beats is
accepted once ``BL`` tokens are available, so accepted beats / cycles
converges on the table value. Each accepted read returns after a latency
drawn from a triangular distribution over the (min, avg, max) envelope, with
the mode chosen so the mean is ``avg``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

BURST_LENGTHS = (1, 2, 4, 8, 16, 32)
UNSATURATED_MAX_NS = 450.0
TOKEN_SCALE = 10_000  # fixed-point resolution of the efficiency throttle

# burst length -> (read_eff, write_eff); BL 1/2/4/16 are plot reads, overridable
DEFAULT_EFFICIENCY = {
    1: (0.43, 0.36),
    2: (0.44, 0.37),
    4: (0.45, 0.38),
    8: (0.83, 0.68),
    16: (0.88, 0.73),
    32: (0.93, 0.78),
}
# burst length -> (min_ns, avg_ns, max_ns) under saturated reads
DEFAULT_LATENCY = {
    1: (150.0, 800.0, 1600.0),
    2: (150.0, 750.0, 1500.0),
    4: (150.0, 700.0, 1400.0),
    8: (150.0, 600.0, 1214.0),
    16: (150.0, 500.0, 1000.0),
    32: (150.0, 400.0, 800.0),
}


class Pattern(str, Enum):
    RANDOM = "random"
    SEQUENTIAL = "sequential"


class HbmError(ValueError):
    pass


def _default_pcs():
    # PC16 sits next to the secure device manager and is left unused
    return tuple(pc for pc in range(32) if pc != 16)


@dataclass(frozen=True)
class HbmConfig:
    n_stacks: int = 2
    pcs_per_stack: int = 16
    pc_data_bits: int = 256
    pc_clock_hz: int = 400_000_000
    usable_pcs: tuple[int, ...] = field(default_factory=_default_pcs)
    efficiency_table: dict[int, tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_EFFICIENCY))
    latency_envelope: dict[int, tuple[float, float, float]] = field(
        default_factory=lambda: dict(DEFAULT_LATENCY))
    refresh_enabled: bool = False
    refresh_period_ns: float = 3900.0
    refresh_stall_ns: float = 260.0

    def __post_init__(self):
        object.__setattr__(self, "usable_pcs", tuple(self.usable_pcs))
        n = self.n_stacks * self.pcs_per_stack
        for pc in self.usable_pcs:
            if not 0 <= pc < n:
                raise HbmError(f"pseudo-channel {pc} does not exist ({n} available)")
        for bl, (r, w) in self.efficiency_table.items():
            if not (0 < r <= 1 and 0 < w <= 1):
                raise HbmError(f"efficiency for BL={bl} must lie in (0, 1]")
        for bl, (lo, avg, hi) in self.latency_envelope.items():
            if not lo <= avg <= hi:
                raise HbmError(f"latency envelope for BL={bl} needs min <= avg <= max")
            if not lo <= 3 * avg - lo - hi <= hi:
                raise HbmError(f"BL={bl}: no triangular distribution has mean {avg} on [{lo}, {hi}]")

    @property
    def n_pcs(self) -> int:
        return self.n_stacks * self.pcs_per_stack

    @property
    def raw_bandwidth(self) -> float:
        """Aggregate interface bandwidth in bytes/s."""
        return self.n_pcs * self.pc_data_bits * self.pc_clock_hz / 8

    def worst_latency_ns(self, min_burst: int = 8) -> float:
        return max(hi for bl, (_, _, hi) in self.latency_envelope.items() if bl >= min_burst)


def _check_bl(cfg: HbmConfig, burst_length: int):
    if burst_length not in cfg.efficiency_table or burst_length not in cfg.latency_envelope:
        raise HbmError(f"unsupported burst length {burst_length}; "
                       f"table covers {sorted(cfg.efficiency_table)}")


def read_efficiency(cfg: HbmConfig, burst_length: int, pattern: Pattern | str = "random") -> float:
    _check_bl(cfg, burst_length)
    if Pattern(pattern) is Pattern.SEQUENTIAL:
        return cfg.efficiency_table[max(cfg.efficiency_table)][0]
    return cfg.efficiency_table[burst_length][0]


def write_efficiency(cfg: HbmConfig, burst_length: int, pattern: Pattern | str = "random") -> float:
    _check_bl(cfg, burst_length)
    if Pattern(pattern) is Pattern.SEQUENTIAL:
        return cfg.efficiency_table[max(cfg.efficiency_table)][1]
    return cfg.efficiency_table[burst_length][1]


def triangular_mode(lo: float, avg: float, hi: float) -> float:
    return 3 * avg - lo - hi


def latency_sample(cfg: HbmConfig, burst_length: int, saturated: bool,
                   rng: np.random.Generator) -> float:
    """One read latency in ns."""
    _check_bl(cfg, burst_length)
    lo, avg, hi = cfg.latency_envelope[burst_length]
    if not saturated:
        top = min(hi, UNSATURATED_MAX_NS)
        if top <= lo:
            return lo
        return float(rng.triangular(lo, lo, top))
    mode = triangular_mode(lo, avg, hi)
    if hi == lo:
        return lo
    return float(rng.triangular(lo, mode, hi))


def latency_samples(cfg: HbmConfig, burst_length: int, n: int, rng: np.random.Generator,
                    saturated: bool = True) -> np.ndarray:
    _check_bl(cfg, burst_length)
    lo, avg, hi = cfg.latency_envelope[burst_length]
    if not saturated:
        hi, avg = min(hi, UNSATURATED_MAX_NS), None
        mode = lo
    else:
        mode = triangular_mode(lo, avg, hi)
    if hi <= lo:
        return np.full(n, lo)
    return rng.triangular(lo, mode, hi, size=n)


def efficiency_tokens(eff: float) -> int:
    return int(round(eff * TOKEN_SCALE))


class PseudoChannel:
    """Cycle-stepped controller front end for one pseudo-channel.

    ``ready()`` is the inverse of the back-pressure signal; ``accept()``
    consumes one burst worth of tokens.
    """

    def __init__(self, cfg: HbmConfig, burst_length: int, efficiency: float,
                 rng: np.random.Generator | None = None, random_accept: bool = False):
        self.cfg = cfg
        self.bl = burst_length
        self.eff_q = efficiency_tokens(efficiency)
        self.cost = burst_length * TOKEN_SCALE
        self.tokens = 0
        self.cycle = 0
        self.rng = rng
        self.random_accept = random_accept
        if random_accept and rng is None:
            raise HbmError("random acceptance mode needs an rng")
        hz = cfg.pc_clock_hz
        self.refresh_period = (math.ceil(cfg.refresh_period_ns * hz / 1e9)
                               if cfg.refresh_enabled else 0)
        self.refresh_stall = math.ceil(cfg.refresh_stall_ns * hz / 1e9)

    def refreshing(self) -> bool:
        return bool(self.refresh_period) and (self.cycle % self.refresh_period) < self.refresh_stall

    def tick(self):
        self.cycle += 1
        if self.refreshing():
            return
        if self.random_accept:
            gain = TOKEN_SCALE if self.rng.random() * TOKEN_SCALE < self.eff_q else 0
        else:
            gain = self.eff_q
        # idle slots are lost: at most one slot of carry beyond a full burst
        self.tokens = min(self.tokens + gain, self.cost + gain)

    def ready(self) -> bool:
        return self.tokens >= self.cost and not self.refreshing()

    def accept(self):
        if not self.ready():
            raise HbmError("burst issued while back-pressure is asserted")
        self.tokens -= self.cost


@dataclass(frozen=True)
class MeasuredStats:
    efficiency: float
    write_efficiency: float
    latency_min_ns: float
    latency_avg_ns: float
    latency_max_ns: float
    transactions: int


def _drive(pc: PseudoChannel, n_txn: int) -> np.ndarray:
    """Issue back-to-back bursts whenever back-pressure is low; return issue cycles."""
    issued = np.empty(n_txn, dtype=np.int64)
    done = 0
    while done < n_txn:
        pc.tick()
        if pc.ready():
            pc.accept()
            issued[done] = pc.cycle
            done += 1
    return issued


def characterize(cfg: HbmConfig, n_txn: int = 10_000, burst_length: int = 8,
                 pattern: Pattern | str = "random", seed: int = 0,
                 random_accept: bool = False) -> MeasuredStats:
    """Traffic-generator run: ``n_txn`` writes, then ``n_txn`` reads."""
    if n_txn < 1:
        raise HbmError("need at least one transaction")
    _check_bl(cfg, burst_length)
    rng = np.random.default_rng(seed)
    w_eff = write_efficiency(cfg, burst_length, pattern)
    r_eff = read_efficiency(cfg, burst_length, pattern)

    wr = PseudoChannel(cfg, burst_length, w_eff, rng, random_accept)
    w_cycles = _drive(wr, n_txn)[-1]
    rd = PseudoChannel(cfg, burst_length, r_eff, rng, random_accept)
    issued = _drive(rd, n_txn)
    r_cycles = issued[-1]

    saturated = Pattern(pattern) is Pattern.RANDOM
    lat = latency_samples(cfg, burst_length, n_txn, rng, saturated=saturated)
    if rd.refresh_period:
        # a refresh starting while the read is outstanding delays its data
        ns_per_cycle = 1e9 / cfg.pc_clock_hz
        start = issued * ns_per_cycle
        period = rd.refresh_period * ns_per_cycle
        next_refresh = np.ceil(start / period) * period
        lat = lat + np.where(next_refresh < start + lat, cfg.refresh_stall_ns, 0.0)
    return MeasuredStats(
        efficiency=float(n_txn * burst_length / r_cycles),
        write_efficiency=float(n_txn * burst_length / w_cycles),
        latency_min_ns=float(lat.min()),
        latency_avg_ns=float(lat.mean()),
        latency_max_ns=float(lat.max()),
        transactions=n_txn,
    )


def effective_bandwidth(cfg: HbmConfig, used_bits_per_word: int = 240,
                        core_clock_hz: int = 300_000_000) -> float:
    """Peak weight bandwidth in bytes/s at 100% efficiency, limited by the core clock."""
    if used_bits_per_word > cfg.pc_data_bits:
        raise HbmError(f"cannot use {used_bits_per_word} of {cfg.pc_data_bits} bits")
    return len(cfg.usable_pcs) * used_bits_per_word * core_clock_hz / 8


# -- calibration file ---------------------------------------------------------

def load_calibration(path: str | Path, base: HbmConfig | None = None) -> HbmConfig:
    """Read ``bl,read_eff,write_eff,min_ns,avg_ns,max_ns`` rows over the defaults."""
    base = base or HbmConfig()
    eff = dict(base.efficiency_table)
    lat = dict(base.latency_envelope)
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 6:
            raise HbmError(f"{path}:{lineno}: expected 6 comma-separated fields")
        try:
            bl = int(parts[0])
            r, w, lo, avg, hi = map(float, parts[1:])
        except ValueError:
            raise HbmError(f"{path}:{lineno}: malformed number") from None
        eff[bl] = (r, w)
        lat[bl] = (lo, avg, hi)
    return replace(base, efficiency_table=eff, latency_envelope=lat)


def dump_calibration(cfg: HbmConfig) -> str:
    rows = ["# bl,read_eff,write_eff,min_ns,avg_ns,max_ns"]
    for bl in sorted(cfg.efficiency_table):
        r, w = cfg.efficiency_table[bl]
        lo, avg, hi = cfg.latency_envelope[bl]
        rows.append(f"{bl},{r},{w},{lo},{avg},{hi}")
    return "\n".join(rows) + "\n"
