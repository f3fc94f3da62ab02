"""Per-step, per-token-position noise schedule and its adaptive recalibration.

The schedule is a grid ``alpha_bar[t][i]`` (t = 0..T, position i = 0..n-1)
of cumulative signal-retention factors, strictly decreasing in t within
(alpha_min, 1].  Training records per-(t, i) denoising losses into a
ledger (padding positions excluded); recalibration then, per position,

  1. fills unvisited cells by linear interpolation along t,
  2. averages losses and alpha-bars over stride-K windows of t into coarse
     knots (T=2000 with K=20 gives 100 knots),
  3. fits a piecewise-linear loss -> alpha_bar mapping through the knots,
     bracketed by the raw endpoint cells (t=1, t=T) so the mapping spans
     the full recorded loss range, after a weighted pool-adjacent-violators
     pass makes knot losses monotone (pooled knots merge), and
  4. resamples the schedule at T loss targets evenly spaced over the
     mapping's range, so the recorded loss becomes an affine function of t.

If the recorded losses are already affine in t (and the schedule's knots
collinear with them), the resampling is the identity up to rounding.  A
position whose ledger has no samples, or whose knots collapse to a single
point, keeps its previous column for that round.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ScheduleError",
    "NoiseSchedule",
    "LossLedger",
    "InterpolationMapping",
    "Coefficients",
    "PositionKnots",
    "sqrt_init",
    "coarsen",
    "fit_mapping",
    "adapt",
    "pool_adjacent_violators",
]

_MAGIC = b"TXDSCHD1"
_VERSION = 1


class ScheduleError(ValueError):
    """Invalid schedule parameters or grid state."""


def _strictify(column: np.ndarray, alpha_min: float) -> np.ndarray:
    """Clip a column into (alpha_min, 1] and enforce strict decrease in t.

    The relative gap (1e-9) is far below every tolerance used on the grid,
    so an already-valid column passes through unchanged.
    """
    lo = alpha_min * (1.0 + 1e-4)
    out = np.clip(column, lo, 1.0)
    for t in range(1, out.shape[0]):
        cap = out[t - 1] * (1.0 - 1e-9)
        if out[t] > cap:
            out[t] = cap
    return out


@dataclass
class Coefficients:
    """Length-n per-position vectors of the forward-process algebra at step t.

    alpha_t = alpha_bar_t / alpha_bar_prev, beta_t = 1 - alpha_t, and
    beta_tilde_t = (1 - alpha_bar_prev) / (1 - alpha_bar_t) * beta_t.
    """

    alpha_bar_t: np.ndarray
    alpha_bar_prev: np.ndarray
    alpha_t: np.ndarray
    beta_t: np.ndarray
    beta_tilde_t: np.ndarray


class NoiseSchedule:
    """Immutable (T+1, n) grid of alpha-bar values, float64."""

    def __init__(self, alpha_bar: np.ndarray, alpha_min: float = 1e-4, validate: bool = True):
        grid = np.asarray(alpha_bar, dtype=np.float64)
        if grid.ndim != 2 or grid.shape[0] < 3:
            raise ScheduleError(f"alpha_bar grid must be (T+1, n) with T >= 2, got {grid.shape}")
        self.alpha_bar = grid
        self.alpha_min = float(alpha_min)
        if validate:
            self.validate()

    @property
    def T(self) -> int:
        return self.alpha_bar.shape[0] - 1

    @property
    def n(self) -> int:
        return self.alpha_bar.shape[1]

    def validate(self) -> None:
        grid = self.alpha_bar
        if not np.all(np.isfinite(grid)):
            raise ScheduleError("schedule grid contains non-finite values")
        if grid.max() > 1.0 or grid.min() <= self.alpha_min:
            raise ScheduleError(
                f"alpha_bar must lie in ({self.alpha_min}, 1]; "
                f"got [{grid.min()}, {grid.max()}]"
            )
        if not np.all(np.diff(grid, axis=0) < 0):
            raise ScheduleError("alpha_bar must be strictly decreasing in t for every position")

    def coefficients(self, t: int) -> Coefficients:
        """Per-position coefficient vectors for one step, 1 <= t <= T."""
        if not 1 <= t <= self.T:
            raise ScheduleError(f"t must be in [1, {self.T}], got {t}")
        a_t = self.alpha_bar[t]
        a_prev = self.alpha_bar[t - 1]
        alpha = a_t / a_prev
        beta = 1.0 - alpha
        beta_tilde = (1.0 - a_prev) / (1.0 - a_t) * beta
        return Coefficients(a_t, a_prev, alpha, beta, beta_tilde)

    def gather(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Rows (alpha_bar_t, alpha_bar_{t-1}) for an integer array of steps."""
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ScheduleError(f"t must be in [1, {self.T}], got [{t.min()}, {t.max()}]")
        return self.alpha_bar[t], self.alpha_bar[t - 1]

    # -- persistence --------------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<III", _VERSION, self.T, self.n))
        buf.write(struct.pack("<d", self.alpha_min))
        buf.write(self.alpha_bar.astype("<f8").tobytes(order="C"))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "NoiseSchedule":
        if blob[:8] != _MAGIC:
            raise ScheduleError("not a schedule container (bad magic)")
        version, T, n = struct.unpack("<III", blob[8:20])
        if version != _VERSION:
            raise ScheduleError(f"unsupported schedule container version {version}")
        (alpha_min,) = struct.unpack("<d", blob[20:28])
        grid = np.frombuffer(blob[28:], dtype="<f8").reshape(T + 1, n)
        return cls(grid.copy(), alpha_min=alpha_min)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "NoiseSchedule":
        return cls.from_bytes(Path(path).read_bytes())

    def export_csv(self, path: str | Path, ledger: "LossLedger | None" = None,
                   positions: list[int] | None = None) -> int:
        """Write (t, i, alpha_bar, loss_mean) rows; returns the row count."""
        positions = list(range(self.n)) if positions is None else positions
        rows = 0
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["t", "i", "alpha_bar", "loss_mean"])
            for i in positions:
                for t in range(self.T + 1):
                    loss = ""
                    if ledger is not None and ledger.counts[t, i] > 0:
                        loss = repr(float(ledger.values[t, i]))
                    writer.writerow([t, i, repr(float(self.alpha_bar[t, i])), loss])
                    rows += 1
        return rows


def sqrt_init(T: int, n: int, s0: float = 1e-4, alpha_min: float = 1e-4) -> NoiseSchedule:
    """Position-uniform initial schedule: alpha_bar_t = 1 - sqrt(t/T + s0)."""
    if T < 2:
        raise ScheduleError(f"T must be >= 2, got {T}")
    if n < 1:
        raise ScheduleError(f"n must be >= 1, got {n}")
    if not 0.0 < s0 < 1.0:
        raise ScheduleError(f"s0 must be in (0, 1), got {s0}")
    t = np.arange(T + 1, dtype=np.float64)
    column = 1.0 - np.sqrt(t / T + s0)
    column = _strictify(column, alpha_min)
    grid = np.repeat(column[:, None], n, axis=1)
    return NoiseSchedule(grid, alpha_min=alpha_min)


class LossLedger:
    """Running per-(t, i) loss estimates, an EMA per cell.

    Padding positions never contribute samples.  An empty cell holds the
    sentinel value -1 with count 0.
    """

    SENTINEL = -1.0

    def __init__(self, T: int, n: int, decay: float = 0.99):
        if not 0.0 <= decay < 1.0:
            raise ScheduleError(f"EMA decay must be in [0, 1), got {decay}")
        self.decay = float(decay)
        self.values = np.full((T + 1, n), self.SENTINEL, dtype=np.float64)
        self.counts = np.zeros((T + 1, n), dtype=np.int64)

    @property
    def T(self) -> int:
        return self.values.shape[0] - 1

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def record(self, t: int, losses: np.ndarray, pad_mask: np.ndarray) -> None:
        """Fold one sample of per-position losses at step t into the EMA.

        `pad_mask` is True at padding positions, which are skipped.
        """
        if not 1 <= t <= self.T:
            raise ScheduleError(f"t must be in [1, {self.T}], got {t}")
        losses = np.asarray(losses, dtype=np.float64)
        active = ~np.asarray(pad_mask, dtype=bool)
        if np.any(losses[active] < 0):
            raise ScheduleError("recorded losses must be >= 0")
        fresh = active & (self.counts[t] == 0)
        update = active & ~fresh
        self.values[t, fresh] = losses[fresh]
        self.values[t, update] = (
            self.decay * self.values[t, update] + (1.0 - self.decay) * losses[update]
        )
        self.counts[t, active] += 1

    def record_batch(self, t: np.ndarray, losses: np.ndarray, pad_mask: np.ndarray) -> None:
        """Record a batch: t (B,), losses (B, n), pad_mask (B, n)."""
        for b in range(len(t)):
            self.record(int(t[b]), losses[b], pad_mask[b])


def pool_adjacent_violators(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted least-squares non-decreasing fit of `values`."""
    fitted = np.asarray(values, dtype=np.float64).copy()
    w = np.asarray(weights, dtype=np.float64).copy()
    # Stack of blocks: (start index, pooled value, pooled weight)
    starts: list[int] = []
    vals: list[float] = []
    wts: list[float] = []
    for i in range(len(fitted)):
        starts.append(i)
        vals.append(float(fitted[i]))
        wts.append(float(w[i]))
        while len(vals) > 1 and vals[-2] > vals[-1]:
            total = wts[-2] + wts[-1]
            merged = (vals[-2] * wts[-2] + vals[-1] * wts[-1]) / total
            starts.pop()
            vals.pop()
            wts.pop()
            vals[-1] = merged
            wts[-1] = total
    out = np.empty_like(fitted)
    bounds = starts + [len(fitted)]
    for k in range(len(vals)):
        out[bounds[k]:bounds[k + 1]] = vals[k]
    return out


@dataclass
class InterpolationMapping:
    """Piecewise-linear loss -> alpha_bar mapping for one token position.

    Knot losses are strictly increasing; queries outside the knot range
    clamp to the nearest knot (piecewise-linear extrapolation is unstable).
    """

    losses: np.ndarray
    alphas: np.ndarray

    def __post_init__(self):
        if len(self.losses) != len(self.alphas):
            raise ScheduleError("mapping knots must pair losses with alphas")
        if np.any(np.diff(self.losses) <= 0):
            raise ScheduleError("mapping knot losses must be strictly increasing")

    def __call__(self, queries) -> np.ndarray:
        return np.interp(queries, self.losses, self.alphas)


@dataclass
class PositionKnots:
    """Coarse (loss, alpha_bar) window means for one position.

    ``edge_losses`` are the raw (hole-filled) ledger values at t=1 and t=T;
    ``edge_alphas`` the schedule levels there.  They bracket the knots when
    the mapping is fitted.
    """

    losses: np.ndarray
    alphas: np.ndarray
    weights: np.ndarray
    edge_losses: tuple[float, float]
    edge_alphas: tuple[float, float]

    def __len__(self) -> int:
        return len(self.losses)


def _fill_holes(values: np.ndarray, counts: np.ndarray) -> np.ndarray | None:
    """Interpolate unvisited cells of one position's loss column along t.

    `values`/`counts` cover t = 1..T.  Returns None when nothing was ever
    recorded for the position.
    """
    visited = counts > 0
    if not visited.any():
        return None
    t_axis = np.arange(len(values), dtype=np.float64)
    return np.interp(t_axis, t_axis[visited], values[visited])


def coarsen(ledger: LossLedger, schedule: NoiseSchedule, K: int) -> list[PositionKnots | None]:
    """Stride-K window means of (loss, alpha_bar) per position.

    Steps t = 1..T are partitioned into ceil(T/K) consecutive windows, so
    T=2000 with K=20 yields 100 knots per position.  A position with zero
    recorded cells yields None and skips the current update round.
    """
    if K < 1:
        raise ScheduleError(f"stride K must be >= 1, got {K}")
    if ledger.T != schedule.T or ledger.n != schedule.n:
        raise ScheduleError(
            f"ledger grid {(ledger.T, ledger.n)} does not match schedule {(schedule.T, schedule.n)}"
        )
    T, n = schedule.T, schedule.n
    edges = list(range(1, T + 1, K)) + [T + 1]
    out: list[PositionKnots | None] = []
    for i in range(n):
        filled = _fill_holes(ledger.values[1:, i], ledger.counts[1:, i])
        if filled is None:
            out.append(None)
            continue
        losses = np.empty(len(edges) - 1)
        alphas = np.empty(len(edges) - 1)
        weights = np.empty(len(edges) - 1)
        for s in range(len(edges) - 1):
            lo, hi = edges[s], edges[s + 1]
            losses[s] = filled[lo - 1:hi - 1].mean()
            alphas[s] = schedule.alpha_bar[lo:hi, i].mean()
            weights[s] = hi - lo
        out.append(
            PositionKnots(
                losses=losses,
                alphas=alphas,
                weights=weights,
                edge_losses=(float(filled[0]), float(filled[-1])),
                edge_alphas=(float(schedule.alpha_bar[1, i]), float(schedule.alpha_bar[T, i])),
            )
        )
    return out


def fit_mapping(knots: PositionKnots) -> InterpolationMapping | None:
    """Fit the loss -> alpha_bar mapping for one position.

    The window-mean knots are bracketed by the raw endpoint cells so the
    mapping's domain spans the whole recorded loss range, then knot losses
    are monotonized by a weighted pool-adjacent-violators pass.  Knots that
    were pooled to the same loss merge (weighted alpha mean); if fewer than
    two distinct knots survive (e.g. constant losses), returns None and the
    position's update becomes a no-op.
    """
    losses = np.concatenate(([knots.edge_losses[0]], knots.losses, [knots.edge_losses[1]]))
    alphas = np.concatenate(([knots.edge_alphas[0]], knots.alphas, [knots.edge_alphas[1]]))
    weights = np.concatenate(([1.0], knots.weights, [1.0]))
    if not (np.all(np.isfinite(losses)) and np.all(np.isfinite(alphas))):
        return None
    losses = pool_adjacent_violators(losses, weights)
    merged_l: list[float] = []
    merged_a: list[float] = []
    merged_w: list[float] = []
    for loss, alpha, weight in zip(losses, alphas, weights):
        if merged_l and loss <= merged_l[-1]:
            total = merged_w[-1] + weight
            merged_a[-1] = (merged_a[-1] * merged_w[-1] + alpha * weight) / total
            merged_w[-1] = total
        else:
            merged_l.append(float(loss))
            merged_a.append(float(alpha))
            merged_w.append(float(weight))
    if len(merged_l) < 2:
        return None
    return InterpolationMapping(np.array(merged_l), np.array(merged_a))


def adapt(schedule: NoiseSchedule, ledger: LossLedger, K: int) -> NoiseSchedule:
    """Recalibrated schedule: per position, resample alpha_bar at T loss
    targets evenly spaced over the fitted mapping's range.

    The t=0 level is held at its current value.  Positions whose knots are
    unusable (no samples, collapsed or non-finite knots) keep their
    previous column.  The result is re-validated: strictly decreasing in t,
    bounded in (alpha_min, 1].
    """
    T = schedule.T
    grid = schedule.alpha_bar.copy()
    for i, knots in enumerate(coarsen(ledger, schedule, K)):
        if knots is None:
            continue
        mapping = fit_mapping(knots)
        if mapping is None:
            continue
        targets = np.linspace(mapping.losses[0], mapping.losses[-1], T)
        column = np.concatenate(([grid[0, i]], mapping(targets)))
        grid[:, i] = _strictify(column, schedule.alpha_min)
    return NoiseSchedule(grid, alpha_min=schedule.alpha_min)
