"""Lookahead adversarial learning controller and the map aggregation buffer.

The controller only talks to a *trainer* object, which owns the networks and
data. A trainer provides::

    snapshot(tag) -> snapshot          copy of the live generator
    restore(snapshot)                  load a snapshot into the live generator
    tick()                             one block of adversarial generator updates
    evaluate() -> float                hold-out mIoU of the live generator
    generate_maps(snapshot, tag) -> MapSet
    train_discriminator(buffer)        retrain D on real data plus the buffer

:class:`loadseg.adversarial.SegmentationTrainer` is the real one; tests use
scripted trainers to replay mIoU trajectories.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

from .autodiff import ContractError, NumericError

log = logging.getLogger(__name__)

EVENT_KINDS = ("eval", "peak", "dynamic-restart", "cycle-end", "flush", "append", "delete", "disc-train")


@dataclass
class ControllerConfig:
    beta_l: float = 0.05
    beta_u: float = 0.001
    gamma_max: int = 50  # divergence patience, in ticks
    omega_max: int = 5  # peak-finder patience
    psi_max: int = 50  # cycles without a new peak before stopping
    buffer_max: int = 3
    lam: float = 1.0
    lr_a: float = 5e-6
    momentum: float = 0.95
    lr_d: float = 0.01
    steps_per_tick: int = 10
    adv_batch_size: int = 5
    disc_batch_size: int = 16
    disc_target_accuracy: float = 0.95
    disc_patience: int = 3
    disc_max_epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.beta_l > self.beta_u > 0:
            raise ContractError(f"need beta_l > beta_u > 0, got {self.beta_l}, {self.beta_u}")
        for name in ("gamma_max", "omega_max", "psi_max", "buffer_max", "steps_per_tick",
                     "adv_batch_size", "disc_batch_size", "disc_patience", "disc_max_epochs"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.buffer_max < 2:
            raise ContractError("buffer_max must be >= 2 to hold a peak set and an ending set")
        if not (self.lr_a > 0 and self.lr_d > 0):
            raise ContractError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ContractError("momentum must lie in [0, 1)")
        if self.lam < 0:
            raise ContractError("lambda must be nonnegative")


@dataclass
class MapSet:
    """One generated label map per training image, from a single model."""

    maps: Any  # (M, H, W) uint8, or any token in scripted tests
    snapshot_id: int
    tag: str  # initial | peak | ending
    holdout_maps: Any = None
    name: str = ""

    def __len__(self) -> int:
        return len(self.maps)


class AggregationBuffer:
    """Capped list of map sets; slot 0 is the latest initial/peak set."""

    def __init__(self, capacity: int):
        if capacity < 2:
            raise ContractError("buffer capacity must be >= 2")
        self.capacity = capacity
        self.sets: list[MapSet] = []

    def __len__(self) -> int:
        return len(self.sets)

    def __getitem__(self, i: int) -> MapSet:
        return self.sets[i]

    def init(self, initial: MapSet) -> list[tuple[str, str]]:
        if len(initial) == 0:
            raise ContractError("cannot initialize the buffer from an empty training set")
        self.sets = [initial]
        return [("append", initial.name)]

    def aggregate(self, peak: MapSet | None, ending: MapSet) -> list[tuple[str, str]]:
        """Apply one aggregation step; returns the (operation, set name) list performed.

        With a peak the buffer is flushed to ``[peak, ending]``. Otherwise the
        ending set is appended, first deleting slot 1 (the oldest ending set)
        when the buffer is full.
        """
        if ending is None:
            raise ContractError("an ending model is required for aggregation")
        if not self.sets:
            raise ContractError("buffer was never initialized")
        ops: list[tuple[str, str]] = []
        if peak is not None:
            self.sets = [peak, ending]
            ops.append(("flush", f"{peak.name}|{ending.name}"))
            return ops
        if len(self.sets) == self.capacity:
            removed = self.sets.pop(1)
            ops.append(("delete", removed.name))
        self.sets.append(ending)
        ops.append(("append", ending.name))
        return ops

    def names(self) -> list[str]:
        return [s.name for s in self.sets]


@dataclass
class Event:
    tick: int
    cycle: int
    kind: str
    miou: float
    mu_s: float
    mu_star: float
    gamma: int
    omega: int
    buffer_size: int
    detail: str = ""


@dataclass
class ControllerState:
    psi: int = 0
    gamma: int = 0
    omega: int = 0
    mu0: float = 0.0
    mu_s: float = 0.0
    mu: float = 0.0
    mu_star: float = 0.0
    g_s: Any = None
    g_star: Any = None
    g_e: Any = None
    tick: int = 0
    cycles_run: int = 0
    events: list[Event] = field(default_factory=list)

    def record(self, kind: str, buffer_size: int, detail: str = "") -> Event:
        ev = Event(self.tick, self.psi, kind, self.mu, self.mu_s, self.mu_star,
                   self.gamma, self.omega, buffer_size, detail)
        self.events.append(ev)
        return ev


@dataclass
class CycleReport:
    index: int
    terminated_by: str  # divergence-floor | patience | error
    peak_found: bool
    trajectory: list[float]
    buffer_ops: list[tuple[str, str]] = field(default_factory=list)
    dynamic_restarts: int = 0
    error: str = ""


@dataclass
class LoadResult:
    best: Any  # snapshot of the returned generator
    best_miou: float
    initial_miou: float
    events: list[Event]
    cycles: list[CycleReport]
    buffer: AggregationBuffer
    peak_found: bool
    aborted: str = ""


def run_cycle(state: ControllerState, config: ControllerConfig, trainer, buffer_size: int = 0) -> CycleReport:
    """Run one inner loop of adversarial ticks from the current start model.

    Stops once mIoU falls to ``mu_s - beta_l`` or ``gamma`` reaches
    ``gamma_max``. While mIoU stays above ``mu_s + beta_u`` the best model is
    tracked, and after more than ``omega_max`` such ticks the start model is
    moved up to the current one (both counters reset).
    """
    state.mu0 = state.mu_s
    state.gamma = 0
    state.omega = 0
    state.mu = state.mu_s
    trajectory: list[float] = []
    restarts = 0
    index = state.cycles_run
    while state.mu_s - config.beta_l < state.mu and state.gamma < config.gamma_max:
        try:
            trainer.tick()
        except NumericError as err:
            state.g_e = None
            state.record("cycle-end", buffer_size, f"error: {err}")
            return CycleReport(index, "error", state.mu_star > state.mu0, trajectory or [state.mu],
                               dynamic_restarts=restarts, error=str(err))
        state.tick += 1
        state.mu = float(trainer.evaluate())
        trajectory.append(state.mu)
        state.record("eval", buffer_size)
        if state.mu > state.mu_s + config.beta_u:
            if state.mu > state.mu_star:
                state.mu_star = state.mu
                state.g_star = trainer.snapshot("peak")
                state.record("peak", buffer_size, str(getattr(state.g_star, "id", "")))
            if state.omega > config.omega_max:
                state.mu_s = state.mu
                state.g_s = trainer.snapshot("start")
                state.omega = 0
                state.gamma = 0
                restarts += 1
                state.record("dynamic-restart", buffer_size)
            state.omega += 1
        state.gamma += 1
    state.g_e = trainer.snapshot("ending")
    floor_hit = not (state.mu_s - config.beta_l < state.mu)
    terminated_by = "divergence-floor" if floor_hit else "patience"
    state.record("cycle-end", buffer_size, terminated_by)
    return CycleReport(index, terminated_by, state.mu_star > state.mu0, trajectory,
                       dynamic_restarts=restarts)


def run_load(trainer, config: ControllerConfig) -> LoadResult:
    """Run LoAd cycles until ``psi_max`` consecutive cycles find no new peak.

    The live generator ends up holding the returned model: the best peak if
    one was ever found, otherwise the initial model.
    """
    config.validate()
    state = ControllerState()
    buffer = AggregationBuffer(config.buffer_max)

    mu = float(trainer.evaluate())
    state.mu_s = state.mu = state.mu_star = mu
    g0 = trainer.snapshot("start")
    state.g_s = g0
    state.record("eval", 0, "initial")
    for op, name in buffer.init(trainer.generate_maps(g0, "initial")):
        state.record(op, len(buffer), name)
    trainer.train_discriminator(buffer)
    state.record("disc-train", len(buffer))

    reports: list[CycleReport] = []
    aborted = ""
    while state.psi < config.psi_max:
        report = run_cycle(state, config, trainer, len(buffer))
        state.cycles_run += 1
        reports.append(report)
        if report.terminated_by == "error":
            aborted = report.error
            log.warning("cycle %d aborted: %s", report.index, report.error)
            break
        ending = trainer.generate_maps(state.g_e, "ending")
        if state.mu_star > state.mu0:
            state.g_s = state.g_star
            state.mu_s = state.mu_star
            ops = buffer.aggregate(trainer.generate_maps(state.g_star, "peak"), ending)
            state.psi = 0
        else:
            ops = buffer.aggregate(None, ending)
            state.psi += 1
        report.buffer_ops = ops
        trainer.restore(state.g_s)
        state.mu = state.mu_s
        for op, name in ops:
            state.record(op, len(buffer), name)
        trainer.train_discriminator(buffer)
        state.record("disc-train", len(buffer))

    # g_star is only ever set on a strict improvement over the initial mIoU
    peaked = state.g_star is not None
    best = state.g_star if peaked else g0
    trainer.restore(best)
    return LoadResult(best, state.mu_star, mu, state.events, reports, buffer, peaked, aborted)
