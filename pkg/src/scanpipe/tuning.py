"""Hyperband search with a resumable JSON-lines trial ledger.

Schedule (per bracket s = s_max .. 0, with s_max = floor(log_eta R) and
B = (s_max + 1) R)::

    n = ceil(B / R * eta**s / (s + 1))      configs entering the bracket
    r = R * eta**-s                          epochs at the first rung
    rung i: n_i = floor(n * eta**-i) configs, r_i = floor(r * eta**i) epochs

Each rung promotes the top floor(n_i / eta) configs by validation AUC. A
target trial count is met by repeating whole Hyperband iterations and
truncating the final bracket.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import NoResultError
from .training import HyperParams, SchedulerSpec


@dataclass(frozen=True)
class SearchSpace:
    learning_rate: tuple[float, float] = (1e-8, 1e-1)
    weight_decay: tuple[float, float] = (1e-6, 1e-1)
    dropout: tuple[float, float] = (0.0, 0.5)
    schedulers: tuple[SchedulerSpec, ...] = (SchedulerSpec.cosine(10), SchedulerSpec.plateau(0.5, 3))

    def __post_init__(self):
        for name in ("learning_rate", "weight_decay"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} bounds must be positive and ordered")
        lo, hi = self.dropout
        if not 0 <= lo <= hi <= 0.5:
            raise ValueError("dropout bounds must lie in [0, 0.5]")
        if not self.schedulers:
            raise ValueError("need at least one scheduler choice")

    def with_cosine_t_max(self, t_max: int) -> "SearchSpace":
        scheds = tuple(
            SchedulerSpec.cosine(t_max) if s.kind == "cosine_annealing" else s for s in self.schedulers
        )
        return SearchSpace(self.learning_rate, self.weight_decay, self.dropout, scheds)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "SearchSpace":
        d = dict(d or {})
        kw = {}
        for name in ("learning_rate", "weight_decay", "dropout"):
            if name in d:
                kw[name] = tuple(float(x) for x in d[name])
        if "schedulers" in d:
            kw["schedulers"] = tuple(SchedulerSpec(**s) for s in d["schedulers"])
        space = cls(**kw)
        if "cosine_t_max" in d:
            space = space.with_cosine_t_max(int(d["cosine_t_max"]))
        return space


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(10 ** rng.uniform(math.log10(lo), math.log10(hi)))


def sample_config(space: SearchSpace, rng: np.random.Generator) -> HyperParams:
    lr = _log_uniform(rng, *space.learning_rate)
    wd = _log_uniform(rng, *space.weight_decay)
    dropout = float(rng.uniform(*space.dropout))
    sched = space.schedulers[int(rng.integers(len(space.schedulers)))]
    # guard against rounding at the interval ends
    lr = min(max(lr, space.learning_rate[0]), space.learning_rate[1])
    wd = min(max(wd, space.weight_decay[0]), space.weight_decay[1])
    return HyperParams(lr, wd, dropout, sched)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rung:
    n_configs: int
    epochs: int


@dataclass(frozen=True)
class Bracket:
    iteration: int
    s: int
    rungs: tuple[Rung, ...]

    @property
    def n_configs(self) -> int:
        return self.rungs[0].n_configs if self.rungs else 0

    @property
    def epochs(self) -> int:
        return sum(r.n_configs * r.epochs for r in self.rungs)


@dataclass(frozen=True)
class HyperbandPlan:
    R: int
    eta: int
    s_max: int
    brackets: tuple[Bracket, ...]

    @property
    def total_configs(self) -> int:
        return sum(b.n_configs for b in self.brackets)

    @property
    def total_epochs(self) -> int:
        return sum(b.epochs for b in self.brackets)

    def to_dict(self) -> dict:
        return {
            "R": self.R,
            "eta": self.eta,
            "s_max": self.s_max,
            "total_configs": self.total_configs,
            "total_epochs": self.total_epochs,
            "brackets": [
                {"iteration": b.iteration, "s": b.s, "rungs": [[r.n_configs, r.epochs] for r in b.rungs]}
                for b in self.brackets
            ],
        }


def _s_max(R: int, eta: int) -> int:
    s = 0
    while eta ** (s + 1) <= R:
        s += 1
    return s


def _rungs(n: int, s: int, R: int, eta: int) -> tuple[Rung, ...]:
    out = []
    for i in range(s + 1):
        n_i = n // eta**i
        if n_i < 1:
            break
        r_i = max(1, math.floor(Fraction(R * eta**i, eta**s)))
        out.append(Rung(n_i, r_i))
    return tuple(out)


def plan_hyperband(R: int = 20, eta: int = 3, max_configs: int | None = None) -> HyperbandPlan:
    """Bracket/rung table; one full iteration unless ``max_configs`` asks for more."""
    if R < 1 or eta < 2:
        raise ValueError("need R >= 1 and eta >= 2")
    s_max = _s_max(R, eta)
    B = (s_max + 1) * R
    brackets: list[Bracket] = []
    remaining = max_configs
    iteration = 0
    while True:
        for s in range(s_max, -1, -1):
            n = math.ceil(Fraction(B * eta**s, R * (s + 1)))
            if remaining is not None:
                n = min(n, remaining)
                if n <= 0:
                    break
                remaining -= n
            brackets.append(Bracket(iteration, s, _rungs(n, s, R, eta)))
        iteration += 1
        if remaining is None or remaining <= 0:
            break
    return HyperbandPlan(R, eta, s_max, tuple(brackets))


# ---------------------------------------------------------------------------
# ledger
# ---------------------------------------------------------------------------


@dataclass
class TrialRecord:
    trial_id: int
    config_id: int
    hp: HyperParams
    epochs: int
    iteration: int
    bracket: int
    rung: int
    objective: float | None = None
    status: str = "completed"
    error: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hp"] = self.hp.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrialRecord":
        d = dict(d)
        d["hp"] = HyperParams.from_dict(d["hp"])
        return cls(**d)


class TrialLedger:
    """Append-only trial log, optionally mirrored to a JSON-lines file."""

    def __init__(self, path: str | Path | None = None, records: list[TrialRecord] | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[TrialRecord] = list(records or [])

    @classmethod
    def load(cls, path: str | Path) -> "TrialLedger":
        path = Path(path)
        records = []
        if path.exists():
            for line in path.read_text().splitlines():
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(TrialRecord.from_dict(json.loads(line)))
                except (json.JSONDecodeError, KeyError, TypeError):
                    break  # torn final line from an interrupted append
        return cls(path, records)

    def append(self, rec: TrialRecord) -> None:
        self.records.append(rec)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a") as fh:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())

    def completed(self) -> list[TrialRecord]:
        return [r for r in self.records if r.status == "completed" and r.objective is not None]

    @property
    def status(self) -> str:
        return "ok" if self.completed() else "empty"

    @property
    def epochs_consumed(self) -> int:
        return sum(r.epochs for r in self.records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def _rank_key(rec: TrialRecord):
    return (-rec.objective, rec.trial_id)


def run_hyperband(
    space: SearchSpace,
    plan: HyperbandPlan,
    train_fn: Callable[[HyperParams, int], float],
    seed: int = 0,
    ledger: TrialLedger | str | Path | None = None,
    on_trial: Callable[[TrialRecord], None] | None = None,
) -> TrialLedger:
    """Run every bracket of ``plan``; ``train_fn(hp, epochs)`` returns validation AUC.

    With an existing ledger the run is replayed: trials already recorded are
    reused instead of retrained, so resuming after an interruption yields the
    same final ledger as an uninterrupted run.
    """
    if not isinstance(ledger, TrialLedger):
        ledger = TrialLedger.load(ledger) if ledger is not None else TrialLedger()
    previous = {r.trial_id: r for r in ledger.records}
    rng = np.random.default_rng(seed)
    trial_id = 0
    config_id = 0
    for b in plan.brackets:
        if not b.rungs:
            continue
        alive = []
        for _ in range(b.n_configs):
            alive.append((config_id, sample_config(space, rng)))
            config_id += 1
        for i, rung in enumerate(b.rungs):
            results = []
            for cid, hp in alive:
                old = previous.get(trial_id)
                if old is not None and old.config_id == cid and old.epochs == rung.epochs:
                    rec = old
                else:
                    rec = TrialRecord(trial_id, cid, hp, rung.epochs, b.iteration, b.s, i)
                    try:
                        obj = float(train_fn(hp, rung.epochs))
                        if not 0.0 <= obj <= 1.0:
                            raise ValueError(f"objective {obj} outside [0, 1]")
                        rec.objective = obj
                    except Exception as exc:  # a failed trial never stops the search
                        rec.status = "failed"
                        rec.error = f"{type(exc).__name__}: {exc}"
                    ledger.append(rec)
                    if on_trial is not None:
                        on_trial(rec)
                results.append(rec)
                trial_id += 1
            if i + 1 < len(b.rungs):
                keep = b.rungs[i + 1].n_configs
                done = sorted((r for r in results if r.status == "completed"), key=_rank_key)
                promoted = {r.config_id for r in done[:keep]}
                alive = [(cid, hp) for cid, hp in alive if cid in promoted]
    return ledger


def best_trial(ledger: TrialLedger | list[TrialRecord]) -> TrialRecord:
    records = ledger.records if isinstance(ledger, TrialLedger) else list(ledger)
    done = [r for r in records if r.status == "completed" and r.objective is not None]
    if not done:
        raise NoResultError("ledger has no completed trials")
    return min(done, key=_rank_key)
