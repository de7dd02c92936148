"""Grid expansion and budgeted, resumable sweep execution.

Runs execute strictly sequentially (the single-accelerator protocol). The
registry is an append-only JSONL event log, written transactionally after
every epoch, so a crashed or interrupted sweep resumes from its last
checkpointed epoch with metric sequences identical to an uninterrupted
execution.

Per-epoch commit order: metrics line, checkpoint, registry event. Resume
heals whichever suffix is missing, so every prefix of that order is a
consistent state.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import os
import time
from dataclasses import dataclass, field

from .data import (
    ParallelCorpus,
    Vocab,
    build_vocab,
    encode_pair,
    load_corpus,
    make_batches,
    split_indices,
)
from .errors import ConfigError, DataError, IntegrityError
from .model import ModelConfig, count_params
from .training import (
    EpochMetrics,
    detect_divergence,
    evaluate,
    init_train_state,
    restore_train_state,
    run_epoch,
    save_train_state,
)

AXES = ("d_model", "n_heads", "n_layers", "dropout")

STATUS_PENDING = "pending"
STATUS_RUNNING = "running"
STATUS_COMPLETED = "completed"
STATUS_HALTED_DIVERGENT = "halted_divergent"
STATUS_HALTED_BUDGET = "halted_budget"

_FINAL_STATUSES = (STATUS_COMPLETED, STATUS_HALTED_DIVERGENT, STATUS_HALTED_BUDGET)


class SweepInterrupted(Exception):
    """Raised to stop a sweep at the next epoch boundary; state stays resumable."""


@dataclass
class SweepGrid:
    """The declarative ablation axes, plus exclusions and per-combo overrides."""

    d_model: list[int]
    n_heads: list[int]
    n_layers: list[int]
    dropout: list[float]
    exclude: list[dict] = field(default_factory=list)
    overrides: list[dict] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict) -> "SweepGrid":
        return cls(
            d_model=[int(x) for x in d["d_model"]],
            n_heads=[int(x) for x in d["n_heads"]],
            n_layers=[int(x) for x in d["n_layers"]],
            dropout=[float(x) for x in d["dropout"]],
            exclude=list(d.get("exclude", [])),
            overrides=list(d.get("overrides", [])),
        )

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model, "n_heads": self.n_heads,
            "n_layers": self.n_layers, "dropout": self.dropout,
            "exclude": self.exclude, "overrides": self.overrides,
        }


@dataclass
class Budget:
    """Epoch and wall-clock caps for a sweep."""

    epoch_cap: int = 100
    wall_clock_cap_minutes: float = 480.0
    per_run_wall_cap_minutes: float | None = None

    def __post_init__(self):
        if self.epoch_cap < 1:
            raise ConfigError(f"epoch_cap must be positive, got {self.epoch_cap}")
        if self.wall_clock_cap_minutes <= 0:
            raise ConfigError("wall_clock_cap_minutes must be positive")
        if self.per_run_wall_cap_minutes is not None and self.per_run_wall_cap_minutes <= 0:
            raise ConfigError("per_run_wall_cap_minutes must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "Budget":
        return cls(
            epoch_cap=int(d.get("epoch_cap", 100)),
            wall_clock_cap_minutes=float(d.get("wall_clock_cap_minutes", 480.0)),
            per_run_wall_cap_minutes=(
                None if d.get("per_run_wall_cap_minutes") is None
                else float(d["per_run_wall_cap_minutes"])
            ),
        )

    def to_dict(self) -> dict:
        return {
            "epoch_cap": self.epoch_cap,
            "wall_clock_cap_minutes": self.wall_clock_cap_minutes,
            "per_run_wall_cap_minutes": self.per_run_wall_cap_minutes,
        }


@dataclass
class SweepSpec:
    """Everything a sweep needs: axes, budget, data, seed, and training knobs."""

    grid: SweepGrid
    budget: Budget
    corpus: str
    seed: int = 0
    batch_size: int = 64
    learning_rate: float = 1e-4
    min_freq: int = 2
    max_len: int = 512
    split_ratio: float = 0.7
    max_pairs: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        return cls(
            grid=SweepGrid.from_dict(d["grid"]),
            budget=Budget.from_dict(d.get("budget", {})),
            corpus=str(d["corpus"]),
            seed=int(d.get("seed", 0)),
            batch_size=int(d.get("batch_size", 64)),
            learning_rate=float(d.get("learning_rate", 1e-4)),
            min_freq=int(d.get("min_freq", 2)),
            max_len=int(d.get("max_len", 512)),
            split_ratio=float(d.get("split_ratio", 0.7)),
            max_pairs=None if d.get("max_pairs") is None else int(d["max_pairs"]),
        )

    @classmethod
    def load(cls, path) -> "SweepSpec":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except OSError as exc:
            raise DataError(f"cannot read sweep spec {path}: {exc}") from exc
        except (json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"sweep spec {path} is malformed: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "budget": self.budget.to_dict(),
            "corpus": self.corpus,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "min_freq": self.min_freq,
            "max_len": self.max_len,
            "split_ratio": self.split_ratio,
            "max_pairs": self.max_pairs,
        }


def _matches(combo: dict, clause: dict) -> bool:
    return all(k in combo and combo[k] == v for k, v in clause.items())


def expand_grid(grid: SweepGrid) -> list[dict]:
    """Cartesian product minus exclusions, lexicographic over the axis order
    (d_model, n_heads, n_layers, dropout), with duplicates collapsed."""
    combos = []
    seen = set()
    for d, h, l, p in itertools.product(
            sorted(set(grid.d_model)), sorted(set(grid.n_heads)),
            sorted(set(grid.n_layers)), sorted(set(grid.dropout))):
        combo = {"d_model": d, "n_heads": h, "n_layers": l, "dropout": p}
        if d % h != 0:
            continue
        if any(_matches(combo, cl) for cl in grid.exclude):
            continue
        key = (d, h, l, p)
        if key in seen:
            continue
        seen.add(key)
        combos.append(combo)
    if not combos:
        raise ConfigError("grid expansion produced no valid configurations")
    return combos


def _overrides_for(combo: dict, grid: SweepGrid) -> dict:
    out = {}
    for rule in grid.overrides:
        if _matches(combo, rule.get("match", {})):
            out.update(rule.get("set", {}))
    return out


def derive_run_seed(combo: dict, sweep_seed: int) -> int:
    """64-bit per-run seed, a pure function of the axes and the sweep seed."""
    text = json.dumps({"combo": combo, "seed": sweep_seed}, sort_keys=True)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def run_id_for(combo: dict, run_params: dict, sweep_seed: int, data_hash: str) -> str:
    """Stable run identity: hash of config, seed, and data hash."""
    text = json.dumps(
        {"combo": combo, "params": run_params, "seed": sweep_seed, "data": data_hash},
        sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    """Replayed state of one run, as reconstructed from the registry."""

    run_id: str
    order: int
    combo: dict
    seed: int
    param_count: int
    config: dict
    status: str = STATUS_PENDING
    epochs_done: int = 0
    epoch_cap: int = 0
    halt_epoch: int | None = None
    halt_reason: str | None = None
    elapsed_min: float | None = None
    final: dict | None = None

    @property
    def is_final(self) -> bool:
        return self.status in _FINAL_STATUSES


def append_jsonl(path, record: dict):
    """Append one record and force it to disk before returning."""
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def read_jsonl(path, what: str = "file") -> list[dict]:
    records = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise IntegrityError(
                        f"{what} {path}: corrupt record at line {lineno}: {line!r}"
                    ) from exc
    except OSError as exc:
        raise IntegrityError(f"cannot read {what} {path}: {exc}") from exc
    return records


class Registry:
    """Append-only event log; current state is a replay of the events."""

    def __init__(self, path):
        self.path = str(path)

    def exists(self) -> bool:
        return os.path.exists(self.path)

    def append(self, event: str, run_id: str, **fields):
        rec = {"event": event, "run_id": run_id}
        rec.update(fields)
        append_jsonl(self.path, rec)

    def events(self) -> list[dict]:
        return read_jsonl(self.path, what="registry")

    def replay(self) -> list[RunRecord]:
        records: dict[str, RunRecord] = {}
        order = []
        for ev in self.events():
            kind = ev.get("event")
            rid = ev.get("run_id")
            if kind == "registered":
                if rid in records:
                    raise IntegrityError(f"registry: run {rid} registered twice")
                records[rid] = RunRecord(
                    run_id=rid, order=ev["order"], combo=ev["combo"],
                    seed=ev["seed"], param_count=ev["param_count"],
                    config=ev["config"], epoch_cap=ev["epoch_cap"],
                )
                order.append(rid)
                continue
            if rid not in records:
                raise IntegrityError(f"registry: event for unregistered run {rid}")
            rec = records[rid]
            if kind == "started":
                rec.status = STATUS_RUNNING
            elif kind == "epoch_done":
                rec.epochs_done = max(rec.epochs_done, ev["epoch"])
            elif kind in _FINAL_STATUSES:
                rec.status = kind
                rec.epochs_done = ev.get("epochs", rec.epochs_done)
                rec.halt_epoch = ev.get("halt_epoch")
                rec.halt_reason = ev.get("reason")
                rec.elapsed_min = ev.get("elapsed_min")
                rec.final = ev.get("final")
            else:
                raise IntegrityError(f"registry: unknown event kind {kind!r}")
        return [records[r] for r in order]


@dataclass
class SweepData:
    """Shared, deterministic data preparation for every run in a sweep."""

    data_hash: str
    src_vocab: Vocab
    tgt_vocab: Vocab
    train_pairs: list
    val_pairs: list


def _sweep_paths(out_dir):
    return {
        "spec": os.path.join(out_dir, "spec.json"),
        "registry": os.path.join(out_dir, "registry.jsonl"),
        "data": os.path.join(out_dir, "data"),
        "runs": os.path.join(out_dir, "runs"),
    }


def prepare_sweep_data(spec: SweepSpec, out_dir) -> SweepData:
    """Load, subset, split, build vocabularies, and encode. Deterministic for
    a given (corpus bytes, seed, knobs); artifacts are persisted for audit."""
    paths = _sweep_paths(out_dir)
    os.makedirs(paths["data"], exist_ok=True)
    corpus = load_corpus(spec.corpus)
    if spec.max_pairs is not None:
        corpus = ParallelCorpus(corpus.pairs[: spec.max_pairs], path=corpus.path,
                                content_hash=corpus.content_hash,
                                skipped_lines=corpus.skipped_lines)
    train_idx, val_idx = split_indices(len(corpus.pairs), spec.split_ratio, spec.seed)
    train = ParallelCorpus([corpus.pairs[i] for i in train_idx],
                           path=corpus.path, content_hash=corpus.content_hash)
    val = ParallelCorpus([corpus.pairs[i] for i in val_idx],
                         path=corpus.path, content_hash=corpus.content_hash)
    src_vocab = build_vocab(train, "source", min_freq=spec.min_freq)
    tgt_vocab = build_vocab(train, "target", min_freq=spec.min_freq)

    src_vocab.save(os.path.join(paths["data"], "vocab.src.txt"))
    tgt_vocab.save(os.path.join(paths["data"], "vocab.tgt.txt"))
    manifest = {
        "corpus": corpus.path,
        "corpus_sha256": corpus.content_hash,
        "seed": spec.seed,
        "split_ratio": spec.split_ratio,
        "max_pairs": spec.max_pairs,
        "n_pairs": len(corpus.pairs),
        "train_indices": train_idx,
        "val_indices": val_idx,
    }
    with open(os.path.join(paths["data"], "split.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)

    data_hash = hashlib.sha256(json.dumps({
        "corpus": corpus.content_hash,
        "max_pairs": spec.max_pairs,
        "split_ratio": spec.split_ratio,
        "seed": spec.seed,
        "min_freq": spec.min_freq,
    }, sort_keys=True).encode()).hexdigest()[:16]

    enc = lambda pairs: [encode_pair(p, src_vocab, tgt_vocab, spec.max_len) for p in pairs]
    return SweepData(
        data_hash=data_hash,
        src_vocab=src_vocab,
        tgt_vocab=tgt_vocab,
        train_pairs=enc(train.pairs),
        val_pairs=enc(val.pairs),
    )


def _plan_runs(spec: SweepSpec, data: SweepData) -> list[dict]:
    """Deterministic run plan: one entry per grid combination."""
    plan = []
    for i, combo in enumerate(expand_grid(spec.grid)):
        over = _overrides_for(combo, spec.grid)
        epoch_cap = int(over.get("epoch_cap", spec.budget.epoch_cap))
        lr = float(over.get("learning_rate", spec.learning_rate))
        run_seed = derive_run_seed(combo, spec.seed)
        config = ModelConfig(
            d_model=combo["d_model"], n_heads=combo["n_heads"],
            n_layers=combo["n_layers"], dropout=combo["dropout"],
            src_vocab_size=data.src_vocab.size, tgt_vocab_size=data.tgt_vocab.size,
            max_len=spec.max_len, seed=run_seed,
        )
        run_params = {"learning_rate": lr, "batch_size": spec.batch_size,
                      "max_len": spec.max_len}
        rid = run_id_for(combo, run_params, spec.seed, data.data_hash)
        plan.append({
            "run_id": rid,
            "order": i,
            "combo": combo,
            "seed": run_seed,
            "config": config,
            "learning_rate": lr,
            "epoch_cap": epoch_cap,
            "param_count": count_params(config),
        })
    return plan


class _WallClock:
    def __init__(self, budget: Budget):
        self.budget = budget
        self.start = time.monotonic()

    def sweep_exhausted(self) -> bool:
        return (time.monotonic() - self.start) / 60.0 >= self.budget.wall_clock_cap_minutes

    def run_exhausted(self, run_minutes: float) -> bool:
        cap = self.budget.per_run_wall_cap_minutes
        return cap is not None and run_minutes >= cap


def _metrics_path(out_dir, run_id):
    return os.path.join(_sweep_paths(out_dir)["runs"], run_id, "metrics.jsonl")


def _checkpoint_path(out_dir, run_id):
    return os.path.join(_sweep_paths(out_dir)["runs"], run_id, "checkpoint")


def _truncate_metrics(path, keep_epochs: int):
    """Drop metric lines beyond the last checkpointed epoch (crash healing)."""
    if not os.path.exists(path):
        return
    records = read_jsonl(path, what="metric stream")
    kept = [r for r in records if r["epoch"] <= keep_epochs]
    if len(kept) == len(records):
        return
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for r in kept:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _execute_run(plan: dict, spec: SweepSpec, data: SweepData, registry: Registry,
                 out_dir, clock: _WallClock, record: RunRecord,
                 interrupt=None) -> None:
    """Train one run to its epoch cap, halting on divergence or budget.

    Commits one transaction per epoch; safe to kill at any point.
    """
    rid = plan["run_id"]
    run_dir = os.path.dirname(_metrics_path(out_dir, rid))
    os.makedirs(run_dir, exist_ok=True)
    ckpt = _checkpoint_path(out_dir, rid)
    metrics_file = _metrics_path(out_dir, rid)

    with open(os.path.join(run_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump({
            "config": plan["config"].to_dict(),
            "learning_rate": plan["learning_rate"],
            "batch_size": spec.batch_size,
            "epoch_cap": plan["epoch_cap"],
            "data_hash": data.data_hash,
        }, fh, indent=1)
    if record.status == STATUS_PENDING:
        registry.append("started", rid)

    if os.path.isdir(ckpt):
        state = restore_train_state(ckpt)
        _truncate_metrics(metrics_file, state.epoch)
        history = [EpochMetrics.from_record(r)
                   for r in read_jsonl(metrics_file, what="metric stream")]
        for epoch in range(record.epochs_done + 1, state.epoch + 1):
            registry.append("epoch_done", rid, epoch=epoch)  # heal missing events
    else:
        _truncate_metrics(metrics_file, 0)
        state = init_train_state(plan["config"], learning_rate=plan["learning_rate"])
        history = []

    val_batches = make_batches(data.val_pairs, spec.batch_size)
    epoch_cap = plan["epoch_cap"]

    def finalize(status: str, reason: str | None = None):
        final = history[-1].to_record(rid) if history else None
        if final is not None:
            final.pop("run_id")
        fields = {
            "epochs": state.epoch,
            "elapsed_min": state.train_seconds / 60.0,
            "final": final,
        }
        if status != STATUS_COMPLETED:
            fields["halt_epoch"] = state.epoch
        if reason:
            fields["reason"] = reason
        registry.append(status, rid, **fields)

    while state.epoch < epoch_cap:
        if clock.sweep_exhausted():
            finalize(STATUS_HALTED_BUDGET, reason="sweep wall clock exhausted")
            return
        if clock.run_exhausted(state.train_seconds / 60.0):
            finalize(STATUS_HALTED_BUDGET, reason="per-run wall clock exhausted")
            return
        if interrupt is not None and interrupt():
            raise SweepInterrupted(f"run {rid} interrupted at epoch {state.epoch}")

        t0 = time.perf_counter()
        train_batches = make_batches(data.train_pairs, spec.batch_size,
                                     rng=state.rng_shuffle, shuffle=True)
        train_loss, train_acc = run_epoch(state, train_batches)
        if math.isfinite(train_loss):
            val_loss, val_acc, val_ppl = evaluate(state.params, val_batches)
        else:
            val_loss, val_acc, val_ppl = math.nan, 0.0, math.nan
        wall = time.perf_counter() - t0
        state.train_seconds += wall
        if math.isfinite(val_loss) and val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            state.best_epoch = state.epoch

        metrics = EpochMetrics(
            epoch=state.epoch, train_loss=train_loss, train_acc=train_acc,
            val_loss=val_loss, val_acc=val_acc, val_perplexity=val_ppl,
            wall_seconds=wall,
        )
        history.append(metrics)

        # Transaction: metrics line, then checkpoint, then registry event.
        append_jsonl(metrics_file, metrics.to_record(rid))
        save_train_state(state, ckpt)
        registry.append("epoch_done", rid, epoch=state.epoch)

        reason = detect_divergence(history)
        if reason is not None:
            finalize(STATUS_HALTED_DIVERGENT, reason=reason)
            return

    finalize(STATUS_COMPLETED)


def _verify_registry_against_plan(records: list[RunRecord], plan: list[dict]):
    by_id = {p["run_id"]: p for p in plan}
    for rec in records:
        if rec.run_id not in by_id:
            raise IntegrityError(
                f"registry run {rec.run_id} does not match the sweep spec/data "
                "(config or data hash changed)")
    if len(records) != len(plan):
        raise IntegrityError(
            f"registry holds {len(records)} runs but the spec expands to {len(plan)}")


def _drive(spec: SweepSpec, out_dir, interrupt=None) -> list[RunRecord]:
    paths = _sweep_paths(out_dir)
    os.makedirs(paths["runs"], exist_ok=True)
    registry = Registry(paths["registry"])
    data = prepare_sweep_data(spec, out_dir)
    plan = _plan_runs(spec, data)

    if registry.exists():
        records = registry.replay()  # raises IntegrityError on corruption
        _verify_registry_against_plan(records, plan)
    else:
        for p in plan:
            registry.append(
                "registered", p["run_id"], order=p["order"], combo=p["combo"],
                seed=p["seed"], param_count=p["param_count"],
                config={**p["config"].to_dict(),
                        "learning_rate": p["learning_rate"],
                        "batch_size": spec.batch_size},
                epoch_cap=p["epoch_cap"], data_hash=data.data_hash,
            )
        records = registry.replay()

    clock = _WallClock(spec.budget)
    by_id = {r.run_id: r for r in records}
    attempted_any = False
    for p in plan:
        rec = by_id[p["run_id"]]
        if rec.is_final:
            continue
        # Once the sweep budget is gone, runs not yet attempted this
        # session stay pending; the one that hits the wall mid-flight is
        # halted by the epoch-boundary check inside _execute_run.
        if clock.sweep_exhausted() and attempted_any:
            continue
        attempted_any = True
        _execute_run(p, spec, data, registry, out_dir, clock, rec,
                     interrupt=interrupt)
    return registry.replay()


def execute_sweep(spec: SweepSpec, out_dir, interrupt=None) -> list[RunRecord]:
    """Expand, register, and execute a sweep under its budget.

    ``out_dir`` receives the spec echo, registry, shared data artifacts,
    and one directory per run. Returns the replayed run records.
    """
    os.makedirs(out_dir, exist_ok=True)
    spec_path = _sweep_paths(out_dir)["spec"]
    if os.path.exists(spec_path):
        existing = SweepSpec.load(spec_path)
        if existing.to_dict() != spec.to_dict():
            raise IntegrityError(
                f"{out_dir} already holds a different sweep spec; "
                "use resume or a fresh output directory")
    else:
        with open(spec_path, "w", encoding="utf-8") as fh:
            json.dump(spec.to_dict(), fh, indent=1)
    return _drive(spec, out_dir, interrupt=interrupt)


def resume_sweep(out_dir, interrupt=None) -> list[RunRecord]:
    """Continue an interrupted sweep from its registry and checkpoints."""
    paths = _sweep_paths(out_dir)
    if not os.path.exists(paths["spec"]):
        raise IntegrityError(f"{out_dir} has no sweep spec to resume")
    if not os.path.exists(paths["registry"]):
        raise IntegrityError(f"{out_dir} has no registry to resume")
    spec = SweepSpec.load(paths["spec"])
    return _drive(spec, out_dir, interrupt=interrupt)
