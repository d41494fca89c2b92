"""Round loop coordination: mutate, run the differential oracle, learn, report.

Each round mutates the test input tensor (uniformly chosen rule), selects a
seed model by tournament, mutates it with a contribution-weighted rule, runs
all backends, and feeds the classified result back into the seed pool and the
rule contributions.  Findings are deduplicated on the fly and written to the
bug corpus.

The canonical campaign report is free of wall-clock data so that two runs with
the same seed produce byte-identical reports; timings go to a separate file.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .backends import Backend, OptimizingBackend, builtin_roster
from .difftest import (
    BackendId,
    BackendRole,
    BugReport,
    ConfigError,
    DiffConfig,
    RoundResult,
    RoundStatus,
    classify_outcomes,
    dedup_bugs,
    run_differential,
    write_bug_entry,
)
from .graphs import (
    GraphModel,
    NeedTwoModels,
    ShapeError,
    graph_to_json,
    infer_shapes,
    mean_sequence_edit_distance,
    operator_sequence,
    pairwise_distance_histogram,
    read_graph,
    structure_hash,
)
from .heuristics import (
    FitnessRecord,
    RuleStats,
    SeedPool,
    compute_fitness,
    rule_probabilities,
    sample_rule,
    update_contribution,
)
from .mutations import (
    Inapplicable,
    SeedConfig,
    apply_model_mutation,
    decode_rule_key,
    expanded_rule_universe,
    generate_seed_model,
    refit_params,
)
from .optimizer import Fault, OptimizeConfig
from .tensors import (
    DType,
    Shape,
    ShapeTooLarge,
    Tensor,
    TensorMutationRule,
    mutate_tensor,
    random_seed_tensor,
    read_tensor,
)

_MUTATION_ATTEMPTS_PER_ROUND = 10

_FAULT_LABELS = {
    Fault.SHAPE_KEYED_CACHE: "CacheReuse",
    Fault.SOFTMAX_MAXPOOL_REORDER: "InferenceAcceleration",
    Fault.FUSED_PARAM_ERROR: "InferenceAcceleration",
}


@dataclass(frozen=True)
class CampaignConfig:
    rounds: int | None = None
    duration_s: float | None = None
    chain_length: int = 6
    input_shape: Shape = Shape(1, 1, 8, 8)
    epsilon: float = 0.15
    seed: int = 0
    optimize: OptimizeConfig = field(default_factory=OptimizeConfig)
    disable_tensor_mutation: bool = False
    disable_model_mutation: bool = False
    tournament_k: int = 3
    pool_capacity: int = 100
    stability_reruns: int = 3
    timeout_s: float = 10.0
    stats_interval: int = 100
    # Campaign-level tensor growth bound: the mutated tensor resets to a fresh
    # seed tensor once it exceeds this many elements (keeps rounds desk-fast;
    # the hard per-tensor bound stays 2^24).
    max_tensor_elements: int = 1 << 14
    out_dir: str | None = None
    backend_command: str | None = None

    def __post_init__(self) -> None:
        if (self.rounds is None) == (self.duration_s is None):
            raise ConfigError("exactly one of rounds/duration must be set")
        if self.rounds is not None and self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.pool_capacity < 1 or self.tournament_k < 1 or self.chain_length < 1:
            raise ConfigError("chain_length, tournament_k, pool_capacity must be >= 1")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.max_tensor_elements < self.input_shape.element_count:
            raise ConfigError("max_tensor_elements must cover the input shape")

    def diff_config(self) -> DiffConfig:
        return DiffConfig(self.epsilon, self.stability_reruns, self.timeout_s)

    @staticmethod
    def from_json_dict(obj: dict) -> "CampaignConfig":
        from .optimizer import CacheConfig, CacheKeyMode, PassName

        kwargs: dict = {}
        for key in (
            "rounds", "duration_s", "chain_length", "epsilon", "seed",
            "disable_tensor_mutation", "disable_model_mutation", "tournament_k",
            "pool_capacity", "stability_reruns", "timeout_s", "stats_interval",
            "max_tensor_elements", "out_dir", "backend_command",
        ):
            if key in obj:
                kwargs[key] = obj[key]
        if "input_shape" in obj:
            kwargs["input_shape"] = Shape.of(tuple(obj["input_shape"]))
        opt = obj.get("optimize", {})
        opt_kwargs: dict = {}
        if "passes" in opt:
            opt_kwargs["passes"] = frozenset(PassName(p) for p in opt["passes"])
        if "exec_dtype" in opt:
            opt_kwargs["exec_dtype"] = DType(opt["exec_dtype"])
        if "faults" in opt:
            opt_kwargs["faults"] = frozenset(Fault(f) for f in opt["faults"])
        cache = opt.get("cache", {})
        if cache:
            opt_kwargs["cache"] = CacheConfig(
                capacity_bytes=int(cache.get("capacity_bytes", 64 << 20)),
                key_mode=CacheKeyMode(cache.get("key_mode", "by_id")),
            )
        if opt_kwargs:
            kwargs["optimize"] = OptimizeConfig(**opt_kwargs)
        try:
            return CampaignConfig(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "duration_s": self.duration_s,
            "chain_length": self.chain_length,
            "input_shape": list(self.input_shape.dims),
            "epsilon": self.epsilon,
            "seed": self.seed,
            "optimize": {
                "passes": sorted(p.value for p in self.optimize.passes),
                "exec_dtype": self.optimize.exec_dtype.value,
                "faults": sorted(f.value for f in self.optimize.faults),
                "cache": {
                    "capacity_bytes": self.optimize.cache.capacity_bytes,
                    "key_mode": self.optimize.cache.key_mode.value,
                },
            },
            "disable_tensor_mutation": self.disable_tensor_mutation,
            "disable_model_mutation": self.disable_model_mutation,
            "tournament_k": self.tournament_k,
            "pool_capacity": self.pool_capacity,
            "stability_reruns": self.stability_reruns,
            "timeout_s": self.timeout_s,
            "stats_interval": self.stats_interval,
            "max_tensor_elements": self.max_tensor_elements,
            "backend_command": self.backend_command,
        }


@dataclass
class CampaignReport:
    config: dict
    rounds_completed: int
    unique_bugs: dict[str, int]
    bug_entries: list[str]
    total_findings: int
    discarded_rounds: int
    inapplicable_rounds: int
    max_deviation: float | None
    mean_edit_distance: float | None
    pass_fire_totals: dict[str, int]
    tensor_rule_counts: dict[str, int]
    model_rule_counts: dict[str, int]
    rule_contributions: dict[str, float]
    rule_probabilities: dict[str, float]

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "rounds_completed": self.rounds_completed,
            "unique_bugs": dict(sorted(self.unique_bugs.items())),
            "bug_entries": sorted(self.bug_entries),
            "total_findings": self.total_findings,
            "discarded_rounds": self.discarded_rounds,
            "inapplicable_rounds": self.inapplicable_rounds,
            "max_deviation": self.max_deviation,
            "mean_edit_distance": self.mean_edit_distance,
            "pass_fire_totals": dict(sorted(self.pass_fire_totals.items())),
            "tensor_rule_counts": dict(sorted(self.tensor_rule_counts.items())),
            "model_rule_counts": dict(sorted(self.model_rule_counts.items())),
            "rule_contributions": dict(sorted(self.rule_contributions.items())),
            "rule_probabilities": dict(sorted(self.rule_probabilities.items())),
        }

    def to_canonical_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))


def _label_bug_by_fault(
    g: GraphModel,
    x: Tensor,
    cfg: CampaignConfig,
    outcomes: dict[str, object],
    backend_ids: Sequence[BackendId],
) -> str | None:
    """Attribute a finding to an injected fault by re-running without it.

    Only fault-injection provenance assigns root labels: if stripping a fault
    flag makes the finding disappear against the same trusted outcomes, that
    fault caused it.
    """
    faults = cfg.optimize.faults
    if not faults or cfg.backend_command is not None:
        return None
    sut_id = next(i for i in backend_ids if i.role is BackendRole.UNDER_TEST)
    trusted_outcomes = {
        i: outcomes[i.name] for i in backend_ids if i.role is BackendRole.TRUSTED
    }
    model_hash = structure_hash(g)
    for fault in sorted(faults, key=lambda f: f.value):
        stripped = replace(cfg.optimize, faults=faults - {fault})
        clean = OptimizingBackend(stripped, name=sut_id.name)
        retry = dict(trusted_outcomes)
        retry[sut_id] = clean.run(g, x, cfg.timeout_s)
        verdict = classify_outcomes(retry, model_hash, x, cfg.diff_config())
        if verdict.result is not None and verdict.result.status is RoundStatus.NO_BUG:
            return _FAULT_LABELS[fault]
    return None


@dataclass
class _RoundLog:
    model: GraphModel
    sequence: tuple
    result: RoundResult
    rule_key: str | None


def run_fuzz_loop(
    cfg: CampaignConfig,
    backends: Sequence[tuple[BackendId, Backend]] | None = None,
) -> CampaignReport:
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir is not None:
        (out_dir / "models").mkdir(parents=True, exist_ok=True)
        (out_dir / "stats").mkdir(parents=True, exist_ok=True)
    if backends is None:
        backends = builtin_roster(cfg.optimize, cfg.backend_command, out_dir)
    backend_ids = [i for i, _ in backends]
    diff_cfg = cfg.diff_config()

    # Independent streams so disabling one mutation side leaves the other's
    # random decisions unchanged.
    tensor_rng, model_rng = (
        np.random.Generator(np.random.PCG64(s))
        for s in np.random.SeedSequence(cfg.seed).spawn(2)
    )

    seed_cfg = SeedConfig(cfg.chain_length, cfg.input_shape)
    initial_model = generate_seed_model(seed_cfg)
    pool = SeedPool(cfg.pool_capacity)
    pool.insert(initial_model, FitnessRecord(structure_hash(initial_model), 0.0))

    stats = RuleStats.uniform(expanded_rule_universe())
    tensor = random_seed_tensor(cfg.input_shape, DType.F32, tensor_rng)
    tensor_rules = sorted(TensorMutationRule, key=lambda r: r.value)

    logs: list[_RoundLog] = []
    findings: list[BugReport] = []
    seen_bug_keys: dict[tuple, BugReport] = {}
    bug_entries: list[str] = []
    pass_totals: dict[str, int] = {}
    tensor_rule_counts: dict[str, int] = {}
    model_rule_counts: dict[str, int] = {}
    max_deviation: float | None = None
    discarded = 0
    inapplicable = 0

    started = time.monotonic()
    round_idx = 0
    while True:
        if cfg.rounds is not None and round_idx >= cfg.rounds:
            break
        if cfg.duration_s is not None and time.monotonic() - started >= cfg.duration_s:
            break

        # (1) tensor step: mutate the running tensor, or draw fresh under ablation
        if cfg.disable_tensor_mutation:
            tensor = random_seed_tensor(cfg.input_shape, DType.F32, tensor_rng)
        else:
            t_rule = tensor_rules[int(tensor_rng.integers(0, len(tensor_rules)))]
            tensor_rule_counts[t_rule.value] = tensor_rule_counts.get(t_rule.value, 0) + 1
            try:
                tensor = mutate_tensor(tensor, t_rule, tensor_rng)
            except ShapeTooLarge:
                tensor = random_seed_tensor(cfg.input_shape, DType.F32, tensor_rng)
            if tensor.element_count > cfg.max_tensor_elements:
                tensor = random_seed_tensor(cfg.input_shape, DType.F32, tensor_rng)

        # (2)+(3) seed selection and model mutation; inapplicable attempts
        # resample the seed, the rule, and the site (first round and the
        # model-mutation ablation pin the initial seed)
        model, seed_fitness = initial_model, 0.0
        rule_key: str | None = None
        if not cfg.disable_model_mutation:
            seed_model = initial_model
            for _ in range(_MUTATION_ATTEMPTS_PER_ROUND):
                if round_idx == 0:
                    seed_model, seed_fitness = initial_model, 0.0
                else:
                    entry = pool.tournament_select(cfg.tournament_k, model_rng)
                    seed_model, seed_fitness = entry.model, entry.record.fitness
                refitted = refit_params(seed_model, tensor.shape, model_rng)
                if isinstance(refitted, Inapplicable):
                    continue
                seed_model = refitted
                candidate_key = sample_rule(stats, model_rng)
                rule, replacement = decode_rule_key(candidate_key)
                mutated = apply_model_mutation(
                    seed_model, rule, tensor.shape, model_rng, replacement
                )
                if not isinstance(mutated, Inapplicable):
                    model, rule_key = mutated, candidate_key
                    break
            if rule_key is None:
                model = seed_model
                inapplicable += 1
            else:
                model_rule_counts[rule_key] = model_rule_counts.get(rule_key, 0) + 1

        # (4) differential run; pairs whose shapes cannot agree are discarded
        try:
            infer_shapes(model, tensor.shape)
        except ShapeError as exc:
            result = RoundResult(
                RoundStatus.DISCARDED, {}, discard_reason=f"shape-incompatible: {exc}"
            )
        else:
            result = run_differential(model, tensor, backends, diff_cfg)

        # (5) feedback and bookkeeping
        fitness = compute_fitness(result, tensor)
        if result.status is not RoundStatus.DISCARDED:
            pool.insert(model, FitnessRecord(structure_hash(model), fitness))
            if rule_key is not None:
                stats = update_contribution(stats, rule_key, fitness, seed_fitness)
        else:
            discarded += 1

        for outcome in result.outcomes.values():
            if outcome.pass_fires:
                for name, count in outcome.pass_fires.items():
                    pass_totals[name] = pass_totals.get(name, 0) + count
        if result.max_deviation is not None:
            if max_deviation is None or result.max_deviation > max_deviation:
                max_deviation = result.max_deviation

        if result.bug is not None:
            if cfg.optimize.faults:
                result.bug.root_label = _label_bug_by_fault(
                    model, tensor, cfg, result.outcomes, backend_ids
                )
            findings.append(result.bug)
            key = result.bug.dedup_key()
            if key not in seen_bug_keys:
                seen_bug_keys[key] = result.bug
                entry_name = f"{result.bug.kind.value}/{result.bug.entry_key()}"
                bug_entries.append(entry_name)
                if out_dir is not None:
                    write_bug_entry(out_dir, result.bug, model, tensor)
            else:
                seen_bug_keys[key].duplicates += 1

        logs.append(_RoundLog(model, operator_sequence(model), result, rule_key))
        if out_dir is not None:
            (out_dir / "models" / f"{round_idx:06d}.json").write_text(
                graph_to_json(model), encoding="utf-8"
            )
            if cfg.stats_interval and (round_idx + 1) % cfg.stats_interval == 0:
                _write_stats_snapshot(out_dir, round_idx + 1, stats, pool)
        round_idx += 1

    unique = dedup_bugs(findings)
    by_kind: dict[str, int] = {}
    for bug in unique:
        by_kind[bug.kind.value] = by_kind.get(bug.kind.value, 0) + 1

    med = None
    if len(logs) >= 2:
        med = mean_sequence_edit_distance([log.sequence for log in logs])

    report = CampaignReport(
        config=cfg.to_json_dict(),
        rounds_completed=round_idx,
        unique_bugs=by_kind,
        bug_entries=bug_entries,
        total_findings=len(findings),
        discarded_rounds=discarded,
        inapplicable_rounds=inapplicable,
        max_deviation=max_deviation,
        mean_edit_distance=med,
        pass_fire_totals=pass_totals,
        tensor_rule_counts=tensor_rule_counts,
        model_rule_counts=model_rule_counts,
        rule_contributions=dict(stats.contributions),
        rule_probabilities=rule_probabilities(stats),
    )

    elapsed = time.monotonic() - started
    if out_dir is not None:
        (out_dir / "report.json").write_text(report.to_canonical_json(), encoding="utf-8")
        (out_dir / "timing.json").write_text(
            json.dumps(
                {
                    "elapsed_s": elapsed,
                    "rounds_per_s": (round_idx / elapsed if elapsed > 0 else None),
                },
                sort_keys=True,
            ),
            encoding="utf-8",
        )
    for _, backend in backends:
        close = getattr(backend, "close", None)
        if callable(close):
            close()
    return report


def _write_stats_snapshot(out_dir: Path, rounds: int, stats: RuleStats, pool: SeedPool) -> None:
    histogram: dict[str, int] = {}
    for entry in pool.entries:
        bucket = f"{entry.record.fitness:.3f}"
        histogram[bucket] = histogram.get(bucket, 0) + 1
    snapshot = {
        "rounds": rounds,
        "contributions": dict(sorted(stats.contributions.items())),
        "probabilities": dict(sorted(rule_probabilities(stats).items())),
        "pool_fitness_histogram": dict(sorted(histogram.items())),
    }
    (out_dir / "stats" / f"round_{rounds:06d}.json").write_text(
        json.dumps(snapshot, sort_keys=True, separators=(",", ":")), encoding="utf-8"
    )


def replay(
    model_path: str,
    tensor_path: str,
    cfg: CampaignConfig,
    backends: Sequence[tuple[BackendId, Backend]] | None = None,
) -> RoundResult:
    """Re-run the differential oracle once on a stored model/tensor pair."""
    g = read_graph(model_path)
    x = read_tensor(tensor_path)
    if backends is None:
        backends = builtin_roster(cfg.optimize, cfg.backend_command, cfg.out_dir)
    try:
        return run_differential(g, x, backends, cfg.diff_config())
    finally:
        for _, backend in backends:
            close = getattr(backend, "close", None)
            if callable(close):
                close()


def diversity_report(models_dir: str) -> tuple[float, dict[int, int]]:
    """Mean pairwise edit distance and distance histogram over stored models."""
    paths = sorted(Path(models_dir).glob("*.json"))
    models = [read_graph(str(p)) for p in paths]
    if len(models) < 2:
        raise NeedTwoModels(f"{models_dir} holds {len(models)} model(s); need 2")
    sequences = [operator_sequence(g) for g in models]
    med = mean_sequence_edit_distance(sequences)
    return med, pairwise_distance_histogram(models)
