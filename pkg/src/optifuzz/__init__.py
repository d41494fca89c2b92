"""Mutation-based differential fuzzer for tensor-computation-graph optimizers."""

from .tensors import (
    DType,
    Shape,
    Tensor,
    TensorMutationRule,
    ShapeTooLarge,
    mutate_tensor,
    random_seed_tensor,
    read_tensor,
    write_tensor,
)
from .graphs import (
    Edge,
    GraphModel,
    OperatorAttrs,
    OperatorKind,
    Padding,
    ShapeError,
    edit_distance,
    graph_from_json,
    graph_to_json,
    infer_shapes,
    mean_edit_distance,
    structure_hash,
    validate_graph,
)
from .mutations import (
    Inapplicable,
    ModelMutationRule,
    SeedConfig,
    apply_model_mutation,
    expanded_rule_universe,
    generate_seed_model,
)
from .reference import ExecError, ExecErrorKind, eval_operator, execute_reference
from .optimizer import (
    CacheConfig,
    CacheKeyMode,
    Fault,
    OptimizeConfig,
    PassName,
    PassReport,
    execute_optimized,
    optimize_graph,
)
from .difftest import (
    BackendId,
    BackendOutcome,
    BackendRole,
    BugKind,
    BugReport,
    ConfigError,
    CrashSignature,
    DiffConfig,
    RoundResult,
    RoundStatus,
    compute_inconsistency,
    dedup_bugs,
    run_differential,
)
from .heuristics import (
    FitnessRecord,
    RuleStats,
    SeedPool,
    compute_fitness,
    rule_probabilities,
    update_contribution,
)
from .backends import ExternalBackend, OptimizingBackend, ReferenceBackend, builtin_roster
from .campaign import CampaignConfig, CampaignReport, diversity_report, replay, run_fuzz_loop

__version__ = "0.1.0"
