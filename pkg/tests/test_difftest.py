"""Classification, the re-run/discard rule, deduplication, and the bug corpus."""

import numpy as np
import pytest

from conftest import chain
from optifuzz.difftest import (
    BackendId,
    BackendOutcome,
    BackendRole,
    BugKind,
    BugReport,
    ConfigError,
    CrashSignature,
    DiffConfig,
    OutcomeStatus,
    RoundStatus,
    ShapeMismatch,
    classify_outcomes,
    compute_inconsistency,
    dedup_bugs,
    read_bug_entry,
    run_differential,
    write_bug_entry,
)
from optifuzz.graphs import OperatorKind, structure_hash
from optifuzz.tensors import DType, Shape, Tensor, random_seed_tensor

T1 = BackendId("trusted-a", BackendRole.TRUSTED)
T2 = BackendId("trusted-b", BackendRole.TRUSTED)
SUT = BackendId("under-test", BackendRole.UNDER_TEST)
CFG = DiffConfig(epsilon=0.15, stability_reruns=3, timeout_s=1.0)


def tensor(values):
    arr = np.asarray(values, dtype=np.float64).reshape(1, 1, 1, -1)
    return Tensor.quantize(arr, DType.F64)


def ok(values):
    return BackendOutcome(OutcomeStatus.OK, output=tensor(values))


class CannedBackend:
    """Returns scripted outcomes; repeats the last one when re-run."""

    def __init__(self, *outcomes):
        self.outcomes = list(outcomes)
        self.calls = 0

    def run(self, g, x, timeout_s):
        self.calls += 1
        if len(self.outcomes) > 1:
            return self.outcomes.pop(0)
        return self.outcomes[0]


@pytest.fixture
def model():
    return chain(OperatorKind.IDENTITY, OperatorKind.RELU)


@pytest.fixture
def x(rng):
    return random_seed_tensor(Shape(1, 1, 1, 4), DType.F64, rng)


# --- compute_inconsistency ------------------------------------------------------


def test_inconsistency_examples():
    assert compute_inconsistency(tensor([1.0, 1.2]), tensor([1.0, 1.0])) == pytest.approx(0.2)
    assert compute_inconsistency(tensor([1.0, 1.2]), tensor([1.0, 1.2])) == 0.0


def test_inconsistency_shape_mismatch():
    a = Tensor.quantize(np.zeros((1, 1, 2, 2)), DType.F64)
    b = Tensor.quantize(np.zeros((1, 1, 2, 3)), DType.F64)
    with pytest.raises(ShapeMismatch):
        compute_inconsistency(a, b)


def test_inconsistency_symmetry(rng):
    a = random_seed_tensor(Shape(1, 2, 3, 3), DType.F32, rng)
    b = random_seed_tensor(Shape(1, 2, 3, 3), DType.F32, rng)
    assert compute_inconsistency(a, b) == compute_inconsistency(b, a)
    assert compute_inconsistency(a, b) >= 0.0


# --- classification -------------------------------------------------------------


def run(model, x, trusted_a, trusted_b, sut, cfg=CFG):
    backends = [(T1, trusted_a), (T2, trusted_b), (SUT, sut)]
    return run_differential(model, x, backends, cfg)


def test_inconsistency_bug_when_both_exceed(model, x):
    base = [1.0, 1.0, 1.0, 1.0]
    result = run(
        model, x,
        CannedBackend(ok(base)), CannedBackend(ok(base)),
        CannedBackend(ok([1.2, 1.0, 1.0, 1.0])),
    )
    assert result.status is RoundStatus.INCONSISTENCY
    assert result.bug.kind is BugKind.INCONSISTENCY
    values = result.bug.inconsistency_values
    assert set(values) == {"trusted-a|under-test", "trusted-b|under-test"}
    assert all(v == pytest.approx(0.2) for v in values.values())


def test_no_bug_unless_every_trusted_exceeds(model, x):
    result = run(
        model, x,
        CannedBackend(ok([1.0, 1.0, 1.0, 1.0])),
        CannedBackend(ok([1.1, 1.0, 1.0, 1.0])),  # only 0.1 from the SUT
        CannedBackend(ok([1.2, 1.0, 1.0, 1.0])),
    )
    assert result.status is RoundStatus.NO_BUG
    assert result.bug is None


def test_sut_crash_is_a_crash_bug(model, x):
    sig = CrashSignature.make("shape_mismatch", "conv2d", "dim 13 vs 14")
    result = run(
        model, x,
        CannedBackend(ok([0.0] * 4)), CannedBackend(ok([0.0] * 4)),
        CannedBackend(BackendOutcome(OutcomeStatus.CRASH, crash=sig)),
    )
    assert result.status is RoundStatus.CRASH
    assert result.bug.crash_signature.message_template == "dim # vs #"


def test_sut_timeout_is_crash_class(model, x):
    result = run(
        model, x,
        CannedBackend(ok([0.0] * 4)), CannedBackend(ok([0.0] * 4)),
        CannedBackend(BackendOutcome(OutcomeStatus.TIMEOUT)),
    )
    assert result.status is RoundStatus.CRASH
    assert result.bug.crash_signature.error_kind == "timeout"


def test_nan_bug_requires_clean_trusted(model, x):
    clean = ok([0.5] * 4)
    poisoned = ok([0.5, np.nan, 0.5, 0.5])
    result = run(model, x, CannedBackend(clean), CannedBackend(clean), CannedBackend(poisoned))
    assert result.status is RoundStatus.NAN


def test_nan_everywhere_is_not_a_bug(model, x):
    poisoned = ok([0.5, np.nan, 0.5, 0.5])
    result = run(
        model, x, CannedBackend(poisoned), CannedBackend(poisoned), CannedBackend(poisoned)
    )
    assert result.status is RoundStatus.NO_BUG


def test_output_shape_mismatch_escalates_to_crash(model, x):
    wide = BackendOutcome(
        OutcomeStatus.OK, output=Tensor.quantize(np.zeros((1, 1, 1, 5)), DType.F64)
    )
    result = run(
        model, x, CannedBackend(ok([0.0] * 4)), CannedBackend(ok([0.0] * 4)), CannedBackend(wide)
    )
    assert result.status is RoundStatus.CRASH
    assert result.bug.crash_signature.error_kind == "output-shape-mismatch"


def test_persistent_trusted_disagreement_discards(model, x):
    a = CannedBackend(ok([0.0] * 4))
    b = CannedBackend(ok([0.5] * 4))  # 0.5 > epsilon forever
    sut = CannedBackend(ok([0.0] * 4))
    result = run(model, x, a, b, sut)
    assert result.status is RoundStatus.DISCARDED
    assert result.bug is None
    assert result.reruns == CFG.stability_reruns
    # the disagreeing pair was re-run, the SUT was not
    assert a.calls == 1 + CFG.stability_reruns
    assert b.calls == 1 + CFG.stability_reruns
    assert sut.calls == 1


def test_rerun_reaches_agreement(model, x):
    flaky = CannedBackend(ok([0.5] * 4), ok([0.0] * 4))  # settles on the second run
    steady = CannedBackend(ok([0.0] * 4))
    sut = CannedBackend(ok([0.0] * 4))
    result = run(model, x, flaky, steady, sut)
    assert result.status is RoundStatus.NO_BUG
    assert result.reruns == 1


def test_trusted_crash_discards(model, x):
    crash = BackendOutcome(
        OutcomeStatus.CRASH, crash=CrashSignature.make("internal", "", "boom")
    )
    result = run(
        model, x, CannedBackend(crash), CannedBackend(ok([0.0] * 4)), CannedBackend(ok([0.0] * 4))
    )
    assert result.status is RoundStatus.DISCARDED
    assert "trusted-a" in result.discard_reason


def test_config_errors(model, x):
    with pytest.raises(ConfigError, match="trusted"):
        run_differential(model, x, [(T1, CannedBackend(ok([0.0]))), (SUT, CannedBackend(ok([0.0])))], CFG)
    with pytest.raises(ConfigError, match="under test"):
        run_differential(
            model, x,
            [(T1, CannedBackend(ok([0.0]))), (T2, CannedBackend(ok([0.0])))],
            CFG,
        )
    with pytest.raises(ConfigError, match="epsilon"):
        DiffConfig(epsilon=0.0)


def test_classification_is_pure_given_outcomes(model, x):
    outcomes = {
        T1: ok([1.0, 1.0, 1.0, 1.0]),
        T2: ok([1.0, 1.0, 1.0, 1.0]),
        SUT: ok([1.3, 1.0, 1.0, 1.0]),
    }
    h = structure_hash(model)
    first = classify_outcomes(outcomes, h, x, CFG)
    second = classify_outcomes(outcomes, h, x, CFG)
    assert first.result.status == second.result.status
    assert first.result.bug.to_json_dict() == second.result.bug.to_json_dict()


def test_max_deviation_recorded_on_clean_rounds(model, x):
    result = run(
        model, x,
        CannedBackend(ok([1.0] * 4)), CannedBackend(ok([1.0] * 4)),
        CannedBackend(ok([1.05, 1.0, 1.0, 1.0])),
    )
    assert result.status is RoundStatus.NO_BUG
    assert result.max_deviation == pytest.approx(0.05)


# --- dedup ------------------------------------------------------------------------


def bug(kind, model_hash="m0", signature=None):
    return BugReport(
        kind=kind,
        model_hash=model_hash,
        tensor_shape=(1, 1, 1, 4),
        tensor_dtype="f32",
        tensor_mean=0.0,
        crash_signature=signature,
    )


def test_dedup_by_model_hash():
    unique = dedup_bugs([bug(BugKind.INCONSISTENCY), bug(BugKind.INCONSISTENCY)])
    assert len(unique) == 1
    assert unique[0].duplicates == 1


def test_kind_partitions_buckets():
    unique = dedup_bugs([
        bug(BugKind.INCONSISTENCY),
        bug(BugKind.CRASH, signature=CrashSignature.make("k", "", "m")),
    ])
    assert len(unique) == 2


def test_crash_dedup_normalizes_digits():
    a = bug(BugKind.CRASH, "m1", CrashSignature.make("shape_mismatch", "conv2d", "dim 13 vs 14"))
    b = bug(BugKind.CRASH, "m2", CrashSignature.make("shape_mismatch", "conv2d", "dim 27 vs 3"))
    unique = dedup_bugs([a, b])
    assert len(unique) == 1
    assert unique[0].duplicates == 1


def test_dedup_keeps_first_and_inputs_unmodified():
    first = bug(BugKind.INCONSISTENCY, "aa")
    second = bug(BugKind.INCONSISTENCY, "aa")
    unique = dedup_bugs([first, second])
    assert first.duplicates == 0  # inputs are not mutated
    assert unique[0].model_hash == "aa"


# --- corpus layout -----------------------------------------------------------------


def test_bug_entry_roundtrip(tmp_path, model, x):
    report = bug(BugKind.INCONSISTENCY, structure_hash(model))
    report.inconsistency_values = {"trusted-a|under-test": 0.25}
    entry = write_bug_entry(tmp_path, report, model, x)
    assert entry == tmp_path / "bugs" / "inconsistency" / report.entry_key()
    assert sorted(p.name for p in entry.iterdir()) == [
        "input.dljt", "model.json", "report.json",
    ]
    loaded_report, loaded_model, loaded_x = read_bug_entry(entry)
    assert loaded_report.to_json_dict() == report.to_json_dict()
    assert structure_hash(loaded_model) == structure_hash(model)
    assert loaded_x.bit_equal(x)
