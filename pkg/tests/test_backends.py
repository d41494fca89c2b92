"""Built-in backends and the external wire-protocol client."""

import sys
from pathlib import Path

from conftest import chain
from optifuzz.backends import (
    ExternalBackend,
    OptimizingBackend,
    ReferenceBackend,
    builtin_roster,
)
from optifuzz.difftest import BackendRole, OutcomeStatus, run_differential, DiffConfig
from optifuzz.graphs import OperatorAttrs, OperatorKind, Padding
from optifuzz.optimizer import OptimizeConfig
from optifuzz.tensors import DType, Shape, random_seed_tensor

STUB = Path(__file__).with_name("stub_backend.py")


def stub_command(mode="ok"):
    return f"{sys.executable} {STUB} {mode}"


def test_reference_backend_runs(rng):
    g = chain(OperatorKind.IDENTITY, OperatorKind.SIGMOID)
    x = random_seed_tensor(Shape(1, 1, 3, 3), DType.F32, rng)
    outcome = ReferenceBackend(DType.F64).run(g, x, 5.0)
    assert outcome.status is OutcomeStatus.OK
    assert outcome.output.shape == x.shape


def test_reference_backend_captures_exec_errors(rng):
    g = chain(
        OperatorKind.MAX_POOL,
        attrs={0: OperatorAttrs(kernel=(9, 9), stride=(1, 1), padding=Padding.VALID)},
    )
    x = random_seed_tensor(Shape(1, 1, 3, 3), DType.F32, rng)
    outcome = ReferenceBackend(DType.F64).run(g, x, 5.0)
    assert outcome.status is OutcomeStatus.CRASH
    assert outcome.crash.error_kind == "shape_mismatch"
    assert outcome.crash.op_kind == "max_pool"
    assert "#" in outcome.crash.message_template  # digits normalized


def test_optimizing_backend_reports_pass_fires(rng):
    g = chain(OperatorKind.REDUCE_MEAN_HW)
    x = random_seed_tensor(Shape(1, 1, 4, 4), DType.F32, rng)
    outcome = OptimizingBackend(OptimizeConfig()).run(g, x, 5.0)
    assert outcome.status is OutcomeStatus.OK
    assert outcome.pass_fires["node_opt"] == 1


def test_builtin_roster_roles():
    roster = builtin_roster(OptimizeConfig())
    roles = [bid.role for bid, _ in roster]
    assert roles.count(BackendRole.TRUSTED) == 2
    assert roles.count(BackendRole.UNDER_TEST) == 1


def test_external_backend_ok_roundtrip(tmp_path, rng):
    g = chain(OperatorKind.IDENTITY, OperatorKind.IDENTITY)
    x = random_seed_tensor(Shape(1, 1, 3, 3), DType.F32, rng)
    backend = ExternalBackend(stub_command(), tmp_path)
    try:
        outcome = backend.run(g, x, 10.0)
        assert outcome.status is OutcomeStatus.OK
        assert outcome.output.bit_equal(x)
        # a second request reuses the live process
        again = backend.run(g, x, 10.0)
        assert again.status is OutcomeStatus.OK
    finally:
        backend.close()


def test_external_backend_crash_framing(tmp_path, rng):
    g = chain(OperatorKind.IDENTITY)
    x = random_seed_tensor(Shape(1, 1, 2, 2), DType.F32, rng)
    backend = ExternalBackend(stub_command("crash"), tmp_path)
    try:
        outcome = backend.run(g, x, 10.0)
        assert outcome.status is OutcomeStatus.CRASH
        assert outcome.crash.error_kind == "unsupported-op"
        assert outcome.crash.message_template == "op id #"
    finally:
        backend.close()


def test_external_backend_hang_becomes_timeout(tmp_path, rng):
    g = chain(OperatorKind.IDENTITY)
    x = random_seed_tensor(Shape(1, 1, 2, 2), DType.F32, rng)
    backend = ExternalBackend(stub_command("hang"), tmp_path)
    backend.GRACE_S = 0.5
    try:
        outcome = backend.run(g, x, 0.2)
        assert outcome.status is OutcomeStatus.TIMEOUT
        # the process is restarted afterwards and keeps serving
        recovered = ExternalBackend(stub_command(), tmp_path)
        try:
            assert recovered.run(g, x, 10.0).status is OutcomeStatus.OK
        finally:
            recovered.close()
    finally:
        backend.close()


def test_external_backend_garbage_is_protocol_error(tmp_path, rng):
    g = chain(OperatorKind.IDENTITY)
    x = random_seed_tensor(Shape(1, 1, 2, 2), DType.F32, rng)
    backend = ExternalBackend(stub_command("garbage"), tmp_path)
    try:
        outcome = backend.run(g, x, 10.0)
        assert outcome.status is OutcomeStatus.CRASH
        assert outcome.crash.error_kind == "protocol-error"
    finally:
        backend.close()


def test_differential_round_with_external_sut(tmp_path, rng):
    g = chain(OperatorKind.SIGMOID, OperatorKind.RELU)
    x = random_seed_tensor(Shape(1, 1, 3, 3), DType.F32, rng)
    roster = builtin_roster(OptimizeConfig(), stub_command(), tmp_path)
    try:
        result = run_differential(g, x, roster, DiffConfig(timeout_s=10.0))
        assert result.status.value == "no_bug"
    finally:
        for _, backend in roster:
            if hasattr(backend, "close"):
                backend.close()
