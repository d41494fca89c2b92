"""Differential oracle: classify one round of backend outcomes into bug findings.

Classification order for a round (one system under test, two or more trusted
backends):

  1. the SUT crashed or timed out while every trusted backend succeeded
     -> crash finding
  2. the SUT output contains NaN and no trusted output does -> NaN finding
  3. the max elementwise deviation between the SUT and EVERY trusted backend
     exceeds epsilon -> inconsistency finding (an output shape mismatch is
     escalated to a crash-class finding)
  4. trusted backends disagree among themselves beyond epsilon -> re-run the
     disagreeing ones up to the configured limit, then discard the model
  5. otherwise: no bug

Findings deduplicate by normalized crash signature (crashes) or by model
structure hash (NaN / inconsistency).
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .graphs import GraphModel, graph_to_json, read_graph, structure_hash
from .tensors import Tensor, read_tensor, write_tensor


class ConfigError(Exception):
    pass


class ShapeMismatch(Exception):
    pass


class BackendRole(Enum):
    TRUSTED = "trusted"
    UNDER_TEST = "under_test"


@dataclass(frozen=True)
class BackendId:
    name: str
    role: BackendRole


class OutcomeStatus(Enum):
    OK = "ok"
    CRASH = "crash"
    TIMEOUT = "timeout"


_DIGITS = re.compile(r"\d+")


@dataclass(frozen=True)
class CrashSignature:
    """Dedup identity of a crash: kind and op plus a digit-normalized message."""

    error_kind: str
    op_kind: str
    message_template: str

    @staticmethod
    def make(error_kind: str, op_kind: str, message: str) -> "CrashSignature":
        return CrashSignature(error_kind, op_kind, _DIGITS.sub("#", message))

    def token(self) -> str:
        return f"{self.error_kind}|{self.op_kind}|{self.message_template}"


@dataclass
class BackendOutcome:
    status: OutcomeStatus
    output: Tensor | None = None
    crash: CrashSignature | None = None
    duration_s: float = 0.0
    pass_fires: dict | None = None

    def __post_init__(self) -> None:
        if self.status is OutcomeStatus.OK and self.output is None:
            raise ValueError("ok outcome needs an output tensor")
        if self.status is OutcomeStatus.CRASH and self.crash is None:
            raise ValueError("crash outcome needs a signature")


class Backend(Protocol):
    def run(self, g: GraphModel, x: Tensor, timeout_s: float) -> BackendOutcome: ...


class BugKind(Enum):
    CRASH = "crash"
    NAN = "nan"
    INCONSISTENCY = "inconsistency"


class RootLabel(Enum):
    CACHE_REUSE = "CacheReuse"
    IMPLEMENTATION_BUG = "ImplementationBug"
    INFERENCE_ACCELERATION = "InferenceAcceleration"
    PRECISION = "Precision"
    ENVIRONMENT = "Environment"
    RANDOM = "Random"
    OTHER = "Other"


@dataclass
class BugReport:
    kind: BugKind
    model_hash: str
    tensor_shape: tuple[int, int, int, int]
    tensor_dtype: str
    tensor_mean: float
    inconsistency_values: dict[str, float] = field(default_factory=dict)
    crash_signature: CrashSignature | None = None
    root_label: str | None = None
    duplicates: int = 0

    def dedup_key(self) -> tuple:
        if self.kind is BugKind.CRASH:
            sig = self.crash_signature or CrashSignature("", "", "")
            return (self.kind.value, sig.token())
        return (self.kind.value, self.model_hash)

    def entry_key(self) -> str:
        """Directory name for the bug corpus."""
        if self.kind is BugKind.CRASH:
            sig = self.crash_signature or CrashSignature("", "", "")
            return hashlib.sha256(sig.token().encode("utf-8")).hexdigest()[:16]
        return self.model_hash[:16]

    def to_json_dict(self) -> dict:
        out: dict = {
            "kind": self.kind.value,
            "model_hash": self.model_hash,
            "tensor_meta": {
                "shape": list(self.tensor_shape),
                "dtype": self.tensor_dtype,
                "mean": self.tensor_mean,
            },
            "inconsistency_values": dict(sorted(self.inconsistency_values.items())),
            "duplicates": self.duplicates,
        }
        if self.crash_signature is not None:
            out["crash_signature"] = {
                "error_kind": self.crash_signature.error_kind,
                "op_kind": self.crash_signature.op_kind,
                "message_template": self.crash_signature.message_template,
            }
        if self.root_label is not None:
            out["root_label"] = self.root_label
        return out

    @staticmethod
    def from_json_dict(obj: dict) -> "BugReport":
        sig = obj.get("crash_signature")
        meta = obj["tensor_meta"]
        return BugReport(
            kind=BugKind(obj["kind"]),
            model_hash=obj["model_hash"],
            tensor_shape=tuple(meta["shape"]),
            tensor_dtype=meta["dtype"],
            tensor_mean=float(meta["mean"]),
            inconsistency_values=dict(obj.get("inconsistency_values", {})),
            crash_signature=(
                CrashSignature(sig["error_kind"], sig["op_kind"], sig["message_template"])
                if sig
                else None
            ),
            root_label=obj.get("root_label"),
            duplicates=int(obj.get("duplicates", 0)),
        )


@dataclass(frozen=True)
class DiffConfig:
    epsilon: float = 0.15
    stability_reruns: int = 3
    timeout_s: float = 10.0

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.stability_reruns < 0:
            raise ConfigError("stability_reruns must be >= 0")


class RoundStatus(Enum):
    NO_BUG = "no_bug"
    CRASH = "crash"
    NAN = "nan"
    INCONSISTENCY = "inconsistency"
    DISCARDED = "discarded"


@dataclass
class RoundResult:
    status: RoundStatus
    outcomes: dict[str, BackendOutcome]
    bug: BugReport | None = None
    max_deviation: float | None = None
    reruns: int = 0
    discard_reason: str | None = None


def compute_inconsistency(a: Tensor, b: Tensor) -> float:
    """Max elementwise absolute difference at float64."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape.dims} vs {b.shape.dims}")
    return float(np.max(np.abs(a.to_f64() - b.to_f64())))


@dataclass
class _Classification:
    result: RoundResult | None
    rerun: tuple[str, ...] = ()


def _tensor_meta(x: Tensor) -> tuple:
    return (x.shape.dims, x.dtype.value, float(np.mean(x.to_f64())))


def classify_outcomes(
    outcomes: dict[BackendId, BackendOutcome],
    model_hash: str,
    x: Tensor,
    cfg: DiffConfig,
) -> _Classification:
    """Pure classification of recorded outcomes (no backend invocation)."""
    trusted = sorted(
        ((i, o) for i, o in outcomes.items() if i.role is BackendRole.TRUSTED),
        key=lambda pair: pair[0].name,
    )
    under_test = [(i, o) for i, o in outcomes.items() if i.role is BackendRole.UNDER_TEST]
    sut_id, sut = under_test[0]
    named = {i.name: o for i, o in outcomes.items()}
    shape, dtype_name, mean = _tensor_meta(x)

    def bug(kind: BugKind, **kwargs) -> BugReport:
        return BugReport(
            kind=kind,
            model_hash=model_hash,
            tensor_shape=shape,
            tensor_dtype=dtype_name,
            tensor_mean=mean,
            **kwargs,
        )

    def done(status: RoundStatus, report: BugReport | None, max_dev: float | None = None,
             reason: str | None = None) -> _Classification:
        return _Classification(
            RoundResult(status, named, report, max_dev, discard_reason=reason)
        )

    failed_trusted = [i.name for i, o in trusted if o.status is not OutcomeStatus.OK]
    if failed_trusted:
        return done(
            RoundStatus.DISCARDED, None,
            reason=f"trusted backend failed: {', '.join(failed_trusted)}",
        )

    if sut.status is not OutcomeStatus.OK:
        signature = sut.crash or CrashSignature.make("timeout", "", "run exceeded budget")
        return done(RoundStatus.CRASH, bug(BugKind.CRASH, crash_signature=signature))

    sut_nan = bool(np.isnan(sut.output.to_f64()).any())
    trusted_nan = any(bool(np.isnan(o.output.to_f64()).any()) for _, o in trusted)
    if sut_nan and not trusted_nan:
        return done(RoundStatus.NAN, bug(BugKind.NAN))

    values: dict[str, float] = {}
    for tid, outcome in trusted:
        try:
            values[f"{tid.name}|{sut_id.name}"] = compute_inconsistency(
                outcome.output, sut.output
            )
        except ShapeMismatch as exc:
            signature = CrashSignature.make("output-shape-mismatch", "", str(exc))
            return done(RoundStatus.CRASH, bug(BugKind.CRASH, crash_signature=signature))

    finite = [v for v in values.values() if not math.isnan(v)]
    max_dev = max(finite) if finite else None
    if values and all(v > cfg.epsilon for v in values.values()):
        return done(
            RoundStatus.INCONSISTENCY,
            bug(BugKind.INCONSISTENCY, inconsistency_values=values),
            max_dev,
        )

    disagreeing: set[str] = set()
    for i in range(len(trusted)):
        for j in range(i + 1, len(trusted)):
            d = compute_inconsistency(trusted[i][1].output, trusted[j][1].output)
            if d > cfg.epsilon:
                disagreeing.add(trusted[i][0].name)
                disagreeing.add(trusted[j][0].name)
    if disagreeing:
        return _Classification(None, tuple(sorted(disagreeing)))

    return done(RoundStatus.NO_BUG, None, max_dev)


def run_differential(
    g: GraphModel,
    x: Tensor,
    backends: Sequence[tuple[BackendId, Backend]],
    cfg: DiffConfig,
) -> RoundResult:
    """Run every backend once, classify, and apply the re-run/discard rule."""
    trusted_ids = [i for i, _ in backends if i.role is BackendRole.TRUSTED]
    sut_ids = [i for i, _ in backends if i.role is BackendRole.UNDER_TEST]
    if len(trusted_ids) < 2:
        raise ConfigError(f"need at least 2 trusted backends, got {len(trusted_ids)}")
    if len(sut_ids) != 1:
        raise ConfigError(f"need exactly 1 backend under test, got {len(sut_ids)}")
    names = [i.name for i, _ in backends]
    if len(set(names)) != len(names):
        raise ConfigError("backend names must be unique")

    model_hash = structure_hash(g)
    by_id = dict(backends)
    outcomes = {i: backend.run(g, x, cfg.timeout_s) for i, backend in backends}

    reruns = 0
    while True:
        classification = classify_outcomes(outcomes, model_hash, x, cfg)
        if classification.result is not None:
            classification.result.reruns = reruns
            return classification.result
        if reruns >= cfg.stability_reruns:
            named = {i.name: o for i, o in outcomes.items()}
            return RoundResult(
                RoundStatus.DISCARDED, named, reruns=reruns,
                discard_reason="trusted backends disagree after re-runs",
            )
        for bid in list(outcomes):
            if bid.name in classification.rerun:
                outcomes[bid] = by_id[bid].run(g, x, cfg.timeout_s)
        reruns += 1


def dedup_bugs(reports: Sequence[BugReport]) -> list[BugReport]:
    """Keep the first report per dedup key; count later ones as duplicates."""
    unique: dict[tuple, BugReport] = {}
    ordered: list[BugReport] = []
    for report in reports:
        key = report.dedup_key()
        kept = unique.get(key)
        if kept is None:
            kept = replace(report, duplicates=0)
            unique[key] = kept
            ordered.append(kept)
        else:
            kept.duplicates += 1
    return ordered


# --- Bug corpus layout: bugs/<kind>/<entry-key>/{model.json,input.dljt,report.json}


def write_bug_entry(root: Path, report: BugReport, g: GraphModel, x: Tensor) -> Path:
    entry = Path(root) / "bugs" / report.kind.value / report.entry_key()
    entry.mkdir(parents=True, exist_ok=True)
    (entry / "model.json").write_text(graph_to_json(g), encoding="utf-8")
    write_tensor(str(entry / "input.dljt"), x)
    (entry / "report.json").write_text(
        json.dumps(report.to_json_dict(), sort_keys=True, separators=(",", ":")),
        encoding="utf-8",
    )
    return entry


def read_bug_entry(entry: Path) -> tuple[BugReport, GraphModel, Tensor]:
    entry = Path(entry)
    report = BugReport.from_json_dict(
        json.loads((entry / "report.json").read_text(encoding="utf-8"))
    )
    g = read_graph(str(entry / "model.json"))
    x = read_tensor(str(entry / "input.dljt"))
    return report, g, x
