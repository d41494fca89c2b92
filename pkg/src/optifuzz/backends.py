"""Backend implementations behind the differential oracle.

Built-in backends evaluate in-process: the trusted pair interprets the graph
plainly at F64 and F32, and the backend under test runs the optimizing
executor.  External backends are long-lived subprocesses speaking one
newline-delimited JSON request/response per run:

  request : {"model_path", "tensor_path", "output_path", "timeout_ms"}
  response: {"status": "ok", "output_path": ...}
          | {"status": "crash", "error_kind": ..., "message": ...}
          | {"status": "timeout"}

A hung external process is killed and restarted; the run is reported as a
timeout outcome.
"""

from __future__ import annotations

import json
import os
import select
import shlex
import subprocess
import tempfile
import time
import uuid
from pathlib import Path

from .difftest import (
    Backend,
    BackendId,
    BackendOutcome,
    BackendRole,
    CrashSignature,
    OutcomeStatus,
)
from .graphs import GraphModel, write_graph
from .optimizer import OptimizeConfig, execute_optimized_detailed
from .reference import ExecError, run_graph
from .tensors import DType, Tensor, read_tensor, write_tensor


def signature_from_exec_error(exc: ExecError, g: GraphModel) -> CrashSignature:
    op_kind = ""
    if exc.edge_id is not None:
        try:
            op_kind = g.edge_by_id(exc.edge_id).op.value
        except KeyError:
            op_kind = ""
    return CrashSignature.make(exc.kind.value, op_kind, exc.message)


class ReferenceBackend:
    """Plain topological interpretation at a fixed precision; never optimizes."""

    def __init__(self, dtype: DType) -> None:
        self.dtype = dtype
        self.name = f"reference-{dtype.value}"

    def run(self, g: GraphModel, x: Tensor, timeout_s: float) -> BackendOutcome:
        start = time.perf_counter()
        try:
            out = run_graph(g, x, exec_dtype=self.dtype)
            return BackendOutcome(
                OutcomeStatus.OK, output=out, duration_s=time.perf_counter() - start
            )
        except ExecError as exc:
            return BackendOutcome(
                OutcomeStatus.CRASH,
                crash=signature_from_exec_error(exc, g),
                duration_s=time.perf_counter() - start,
            )
        except Exception as exc:  # backend failures are data, never round aborts
            return BackendOutcome(
                OutcomeStatus.CRASH,
                crash=CrashSignature.make("internal", "", f"{type(exc).__name__}: {exc}"),
                duration_s=time.perf_counter() - start,
            )


class OptimizingBackend:
    """The built-in system under test: optimize, then execute with the tensor cache."""

    def __init__(self, cfg: OptimizeConfig, name: str | None = None) -> None:
        self.cfg = cfg
        self.name = name or f"optimizing-{cfg.exec_dtype.value}"

    def run(self, g: GraphModel, x: Tensor, timeout_s: float) -> BackendOutcome:
        start = time.perf_counter()
        try:
            out, report, _cache = execute_optimized_detailed(g, x, self.cfg)
            return BackendOutcome(
                OutcomeStatus.OK,
                output=out,
                duration_s=time.perf_counter() - start,
                pass_fires=dict(report.fire_counts),
            )
        except ExecError as exc:
            return BackendOutcome(
                OutcomeStatus.CRASH,
                crash=signature_from_exec_error(exc, g),
                duration_s=time.perf_counter() - start,
            )
        except Exception as exc:
            return BackendOutcome(
                OutcomeStatus.CRASH,
                crash=CrashSignature.make("internal", "", f"{type(exc).__name__}: {exc}"),
                duration_s=time.perf_counter() - start,
            )


class ExternalBackend:
    """Client side of the wire protocol over a subprocess's stdin/stdout."""

    GRACE_S = 5.0

    def __init__(self, command: str, workdir: str | Path, name: str = "external") -> None:
        self.command = command
        self.name = name
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self._proc: subprocess.Popen | None = None
        self._buffer = b""

    def _ensure_process(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                shlex.split(self.command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
            )
            self._buffer = b""
        return self._proc

    def _read_line(self, deadline: float) -> bytes | None:
        proc = self._proc
        assert proc is not None and proc.stdout is not None
        fd = proc.stdout.fileno()
        while b"\n" not in self._buffer:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            ready, _, _ = select.select([fd], [], [], remaining)
            if not ready:
                return None
            chunk = os.read(fd, 65536)
            if not chunk:
                return None  # process closed its stdout
            self._buffer += chunk
        line, self._buffer = self._buffer.split(b"\n", 1)
        return line

    def _restart(self) -> None:
        if self._proc is not None:
            self._proc.kill()
            self._proc.wait()
            self._proc = None
        self._buffer = b""

    def close(self) -> None:
        if self._proc is not None:
            if self._proc.stdin is not None:
                self._proc.stdin.close()
            self._proc.terminate()
            try:
                self._proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
            self._proc = None

    def run(self, g: GraphModel, x: Tensor, timeout_s: float) -> BackendOutcome:
        start = time.perf_counter()
        tag = uuid.uuid4().hex
        model_path = self.workdir / f"{tag}.model.json"
        tensor_path = self.workdir / f"{tag}.input.dljt"
        output_path = self.workdir / f"{tag}.output.dljt"
        write_graph(str(model_path), g)
        write_tensor(str(tensor_path), x)

        def cleanup() -> None:
            for p in (model_path, tensor_path, output_path):
                try:
                    p.unlink()
                except FileNotFoundError:
                    pass

        def finish(outcome: BackendOutcome) -> BackendOutcome:
            outcome.duration_s = time.perf_counter() - start
            cleanup()
            return outcome

        request = {
            "model_path": str(model_path.resolve()),
            "tensor_path": str(tensor_path.resolve()),
            "output_path": str(output_path.resolve()),
            "timeout_ms": int(timeout_s * 1000),
        }
        try:
            proc = self._ensure_process()
            assert proc.stdin is not None
            proc.stdin.write((json.dumps(request) + "\n").encode("utf-8"))
            proc.stdin.flush()
        except (OSError, ValueError) as exc:
            self._restart()
            return finish(BackendOutcome(
                OutcomeStatus.CRASH,
                crash=CrashSignature.make("backend-io", "", str(exc)),
            ))

        line = self._read_line(time.monotonic() + timeout_s + self.GRACE_S)
        if line is None:
            self._restart()
            return finish(BackendOutcome(OutcomeStatus.TIMEOUT))

        try:
            response = json.loads(line.decode("utf-8"))
            status = response["status"]
        except (ValueError, KeyError) as exc:
            self._restart()
            return finish(BackendOutcome(
                OutcomeStatus.CRASH,
                crash=CrashSignature.make("protocol-error", "", str(exc)),
            ))

        if status == "timeout":
            return finish(BackendOutcome(OutcomeStatus.TIMEOUT))
        if status == "crash":
            return finish(BackendOutcome(
                OutcomeStatus.CRASH,
                crash=CrashSignature.make(
                    str(response.get("error_kind", "unknown")),
                    str(response.get("op_kind", "")),
                    str(response.get("message", "")),
                ),
            ))
        if status == "ok":
            try:
                out = read_tensor(str(response["output_path"]))
            except Exception as exc:
                return finish(BackendOutcome(
                    OutcomeStatus.CRASH,
                    crash=CrashSignature.make("protocol-error", "", f"bad output: {exc}"),
                ))
            return finish(BackendOutcome(OutcomeStatus.OK, output=out))

        return finish(BackendOutcome(
            OutcomeStatus.CRASH,
            crash=CrashSignature.make("protocol-error", "", f"unknown status {status!r}"),
        ))


def builtin_roster(
    optimize_cfg: OptimizeConfig,
    external_command: str | None = None,
    workdir: str | Path | None = None,
) -> list[tuple[BackendId, Backend]]:
    """Two trusted interpretations plus the configured backend under test."""
    roster: list[tuple[BackendId, Backend]] = [
        (BackendId("reference-f64", BackendRole.TRUSTED), ReferenceBackend(DType.F64)),
        (BackendId("reference-f32", BackendRole.TRUSTED), ReferenceBackend(DType.F32)),
    ]
    if external_command is None:
        sut: Backend = OptimizingBackend(optimize_cfg)
        roster.append((BackendId(sut.name, BackendRole.UNDER_TEST), sut))
    else:
        io_dir = (
            Path(workdir) / "extern-io"
            if workdir is not None
            else Path(tempfile.mkdtemp(prefix="optifuzz-extern-"))
        )
        ext = ExternalBackend(external_command, io_dir, name="external")
        roster.append((BackendId(ext.name, BackendRole.UNDER_TEST), ext))
    return roster
