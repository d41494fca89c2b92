"""Wire-protocol test double: one JSON request per line on stdin, one response per line.

Modes select misbehavior: 'ok' answers with the plain interpreter's output,
'crash' always reports a crash, 'hang' reads requests and never answers,
'garbage' replies with a non-JSON line.
"""

import json
import sys

from optifuzz.graphs import read_graph
from optifuzz.reference import execute_reference
from optifuzz.tensors import read_tensor, write_tensor


def main() -> int:
    mode = sys.argv[1] if len(sys.argv) > 1 else "ok"
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        request = json.loads(line)
        if mode == "hang":
            continue
        if mode == "garbage":
            print("not json at all", flush=True)
            continue
        if mode == "crash":
            print(
                json.dumps(
                    {"status": "crash", "error_kind": "unsupported-op", "message": "op id 42"}
                ),
                flush=True,
            )
            continue
        try:
            g = read_graph(request["model_path"])
            x = read_tensor(request["tensor_path"])
            out = execute_reference(g, x)
            write_tensor(request["output_path"], out)
            print(
                json.dumps({"status": "ok", "output_path": request["output_path"]}),
                flush=True,
            )
        except Exception as exc:  # a model-level failure is a crash response
            print(
                json.dumps(
                    {
                        "status": "crash",
                        "error_kind": type(exc).__name__,
                        "message": str(exc),
                    }
                ),
                flush=True,
            )
    return 0


if __name__ == "__main__":
    sys.exit(main())
