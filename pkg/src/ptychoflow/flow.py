"""JSON flow definitions: parse, validate, resolve parameters and run Action states."""

from __future__ import annotations

import json
import logging
import time
import uuid
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Protocol

log = logging.getLogger(__name__)

REF_SUFFIX = ".$"


@dataclass(frozen=True)
class FlowIssue:
    code: str  # missing-start-at | dangling-next | next-and-end | no-next-or-end | cycle | bad-type | ...
    states: tuple[str, ...]
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


class FlowValidationError(ValueError):
    def __init__(self, issues: list[FlowIssue]):
        self.issues = issues
        super().__init__("; ".join(str(i) for i in issues))

    @property
    def codes(self) -> list[str]:
        return [i.code for i in self.issues]


class ParameterError(KeyError):
    def __init__(self, key: str, path: str, reason: str = "unresolvable"):
        self.key, self.path = key, path
        super().__init__(f"parameter {key!r}: {reason} path {path!r}")

    def __str__(self) -> str:
        return self.args[0]


class FlowConfigError(LookupError):
    """A state's ActionUrl matches no registered provider."""


@dataclass(frozen=True)
class StateDef:
    name: str
    type: str
    action_url: str | None
    parameters: Any
    next: str | None = None
    end: bool = False

    @property
    def is_marker(self) -> bool:
        """Terminal state without an action: reached, but nothing runs."""
        return self.end and self.action_url is None


@dataclass(frozen=True)
class FlowDefinition:
    start_at: str
    states: dict[str, StateDef]
    warnings: tuple[str, ...] = ()

    def chain(self) -> list[str]:
        out, name = [], self.start_at
        while name is not None:
            out.append(name)
            name = self.states[name].next
        return out

    @property
    def end_state(self) -> str:
        return self.chain()[-1]


def _state(name: str, raw: Any, issues: list[FlowIssue]) -> StateDef | None:
    if not isinstance(raw, dict):
        issues.append(FlowIssue("bad-state", (name,), f"state {name!r} is not an object"))
        return None
    typ = raw.get("Type", "Action")
    if typ != "Action":
        issues.append(FlowIssue("bad-type", (name,), f"state {name!r} has unsupported Type {typ!r}"))
    nxt, end = raw.get("Next"), raw.get("End", False)
    if not isinstance(end, bool):
        issues.append(FlowIssue("bad-end", (name,), f"state {name!r}: End must be a boolean"))
        end = bool(end)
    if nxt is not None and end:
        issues.append(FlowIssue("next-and-end", (name,), f"state {name!r} has both Next and End"))
    if nxt is None and not end:
        issues.append(FlowIssue("no-next-or-end", (name,), f"state {name!r} has neither Next nor End"))
    url = raw.get("ActionUrl")
    if url is None and not end:
        issues.append(FlowIssue("missing-action-url", (name,), f"state {name!r} has no ActionUrl"))
    params = raw.get("Parameters", {})
    _check_refs(params, name, issues)
    return StateDef(name, typ, url, params, nxt, end)


def _check_refs(params: Any, state: str, issues: list[FlowIssue]):
    if isinstance(params, dict):
        for k, v in params.items():
            if k.endswith(REF_SUFFIX) and not (isinstance(v, str) and (v == "$" or v.startswith("$."))):
                issues.append(FlowIssue("bad-reference", (state,), f"state {state!r}: {k!r} must map to a '$.path' string"))
            else:
                _check_refs(v, state, issues)
    elif isinstance(params, list):
        for v in params:
            _check_refs(v, state, issues)


def parse_flow(text: str | bytes | Mapping) -> FlowDefinition:
    """Validate a flow document; raises :class:`FlowValidationError` listing every problem."""
    if isinstance(text, Mapping):
        doc = dict(text)
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FlowValidationError([FlowIssue("bad-json", (), str(exc))]) from exc
    issues: list[FlowIssue] = []
    if not isinstance(doc, dict):
        raise FlowValidationError([FlowIssue("bad-document", (), "flow document must be a JSON object")])
    raw_states = doc.get("States")
    if not isinstance(raw_states, dict) or not raw_states:
        issues.append(FlowIssue("missing-states", (), "States must be a non-empty object"))
        raw_states = {}
    states = {}
    for name, raw in raw_states.items():
        st = _state(name, raw, issues)
        if st is not None:
            states[name] = st
    start = doc.get("StartAt")
    if start is None:
        issues.append(FlowIssue("missing-start-at", (), "StartAt is missing"))
    elif start not in raw_states:
        issues.append(FlowIssue("dangling-start-at", (str(start),), f"StartAt points to unknown state {start!r}"))
    for st in states.values():
        if st.next is not None and st.next not in raw_states:
            issues.append(FlowIssue("dangling-next", (st.name, st.next), f"state {st.name!r} Next points to unknown state {st.next!r}"))
    warnings: list[str] = []
    if start in states:
        seen: list[str] = []
        name = start
        while name in states:
            if name in seen:
                loop = tuple(seen[seen.index(name) :])
                issues.append(FlowIssue("cycle", loop, f"Next chain cycles through {', '.join(loop)}"))
                break
            seen.append(name)
            name = states[name].next
        for unreached in sorted(set(raw_states) - set(seen)):
            warnings.append(f"state {unreached!r} is unreachable from {start!r}")
    if issues:
        raise FlowValidationError(issues)
    for w in warnings:
        log.warning("flow: %s", w)
    return FlowDefinition(start, states, tuple(warnings))


def load_flow(path: str | Path) -> FlowDefinition:
    return parse_flow(Path(path).read_text())


def bundled_flow_text() -> str:
    """The transfer-then-reconstruct flow shipped with the package."""
    return resources.files("ptychoflow").joinpath("flows/ptycho_flow.json").read_text()


# parameter references


def lookup(scope: Any, path: str, key: str = "?") -> Any:
    if path == "$":
        return scope
    if not path.startswith("$."):
        raise ParameterError(key, path, "malformed")
    cur = scope
    for seg in path[2:].split("."):
        if isinstance(cur, dict) and seg in cur:
            cur = cur[seg]
        elif isinstance(cur, list) and seg.isdigit() and int(seg) < len(cur):
            cur = cur[int(seg)]
        else:
            raise ParameterError(key, path)
    return cur


def resolve_params(parameters: Any, scope: Any) -> Any:
    """Replace every ``"k.$": "$.path"`` entry by ``"k": <value at path>``, recursively."""
    if isinstance(parameters, dict):
        out = {}
        for k, v in parameters.items():
            if k.endswith(REF_SUFFIX):
                out[k[: -len(REF_SUFFIX)]] = lookup(scope, v, k)
            else:
                out[k] = resolve_params(v, scope)
        return out
    if isinstance(parameters, list):
        return [resolve_params(v, scope) for v in parameters]
    return parameters


# execution


class ActionProvider(Protocol):
    def __call__(self, params: Any) -> Any: ...


@dataclass
class TraceEntry:
    state: str
    started: float
    finished: float
    outcome: str  # "succeeded" | "failed"
    output: Any = None


@dataclass
class FlowRun:
    run_id: str
    input: Any
    trace: list[TraceEntry] = field(default_factory=list)
    status: str = "running"
    end_state: str | None = None
    error: str | None = None

    @property
    def states(self) -> list[str]:
        return [e.state for e in self.trace]

    def output_of(self, state: str) -> Any:
        for e in self.trace:
            if e.state == state:
                return e.output
        raise KeyError(state)


def route(url: str, providers: Mapping[str, ActionProvider]) -> ActionProvider:
    """Longest registered prefix of ``url`` wins."""
    matches = [p for p in providers if url.startswith(p)]
    if not matches:
        raise FlowConfigError(f"no provider registered for ActionUrl {url!r}")
    return providers[max(matches, key=len)]


class _TraceFile:
    def __init__(self, path: Path | None):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict):
        if self.path is None:
            return
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, default=str) + "\n")
            fh.flush()


def run_flow(
    definition: FlowDefinition,
    flow_input: Any,
    providers: Mapping[str, ActionProvider],
    runs_dir: str | Path | None = None,
    run_id: str | None = None,
    on_state: Callable[[TraceEntry], None] | None = None,
) -> FlowRun:
    """Run states along the Next chain; stops at the first failing action.

    With ``runs_dir`` set, the trace is appended to ``<runs_dir>/<run_id>.jsonl``
    as each state completes.
    """
    chain = definition.chain()
    bound = {}
    for name in chain:
        st = definition.states[name]
        if not st.is_marker:
            bound[name] = route(st.action_url, providers)
    run = FlowRun(run_id or uuid.uuid4().hex[:12], flow_input)
    trace_file = _TraceFile(Path(runs_dir) / f"{run.run_id}.jsonl" if runs_dir is not None else None)
    trace_file.write({"kind": "start", "run_id": run.run_id, "input": flow_input, "start_at": definition.start_at})
    scope: dict[str, Any] = {"input": flow_input, "states": {}}
    for name in chain:
        st = definition.states[name]
        if st.is_marker:
            break
        t0 = time.time()
        try:
            params = resolve_params(st.parameters, scope)
            output = bound[name](params)
            entry = TraceEntry(name, t0, time.time(), "succeeded", output)
        except Exception as exc:
            log.error("flow %s: state %s failed: %s", run.run_id, name, exc)
            entry = TraceEntry(name, t0, time.time(), "failed", {"error": f"{type(exc).__name__}: {exc}"})
            run.error = f"{name}: {exc}"
        run.trace.append(entry)
        trace_file.write({"kind": "state", **asdict(entry)})
        if on_state is not None:
            on_state(entry)
        if entry.outcome == "failed":
            run.status = "failed"
            break
        scope["states"][name] = {"output": entry.output}
    if run.status != "failed":
        run.status = "succeeded"
        run.end_state = chain[-1]
    trace_file.write({"kind": "end", "status": run.status, "end_state": run.end_state, "error": run.error})
    return run


def replay_run(path: str | Path) -> FlowRun:
    """Rebuild a FlowRun from its trace file; a run without an end record is still ``running``."""
    run = None
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        kind = rec.pop("kind")
        if kind == "start":
            run = FlowRun(rec["run_id"], rec["input"])
        elif kind == "state" and run is not None:
            run.trace.append(TraceEntry(**rec))
        elif kind == "end" and run is not None:
            run.status, run.end_state, run.error = rec["status"], rec["end_state"], rec["error"]
    if run is None:
        raise ValueError(f"{path}: no start record")
    if run.status == "running" and any(e.outcome == "failed" for e in run.trace):
        run.status = "failed"
    return run


# built-in providers


def transfer_provider(params: dict) -> dict:
    """``{"src", "dest", "items"}`` -> transfer report; no ``items`` means everything under ``src``."""
    from .xfer import TransferSpec, transfer

    items = params.get("items")
    if not items:
        items = sorted(p.name for p in Path(params["src"]).iterdir())
    report = transfer(TransferSpec(params["src"], params["dest"], list(items)))
    if not report.succeeded:
        first = dict(list(report.failures.items())[:3])
        raise RuntimeError(f"transfer failed for {len(report.failures)} file(s): {first}")
    return report.to_dict()


class ComputeProvider:
    """Submits each entry of ``tasks`` to an endpoint and waits for all results."""

    def __init__(self, client_factory: Callable[[str], Any], timeout: float = 3600.0):
        self.client_factory = client_factory
        self.timeout = timeout

    def __call__(self, params: dict) -> dict:
        results = []
        for task in params["tasks"]:
            client = self.client_factory(task["endpoint"])
            task_id = client.run(task["function"], task.get("payload") or {})
            status = client.wait(task_id, timeout=self.timeout)
            if status["state"] != "succeeded":
                raise RuntimeError(f"task {task_id} ({task['function']}) {status['state']}: {status.get('error')}")
            results.append({"task_id": task_id, "result": status.get("result")})
        return {"results": results}
