from __future__ import annotations

import copy
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ptychoflow.endpoint import Endpoint, EndpointConfig, LocalClient
from ptychoflow.flow import (
    ComputeProvider,
    FlowConfigError,
    FlowValidationError,
    ParameterError,
    bundled_flow_text,
    load_flow,
    lookup,
    parse_flow,
    replay_run,
    resolve_params,
    route,
    run_flow,
    transfer_provider,
)

BUNDLED = json.loads(bundled_flow_text())


def stub_providers(calls):
    def transfer(params):
        calls.append(("transfer", params))
        return {"bytes_moved": 42, "files_ok": len(params["items"])}

    def compute(params):
        calls.append(("compute", params))
        return {"results": [t["payload"] for t in params["tasks"]]}

    return {"local://transfer": transfer, "local://compute": compute}


FLOW_INPUT = {
    "src": "/data",
    "dest": "/cluster",
    "items": ["index.json"],
    "endpoint": "e",
    "function": "echo",
    "payload": {"k": 1},
}


def test_bundled_flow_parses_to_three_states():
    fd = parse_flow(bundled_flow_text())
    assert fd.start_at == "Init" and len(fd.states) == 3
    assert fd.chain() == ["Init", "Analyze", "Fin"] and fd.end_state == "Fin"
    assert fd.warnings == ()


def test_single_state_flow():
    fd = parse_flow('{"StartAt":"A","States":{"A":{"Type":"Action","ActionUrl":"x","End":true}}}')
    assert fd.chain() == ["A"]


def _doc(**states):
    return {"StartAt": "A", "States": states}


def _act(**kw):
    return {"Type": "Action", "ActionUrl": "local://x", **kw}


def test_cycle_names_states():
    with pytest.raises(FlowValidationError) as exc:
        parse_flow(_doc(A=_act(Next="B"), B=_act(Next="A")))
    (issue,) = exc.value.issues
    assert issue.code == "cycle" and set(issue.states) == {"A", "B"}


def test_dangling_next_named():
    with pytest.raises(FlowValidationError) as exc:
        parse_flow(_doc(A=_act(Next="Nowhere")))
    assert exc.value.codes == ["dangling-next"] and "Nowhere" in str(exc.value)


@pytest.mark.parametrize(
    "doc,code",
    [
        ({"States": {"A": _act(End=True)}}, "missing-start-at"),
        ({"StartAt": "Z", "States": {"A": _act(End=True)}}, "dangling-start-at"),
        (_doc(A=_act(Next="A", End=True)), "next-and-end"),
        (_doc(A=_act()), "no-next-or-end"),
        (_doc(A={"Type": "Choice", "End": True}), "bad-type"),
        (_doc(A={"Type": "Action", "Next": "B"}, B=_act(End=True)), "missing-action-url"),
        (_doc(A=_act(End=True, Parameters={"x.$": 3})), "bad-reference"),
        ({"StartAt": "A"}, "missing-states"),
        ("[]", "bad-document"),
    ],
)
def test_named_validation_errors(doc, code):
    with pytest.raises(FlowValidationError) as exc:
        parse_flow(doc)
    assert code in exc.value.codes


def test_bad_json():
    with pytest.raises(FlowValidationError) as exc:
        parse_flow("{not json")
    assert exc.value.codes == ["bad-json"]


def test_unreachable_state_is_warning():
    fd = parse_flow(_doc(A=_act(End=True), B=_act(End=True)))
    assert any("'B'" in w for w in fd.warnings)


def test_load_flow_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_flow(tmp_path / "missing.json")


def test_resolve_params_cases():
    assert resolve_params({"src.$": "$.input.src"}, {"input": {"src": "/data"}}) == {"src": "/data"}
    plain = {"a": [1, {"b": 2}], "c": "$.input.x"}
    assert resolve_params(plain, {}) == plain
    scope = {"input": {}, "states": {"Init": {"output": {"bytes": 42}}}}
    assert resolve_params({"x.$": "$.states.Init.output.bytes"}, scope) == {"x": 42}
    nested = {"tasks": [{"p.$": "$.input.items.1"}]}
    assert resolve_params(nested, {"input": {"items": ["a", "b"]}}) == {"tasks": [{"p": "b"}]}


def test_resolve_params_error_names_key_and_path():
    with pytest.raises(ParameterError) as exc:
        resolve_params({"x.$": "$.input.nope"}, {"input": {}})
    assert exc.value.key == "x.$" and exc.value.path == "$.input.nope"
    with pytest.raises(ParameterError):
        lookup({}, "input.x")


json_values = st.recursive(
    st.none() | st.booleans() | st.integers() | st.text(max_size=5),
    lambda c: st.lists(c, max_size=3) | st.dictionaries(st.text(max_size=4), c, max_size=3),
    max_leaves=10,
)


@given(params=json_values, scope=json_values)
def test_resolve_params_is_pure(params, scope):
    p0, s0 = copy.deepcopy(params), copy.deepcopy(scope)
    try:
        a = resolve_params(params, scope)
    except ParameterError:
        return
    assert resolve_params(params, scope) == a
    assert params == p0 and scope == s0


def test_run_bundled_flow_with_stubs(tmp_path):
    calls = []
    run = run_flow(parse_flow(bundled_flow_text()), FLOW_INPUT, stub_providers(calls), runs_dir=tmp_path)
    assert run.status == "succeeded" and run.states == ["Init", "Analyze"] and run.end_state == "Fin"
    assert calls[0] == ("transfer", {"src": "/data", "dest": "/cluster", "items": ["index.json"]})
    assert calls[1][1]["tasks"] == [{"endpoint": "e", "function": "echo", "payload": {"k": 1}}]
    replay = replay_run(tmp_path / f"{run.run_id}.jsonl")
    assert (replay.status, replay.states, replay.end_state) == ("succeeded", run.states, "Fin")
    records = [json.loads(x) for x in (tmp_path / f"{run.run_id}.jsonl").read_text().splitlines()]
    assert [r["kind"] for r in records] == ["start", "state", "state", "end"]


def test_fail_fast_keeps_init_output(tmp_path):
    calls = []
    providers = stub_providers(calls)

    def boom(params):
        raise RuntimeError("analysis exploded")

    providers["local://compute"] = boom
    run = run_flow(parse_flow(bundled_flow_text()), FLOW_INPUT, providers, runs_dir=tmp_path)
    assert run.status == "failed" and run.states == ["Init", "Analyze"] and run.end_state is None
    assert [e.outcome for e in run.trace] == ["succeeded", "failed"]
    assert run.output_of("Init") == {"bytes_moved": 42, "files_ok": 1}
    assert "analysis exploded" in run.error
    assert replay_run(tmp_path / f"{run.run_id}.jsonl").status == "failed"


def test_crash_inspectable_trace(tmp_path):
    """A trace without an end record replays as running with the completed states."""
    run = run_flow(parse_flow(bundled_flow_text()), FLOW_INPUT, stub_providers([]), runs_dir=tmp_path)
    path = tmp_path / f"{run.run_id}.jsonl"
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:2]) + "\n")
    partial = replay_run(path)
    assert partial.status == "running" and partial.states == ["Init"]


def test_analyze_sees_init_output():
    doc = copy.deepcopy(BUNDLED)
    doc["States"]["Analyze"]["Parameters"] = {"tasks": [{"endpoint": "e", "function": "echo", "payload.$": "$.states.Init.output"}]}
    seen = []
    providers = stub_providers(seen)
    run = run_flow(parse_flow(doc), FLOW_INPUT, providers)
    assert seen[1][1]["tasks"][0]["payload"]["bytes_moved"] == 42
    assert run.output_of("Analyze") == {"results": [{"bytes_moved": 42, "files_ok": 1}]}


def test_unmatched_action_url_fails_before_execution():
    calls = []
    providers = {"local://transfer": stub_providers(calls)["local://transfer"]}
    with pytest.raises(FlowConfigError):
        run_flow(parse_flow(bundled_flow_text()), FLOW_INPUT, providers)
    assert calls == []


def test_route_longest_prefix():
    a, b = object(), object()
    assert route("local://compute/gpu", {"local://": a, "local://compute": b}) is b
    with pytest.raises(FlowConfigError):
        route("https://x", {"local://": a})


def test_end_state_with_action_runs():
    doc = _doc(A=_act(Next="B"), B=_act(End=True, Parameters={"v.$": "$.states.A.output"}))
    run = run_flow(parse_flow(doc), {}, {"local://x": lambda p: p or "a"})
    assert run.states == ["A", "B"] and run.output_of("B") == {"v": "a"} and run.end_state == "B"


def test_real_providers_transfer_then_echo(tmp_path):
    (tmp_path / "src").mkdir()
    (tmp_path / "src" / "index.json").write_text("{}")
    ep = Endpoint(EndpointConfig(1, 4)).start()
    try:
        client = LocalClient(ep)
        providers = {"local://transfer": transfer_provider, "local://compute": ComputeProvider(lambda url: client, timeout=30)}
        inp = {**FLOW_INPUT, "src": str(tmp_path / "src"), "dest": str(tmp_path / "dst")}
        run = run_flow(parse_flow(bundled_flow_text()), inp, providers)
    finally:
        ep.stop()
    assert run.status == "succeeded", run.error
    assert run.output_of("Init")["files_ok"] == 1 and (tmp_path / "dst" / "index.json").exists()
    assert run.output_of("Analyze")["results"][0]["result"] == {"k": 1}


def test_transfer_provider_defaults_to_everything(tmp_path):
    (tmp_path / "src" / "d").mkdir(parents=True)
    (tmp_path / "src" / "d" / "f").write_text("x")
    (tmp_path / "src" / "g").write_text("y")
    out = transfer_provider({"src": str(tmp_path / "src"), "dest": str(tmp_path / "dst")})
    assert out["files_ok"] == 2


def test_compute_failure_propagates():
    ep = Endpoint(EndpointConfig(1, 4)).start()
    try:
        prov = ComputeProvider(lambda url: LocalClient(ep), timeout=10)
        with pytest.raises(RuntimeError, match="kaboom"):
            prov({"tasks": [{"endpoint": "e", "function": "echo", "payload": {"_raise": "kaboom"}}]})
    finally:
        ep.stop()
