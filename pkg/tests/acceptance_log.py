"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

from __future__ import annotations

RESULTS: list[str] = []


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line
