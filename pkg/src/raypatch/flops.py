"""Instrumented FLOP counters for executed tensor ops.

Convention: one multiply-accumulate = 2 FLOPs. Only dense arithmetic that the
analytic cost model also prices is counted (matrix products, convolutions,
bilinear interpolation at 8 FLOPs per output element). Elementwise glue such
as activations, normalization statistics and residual adds is excluded on
both sides so instrumented and analytic totals stay comparable.
"""

from __future__ import annotations

_counters: list["FlopCounter"] = []


class FlopCounter:
    """Collects FLOPs while active, optionally attributed to named stages."""

    def __init__(self):
        self.total = 0.0
        self.by_stage: dict[str, float] = {}
        self.query_counts: dict[str, int] = {}
        self._stage_stack: list[str] = []

    def __enter__(self):
        _counters.append(self)
        return self

    def __exit__(self, *exc):
        _counters.remove(self)
        return False

    def _add(self, flops):
        self.total += flops
        if self._stage_stack:
            name = self._stage_stack[-1]
            self.by_stage[name] = self.by_stage.get(name, 0.0) + flops

    def _count_queries(self, name, n):
        self.query_counts[name] = self.query_counts.get(name, 0) + n


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        for c in _counters:
            c._stage_stack.append(self.name)
        return self

    def __exit__(self, *exc):
        for c in _counters:
            if c._stage_stack and c._stage_stack[-1] == self.name:
                c._stage_stack.pop()
        return False


def stage(name):
    """Context manager attributing counted FLOPs to ``name`` on all active counters."""
    return _Stage(name)


def add_flops(flops):
    for c in _counters:
        c._add(flops)


def count_queries(name, n):
    """Record that a decoder issued ``n`` attention queries (for query-count audits)."""
    for c in _counters:
        c._count_queries(name, n)
