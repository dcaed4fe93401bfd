"""End-to-end pipeline: probe once, pick adapters, merge, generate.

One request costs exactly one extra forward pass over the prompt (the probe)
on top of ordinary greedy decoding.  The pipeline never reuses probe-time
activations for generation: after selection the prompt is re-processed from
scratch under the merged adapter configuration, so generation sees exactly
the model it would have seen had the merged adapters been attached from the
start.

Timings are split into ``probe_ms`` (the instrumented pass), ``select_merge_ms``
(ranking plus hook/fusion construction), and ``per_token_ms`` (greedy decoding,
first entry covering the prefill).  For amortization analysis the fixed
routing overhead is charged to the first emitted token —
:func:`amortized_per_token_ms` applies that convention.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Sequence

from .adapters import AdapterPool
from .backbone import Backbone
from .errors import ValidationError
from .routing import (
    MERGE_MODES,
    RoutingDecision,
    decision_to_json,
    fuse_parameters,
    fused_hooks,
    mixture_hooks,
    select_topk,
)
from .signals import SignalConfig, probe

#: Default number of adapters kept by selection.
DEFAULT_K = 20


@dataclass(frozen=True)
class EngineConfig:
    """Routing knobs for one request: signal source, k, and merge mode."""

    signal: SignalConfig = field(default_factory=SignalConfig)
    k: int = DEFAULT_K
    merge_mode: str = "mixture"

    def __post_init__(self) -> None:
        if not isinstance(self.k, int) or self.k < 1:
            raise ValidationError(f"k must be a positive integer, got {self.k!r}")
        if self.merge_mode not in MERGE_MODES:
            raise ValidationError(
                f"merge_mode must be one of {MERGE_MODES}, got {self.merge_mode!r}"
            )


@dataclass
class RouteResult:
    """Everything one routed generation produced, timings included."""

    decision: RoutingDecision
    output_tokens: list[int]
    timings: dict
    forward_pass_count: int


def route_only(
    backbone: Backbone,
    pool: AdapterPool,
    tokens: Sequence[int],
    config: EngineConfig = EngineConfig(),
) -> RoutingDecision:
    """Probe and select without generating."""
    report = probe(backbone, pool, tokens, config.signal)
    return select_topk(report, config.k)


def route_and_generate(
    backbone: Backbone,
    pool: AdapterPool,
    tokens: Sequence[int],
    config: EngineConfig = EngineConfig(),
    max_new: int = 0,
    eos_token: int | None = None,
) -> RouteResult:
    """Probe, select, merge, then greedily decode ``max_new`` tokens.

    ``forward_pass_count`` on the result counts every backbone pass the
    request issued: one probe plus one per emitted token (the first of which
    is the full prefill under the merged configuration).
    """
    start_count = backbone.forward_count

    t0 = time.perf_counter()
    report = probe(backbone, pool, tokens, config.signal)
    probe_ms = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    decision = select_topk(report, config.k)
    if config.merge_mode == "mixture":
        hooks = mixture_hooks(pool, decision)
    else:
        hooks = fused_hooks(fuse_parameters(pool, decision))
    select_merge_ms = (time.perf_counter() - t0) * 1e3

    generated = backbone.generate(tokens, hooks, max_new=max_new, eos_token=eos_token)
    return RouteResult(
        decision=decision,
        output_tokens=generated.tokens,
        timings={
            "probe_ms": probe_ms,
            "select_merge_ms": select_merge_ms,
            "per_token_ms": generated.per_token_ms,
        },
        forward_pass_count=backbone.forward_count - start_count,
    )


def amortized_per_token_ms(result: RouteResult) -> list[float]:
    """Per-token timings with the fixed routing overhead charged to token one."""
    per_token = list(result.timings["per_token_ms"])
    if per_token:
        per_token[0] += result.timings["probe_ms"] + result.timings["select_merge_ms"]
    return per_token


def route_result_to_json(result: RouteResult) -> str:
    """Render the full result (decision, tokens, timings) as one JSON record."""
    record = {
        "decision": json.loads(decision_to_json(result.decision)),
        "output_tokens": list(result.output_tokens),
        "timings": result.timings,
        "forward_pass_count": result.forward_pass_count,
    }
    return json.dumps(record)
