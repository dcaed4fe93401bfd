"""Per-adapter routing signals read from a single probe pass.

The probe attaches every pool adapter to the backbone at its own alpha and
runs exactly one forward pass over the input tokens.  At one chosen block it
captures, for each adapter ``i``, the adapter's additive contribution to the
Q projection — ``o_i = alpha_i * A_i @ B_i @ h`` per token, where ``h`` is
the projection input produced with *all* adapters attached.  A token policy
(first / last / mean) collapses the per-token contributions to a single
vector per adapter, and a scoring rule turns that vector into a scalar:

* ``norm`` — the Euclidean norm of ``o_i``; bigger response, bigger score.
* ``inverse_entropy`` — softmax ``o_i`` and score ``1 / H``; the more peaked
  the response, the bigger the score.  ``H`` is floored at
  :data:`ENTROPY_FLOOR` so one-hot-like outputs stay finite.

Scores say nothing by themselves; routing compares them across the pool.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .adapters import AdapterPool, LoraAdapter, delta_apply
from .backbone import HOOK_SITES, Backbone, ProjectionHook
from .errors import EmptyPoolError, ValidationError
from .numcore import l2_norm, shannon_entropy, softmax

Array = np.ndarray

#: Entropies below this floor are clamped before inversion.
ENTROPY_FLOOR = 1e-12

#: Projection site the probe reads; only Q contributions are scored.
PROBE_SITE = "Q"

TOKEN_POLICIES = ("first", "last", "mean")
SCORINGS = ("norm", "inverse_entropy")


@dataclass(frozen=True)
class SignalConfig:
    """Where and how the probe reads its signals.

    ``target_block=None`` means the last block.  ``token_policy`` picks which
    token positions contribute; ``scoring`` picks the scalarization rule.
    """

    target_block: int | None = None
    token_policy: str = "last"
    scoring: str = "norm"

    def __post_init__(self) -> None:
        if self.token_policy not in TOKEN_POLICIES:
            raise ValidationError(
                f"token_policy must be one of {TOKEN_POLICIES}, got {self.token_policy!r}"
            )
        if self.scoring not in SCORINGS:
            raise ValidationError(f"scoring must be one of {SCORINGS}, got {self.scoring!r}")
        if self.target_block is not None and (
            not isinstance(self.target_block, int) or self.target_block < 0
        ):
            raise ValidationError(
                f"target_block must be None or a non-negative integer, got {self.target_block!r}"
            )

    def resolve_block(self, n_blocks: int) -> int:
        block = n_blocks - 1 if self.target_block is None else self.target_block
        if block >= n_blocks:
            raise ValidationError(
                f"target_block {block} out of range for {n_blocks}-block model"
            )
        return block


@dataclass(frozen=True)
class SignalEntry:
    """One adapter's captured projection output and its scalar score."""

    adapter_id: str
    output: Array
    score: float


@dataclass(frozen=True)
class SignalReport:
    """Probe result: one entry per pool adapter, ascending id order."""

    pool_revision: int
    target_block: int
    token_policy: str
    scoring: str
    entries: tuple[SignalEntry, ...]

    def scores(self) -> dict[str, float]:
        return {e.adapter_id: e.score for e in self.entries}


def score_norm(output: Array) -> float:
    """Euclidean norm of the captured projection output."""
    return l2_norm(output)


def score_inverse_entropy(output: Array) -> float:
    """Reciprocal Shannon entropy of the softmaxed projection output."""
    h = shannon_entropy(softmax(output))
    return 1.0 / max(h, ENTROPY_FLOOR)


_SCORE_FNS = {"norm": score_norm, "inverse_entropy": score_inverse_entropy}


def mean_pool_token(rows: Array, policy: str) -> Array:
    """Collapse per-token rows ``(T, d)`` to one vector via the token policy."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValidationError(f"expected per-token rows of shape (T, d), got {rows.shape}")
    if policy == "first":
        return rows[0].copy()
    if policy == "last":
        return rows[-1].copy()
    if policy == "mean":
        return rows.mean(axis=0)
    raise ValidationError(f"token_policy must be one of {TOKEN_POLICIES}, got {policy!r}")


def probe(
    backbone: Backbone,
    pool: AdapterPool,
    tokens: Sequence[int],
    config: SignalConfig = SignalConfig(),
) -> SignalReport:
    """Score every pool adapter with a single instrumented forward pass.

    All adapters are attached at their own alpha for the duration of the
    pass, so the hidden states feeding the captured block reflect the fully
    loaded model.  The pool is snapshotted first: the report is pinned to one
    revision no matter what happens to the pool afterwards.
    """
    revision, adapters = pool.snapshot()
    if not adapters:
        raise EmptyPoolError("probe requires at least one adapter in the pool")
    target = config.resolve_block(backbone.config.n_blocks)

    captured: dict[str, Array] = {}
    hooks = _probe_hooks(adapters, target, captured)
    backbone.forward(tokens, hooks)

    entries = []
    for adapter in adapters:
        pooled = mean_pool_token(captured[adapter.id], config.token_policy)
        entries.append(
            SignalEntry(
                adapter_id=adapter.id,
                output=pooled,
                score=_SCORE_FNS[config.scoring](pooled),
            )
        )
    return SignalReport(
        pool_revision=revision,
        target_block=target,
        token_policy=config.token_policy,
        scoring=config.scoring,
        entries=tuple(entries),
    )


def _probe_hooks(
    adapters: Sequence[LoraAdapter],
    target_block: int,
    captured: dict[str, Array],
) -> list[ProjectionHook]:
    """All-adapter hooks that also record per-adapter deltas at the target."""
    n_blocks = adapters[0].n_blocks
    hooks: list[ProjectionHook] = []
    for j in range(n_blocks):
        for site in HOOK_SITES:
            capture_here = j == target_block and site == PROBE_SITE

            def fn(
                block: int,
                site_: str,
                h: Array,
                base: Array,
                _capture: bool = capture_here,
            ) -> Array:
                total: Array | None = None
                for adapter in adapters:
                    d = delta_apply(adapter, block, site_, h)
                    if _capture:
                        captured[adapter.id] = d
                    total = d if total is None else total + d
                return total if total is not None else np.zeros_like(base)

            hooks.append(ProjectionHook(j, site, fn))
    return hooks


# -- report serialization -----------------------------------------------------


def report_to_text(report: SignalReport, include_outputs: bool = False) -> str:
    """Line-oriented rendering: a key=value header, then one line per adapter.

    Each adapter line is ``id score [output components...]``; components are
    included only when ``include_outputs`` is set.  Floats are written with
    ``repr`` so parsing them back is lossless.
    """
    lines = [
        f"pool_revision={report.pool_revision} "
        f"token_policy={report.token_policy} "
        f"target_block={report.target_block} "
        f"scoring={report.scoring}"
    ]
    for e in report.entries:
        parts = [e.adapter_id, repr(e.score)]
        if include_outputs:
            parts.extend(repr(x) for x in e.output.tolist())
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def report_from_text(text: str) -> SignalReport:
    """Parse :func:`report_to_text` output back into a report.

    Entries without serialized outputs get an empty output vector of length
    zero stored as shape ``(0,)``.
    """
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise ValidationError("empty signal report text")
    header: dict[str, str] = {}
    for item in lines[0].split():
        if "=" not in item:
            raise ValidationError(f"malformed report header item {item!r}")
        key, value = item.split("=", 1)
        header[key] = value
    try:
        revision = int(header["pool_revision"])
        policy = header["token_policy"]
        target = int(header["target_block"])
        scoring = header["scoring"]
    except KeyError as exc:
        raise ValidationError(f"report header missing field {exc}") from exc

    entries = []
    for line in lines[1:]:
        parts = line.split()
        if len(parts) < 2:
            raise ValidationError(f"malformed report entry {line!r}")
        output = np.asarray([float(x) for x in parts[2:]], dtype=np.float64)
        entries.append(SignalEntry(parts[0], output, float(parts[1])))
    return SignalReport(
        pool_revision=revision,
        target_block=target,
        token_policy=policy,
        scoring=scoring,
        entries=tuple(entries),
    )
