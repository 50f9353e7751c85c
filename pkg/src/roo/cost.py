"""Analytic and measured cost accounting.

The analytic side prices a self-attention sequential encoder over a user
history of length n with m target items at model width d, counting a
multiply-add as 2 FLOPs and excluding softmax normalization:

  * impression execution runs the encoder once per target over the history:
    m * (n^2 d + n d^2)
  * request execution runs it once over history plus targets:
    (n + m)^2 d + (n + m) d^2

The measured side merges forward-pass counters from a request-mode run and
its impression-mode twin into one report. Communication is modeled as
embedding bytes moved: rows fetched x d x 4.
"""

from __future__ import annotations

from dataclasses import dataclass

from .batcher import JaggedBatch
from .model import Counters


@dataclass(frozen=True)
class CostReport:
    impression_flops: int
    roo_flops: int
    savings_ratio: float
    rows_fetched_roo: int
    rows_fetched_impression: int
    bytes_comm_roo: int
    bytes_comm_impression: int
    b_ro: int
    b_nro: int

    def to_dict(self) -> dict:
        return {
            "impression_flops": self.impression_flops,
            "roo_flops": self.roo_flops,
            "savings_ratio": self.savings_ratio,
            "rows_fetched_roo": self.rows_fetched_roo,
            "rows_fetched_impression": self.rows_fetched_impression,
            "bytes_comm_roo": self.bytes_comm_roo,
            "bytes_comm_impression": self.bytes_comm_impression,
            "b_ro": self.b_ro,
            "b_nro": self.b_nro,
        }


def impression_seq_cost(n: int, m: int, d: int) -> int:
    """Encoder FLOPs when every target reruns the history: m(n^2 d + n d^2)."""
    if min(n, m, d) < 0:
        raise ValueError("n, m, d must be non-negative")
    return m * (n * n * d + n * d * d)


def roo_seq_cost(n: int, m: int, d: int) -> int:
    """Encoder FLOPs over one joint sequence: (n+m)^2 d + (n+m) d^2."""
    if min(n, m, d) < 0:
        raise ValueError("n, m, d must be non-negative")
    s = n + m
    return s * s * d + s * d * d


def seq_savings_ratio(n: int, m: int, d: int) -> float:
    """impression cost / request cost for the same workload."""
    denom = roo_seq_cost(n, m, d)
    if denom == 0:
        raise ZeroDivisionError(f"request-mode cost is zero for n={n}, m={m}, d={d}")
    return impression_seq_cost(n, m, d) / denom


def dedup_ratio(batch: JaggedBatch) -> float:
    """Impression rows per request row; the RO-side work multiplier."""
    return batch.b_nro / batch.b_ro


def measure_run(
    roo_counters: Counters,
    impression_counters: Counters,
    b_ro: int,
    b_nro: int,
    d: int,
) -> CostReport:
    """Merge counters from the two executions of one workload."""
    if roo_counters.run_id != impression_counters.run_id:
        raise ValueError(
            f"counters come from different runs: "
            f"{roo_counters.run_id!r} vs {impression_counters.run_id!r}"
        )
    rows_roo = roo_counters.total_rows_ro() + roo_counters.total_rows_nro()
    rows_imp = impression_counters.total_rows_ro() + impression_counters.total_rows_nro()
    return CostReport(
        impression_flops=impression_counters.flops,
        roo_flops=roo_counters.flops,
        savings_ratio=impression_counters.flops / roo_counters.flops
        if roo_counters.flops
        else float("inf"),
        rows_fetched_roo=rows_roo,
        rows_fetched_impression=rows_imp,
        bytes_comm_roo=rows_roo * d * 4,
        bytes_comm_impression=rows_imp * d * 4,
        b_ro=b_ro,
        b_nro=b_nro,
    )
