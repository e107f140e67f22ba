"""Deterministic benchmark harness over the mock-engine service.

Replays a seeded synthetic workload through the full pipeline and emits a
stable, diff-friendly report: latency percentiles (simulated engine time,
so reports are byte-identical run to run), cache hit rate, a continuous
versus static batching comparison, and a tiled-versus-naive attention
residual check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ServiceConfig
from .runtime import GenRequest, TickCostModel, naive_attention, simulate_batching, tiled_attention
from .service import MedService

_PHRASES = (
    "what is the correct dose of {}",
    "how should i treat {}",
    "is {} an emergency right now",
    "how can i prevent {}",
    "what causes {} and what does it mean",
    "which tests diagnose {}",
)

_TERMS = (
    "ibuprofen", "aspirin", "metformin", "insulin", "hypertension",
    "diabetes", "asthma", "migraine", "chest pain", "stroke",
    "fever", "anemia", "flu", "allergy", "bronchitis",
    "eczema", "gout", "arthritis", "pneumonia", "sepsis",
)


@dataclass(frozen=True)
class BenchSpec:
    requests: int = 100
    unique: int = 40
    seed: int = 7

    def __post_init__(self):
        if self.requests < 1 or self.unique < 1:
            raise ValueError("requests and unique must be >= 1")


def synthetic_queries(spec: BenchSpec) -> list[str]:
    """A seeded request stream drawn from a bounded pool of unique queries."""
    rng = np.random.default_rng(spec.seed)
    pool = []
    while len(pool) < spec.unique:
        phrase = _PHRASES[int(rng.integers(len(_PHRASES)))]
        term = _TERMS[int(rng.integers(len(_TERMS)))]
        query = phrase.format(term)
        if query not in pool:
            pool.append(query)
    picks = rng.integers(0, len(pool), size=spec.requests)
    return [pool[i] for i in picks]


@dataclass
class BenchReport:
    spec: BenchSpec
    engine_id: str
    mode: str
    hit_rate: float
    memory_hits: int
    disk_hits: int
    misses: int
    p50_ms: float
    p95_ms: float
    mean_ms: float
    total_simulated_s: float
    continuous_makespan_s: float
    static_makespan_s: float
    attention_residual: float

    def text(self) -> str:
        lines = [
            "medserve bench report",
            f"workload: requests={self.spec.requests} unique={self.spec.unique} seed={self.spec.seed}",
            f"engine: {self.engine_id} mode={self.mode}",
            f"cache: hit_rate={self.hit_rate:.4f} memory={self.memory_hits} "
            f"disk={self.disk_hits} misses={self.misses}",
            f"latency_ms(simulated): p50={self.p50_ms:.4f} p95={self.p95_ms:.4f} "
            f"mean={self.mean_ms:.4f}",
        ]
        if self.total_simulated_s > 0:
            lines.append(
                f"throughput: {self.spec.requests / self.total_simulated_s:.4f} req/s (simulated)"
            )
        else:
            lines.append("throughput: n/a (zero simulated time)")
        speedup = self.static_makespan_s / self.continuous_makespan_s
        lines.append(
            f"batching: continuous={self.continuous_makespan_s:.4f}s "
            f"static={self.static_makespan_s:.4f}s speedup={speedup:.4f}x"
        )
        lines.append(f"attention: max|tiled-naive|={self.attention_residual:.3e}")
        return "\n".join(lines) + "\n"


def run_bench(config: ServiceConfig, spec: BenchSpec = BenchSpec()) -> BenchReport:
    """Replay the workload with the mock engine and collect the report."""
    service = MedService(config)
    try:
        queries = synthetic_queries(spec)
        latencies = []
        for query in queries:
            response = service.handle_query(query)
            latencies.append(response.simulated_ms)
        stats = service.cache.stats
        hits = stats.memory_hits + stats.disk_hits
        latencies = np.array(latencies)

        rng = np.random.default_rng(spec.seed)
        lengths = rng.integers(10, 201, size=spec.requests)
        requests = [GenRequest(id=f"r{i}", output_tokens=int(n)) for i, n in enumerate(lengths)]
        cost = TickCostModel()
        continuous = simulate_batching(requests, capacity=8, policy="continuous", cost=cost)
        static = simulate_batching(requests, capacity=8, policy="static", cost=cost)

        q = rng.normal(size=(8, 12))
        k = rng.normal(size=(10, 12))
        v = rng.normal(size=(10, 6))
        residual = float(np.max(np.abs(tiled_attention(q, k, v, tile=4) - naive_attention(q, k, v))))

        return BenchReport(
            spec=spec,
            engine_id=service.engine_id,
            mode=service.mode,
            hit_rate=hits / spec.requests,
            memory_hits=stats.memory_hits,
            disk_hits=stats.disk_hits,
            misses=stats.misses,
            p50_ms=float(np.percentile(latencies, 50)),
            p95_ms=float(np.percentile(latencies, 95)),
            mean_ms=float(latencies.mean()),
            total_simulated_s=float(latencies.sum() / 1000.0),
            continuous_makespan_s=continuous.elapsed,
            static_makespan_s=static.elapsed,
            attention_residual=residual,
        )
    finally:
        service.close()
