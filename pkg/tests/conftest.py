from pathlib import Path

import pytest

BENCHMARK_CACHE = Path(__file__).resolve().parents[1] / "results" / "benchmark.json"


@pytest.fixture(scope="session")
def benchmark():
    """Pinned synthetic benchmark, resumed from (or written to) results/benchmark.json.

    A cold run trains 72 leave-one-out folds and takes hours on one CPU core.
    """
    from mtmdseg.benchmark import BenchmarkConfig, run_benchmark
    cfg = BenchmarkConfig()
    return cfg, run_benchmark(cfg, BENCHMARK_CACHE)
