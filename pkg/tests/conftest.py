import os
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def benchmark_cfg():
    from hsfusion.config import load_config

    return load_config(CONFIGS / "benchmark.ini")


@pytest.fixture(scope="session")
def benchmark_run(tmp_path_factory, benchmark_cfg):
    """Simulate, train and evaluate the seeded benchmark once per session."""
    from hsfusion import pipeline

    out = tmp_path_factory.mktemp("benchmark")
    dataset = pipeline.simulate(benchmark_cfg, out)
    bundle, state = pipeline.train(benchmark_cfg, dataset, out, plots=False)
    rows = pipeline.evaluate(benchmark_cfg, out / pipeline.CHECKPOINT_FILE, dataset, out, plots=False)
    _, splits = pipeline.load_data(dataset, benchmark_cfg)
    detector = pipeline.calibrate(benchmark_cfg, bundle, splits["train"])
    return {"out": out, "dataset": dataset, "bundle": bundle, "state": state, "rows": rows,
            "splits": splits, "detector": detector}


@pytest.fixture(scope="session")
def trained_variant(tmp_path_factory, benchmark_run):
    """Train a shipped config with overridden loss weights, once per distinct request."""
    import dataclasses

    from hsfusion import pipeline
    from hsfusion.config import load_config

    cache = {}

    def get(config_name, **loss):
        key = (config_name, tuple(sorted(loss.items())))
        if key not in cache:
            cfg = load_config(CONFIGS / config_name)
            cfg = dataclasses.replace(cfg, loss=dataclasses.replace(cfg.loss, **loss))
            out = tmp_path_factory.mktemp("variant")
            dataset = benchmark_run["dataset"] if config_name == "benchmark.ini" else pipeline.simulate(cfg, out)
            cache[key] = pipeline.train(cfg, dataset, out, plots=False)
        return cache[key]

    return get


def pytest_terminal_summary(terminalreporter):
    from tests import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.report():
            terminalreporter.write_line(line)
