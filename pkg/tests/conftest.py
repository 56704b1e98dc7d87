import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repo", max_examples=50, deadline=None)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    """Small model config plus a matching 24-sample dataset."""
    from limssr.data import SyntheticConfig, generate
    from limssr.model import ModelConfig

    dims = {"v": 5, "f": 4, "a": 3}
    ds = generate(SyntheticConfig(num_samples=24, T=3, latent_dim=3, dims=dims, seed=2))
    mc = ModelConfig(dims=dims, T=3, K=3, num_layers=1, num_heads=2, model_dim=16, ffn_dim=32,
                     lora_rank=4, lora_alpha=8.0, mda_hidden=8, mda_heads=2, seed=1)
    return mc, ds


ACCEPTANCE_LINES = []


@pytest.fixture
def record():
    """record(n, ok, detail) stores one acceptance line for the terminal summary."""

    def _record(n, ok, detail):
        line = f"acceptance {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


REMOVAL_ROWS = ("full", "wo_pcmi", "wo_lmrf", "wo_con", "wo_reg")
SEEDS = (1, 2, 3)


@pytest.fixture(scope="session")
def removal_suite():
    """Default synthetic split (512 / 128), seeds 1-3, full model and its single removals.

    Returns ({row: {seed: RunResult}}, {row: seconds}).
    """
    import time

    from limssr.config import RunConfig
    from limssr.data import generate_split
    from limssr.experiment import run
    from limssr.training import suite_rows

    rc = RunConfig()
    train_ds, test_ds = generate_split(rc.synthetic(), rc.n_train, rc.n_test)
    mc = rc.model(dims=train_ds.dims, T=train_ds.T)
    results, seconds = {}, {}
    for name, m, t in suite_rows("removals", mc, rc.train()):
        t0 = time.time()
        results[name] = {}
        for seed in SEEDS:
            from dataclasses import replace

            results[name][seed] = run(m, replace(t, seed=seed), train_ds, test_ds)
        seconds[name] = time.time() - t0
    return results, seconds
