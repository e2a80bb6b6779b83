import numpy as np
import pytest

from predbranch.config import TrainConfig
from predbranch.synthdata import DatasetSpec, generate_dataset
from predbranch.trainer import pretrain_stage


@pytest.fixture(scope="session")
def small_ds():
    return generate_dataset(DatasetSpec(A=8, P=6, n_train=800, n_test=320, imbalance_exponent=1.0,
                                        noise_scale=0.5, scene_size=16, seed=3))


@pytest.fixture(scope="session")
def small_cfg():
    return TrainConfig(total_iters=200, warmup_iters=20, batch_size=16, seed=1)


@pytest.fixture(scope="session")
def small_pre(small_ds, small_cfg):
    return pretrain_stage(small_ds, small_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Acceptance criteria report: test_acceptance records one line per criterion here.
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
