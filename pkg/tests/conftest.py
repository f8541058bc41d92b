import pytest

from portrait_nerf.data import DatasetConfig, gen_dataset, save_dataset

TINY = DatasetConfig(n_subjects=3, holdout=1, grid_rows=3, grid_cols=3, width=16, height=16, oracle_samples=64, seed=3)


@pytest.fixture(scope="session")
def tiny_dataset():
    return gen_dataset(TINY)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tiny_dataset, tmp_path_factory):
    path = tmp_path_factory.mktemp("tiny") / "ds"
    save_dataset(tiny_dataset, path)
    return path


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
