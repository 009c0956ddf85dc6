import pytest

from acceptance_log import RESULTS


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in RESULTS:
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def reference_model(tmp_path_factory):
    """Thirty-subject ellipsoid cohort at 0.5 mm run through ingest to SSM.

    Returns the output directory and the pipeline report.
    """
    from kneessm.pipeline import config_from_dict, run_pipeline
    from kneessm.synthetic import write_ellipsoid_cohort

    root = tmp_path_factory.mktemp("reference")
    subjects = write_ellipsoid_cohort(root / "cohort", n_subjects=30, seed=0, spacing=0.5)
    cfg = config_from_dict({
        "inputs": {"subjects": subjects},
        "output_dir": str(root / "out"),
        "condition": {"n_points": 800},
        "template": {"n_points": 300},
        "register": {"lambda": 1000.0},
        "stages": {"metrics": False, "materials": False},
    })
    return cfg.output_dir, run_pipeline(cfg)
