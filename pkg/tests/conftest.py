import numpy as np
import pytest

from cranisynth.phantom import PhantomSpec, generate_subject


@pytest.fixture(scope="session")
def subject32():
    return generate_subject(PhantomSpec(seed=11, age_days=300, grid=32))


@pytest.fixture(scope="session")
def aligned48():
    return generate_subject(PhantomSpec(seed=5, age_days=250, grid=48, misalign=False))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(root, **changes):
    from cranisynth.pipeline import ExperimentConfig

    base = dict(data_dir=str(root / "data"), out_dir=str(root / "runs"), n_subjects=10, grid=(32, 32, 32),
                epochs=2, finetune_epochs=1, network={"base_channels": 4, "latent_channels": 2})
    base.update(changes)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def smoke(tmp_path_factory):
    """A complete two-epoch run on ten 32^3 subjects: (config, evaluation directory)."""
    from cranisynth.pipeline import run_all

    cfg = small_config(tmp_path_factory.mktemp("smoke"))
    return cfg, run_all(cfg)


# one (criterion, passed, detail) entry per acceptance criterion, printed at the end of the session
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
