from dataclasses import replace

import pytest
from threadpoolctl import threadpool_limits

from tskd.data import TaskSpec
from tskd.harness.config import ExperimentConfig
from tskd.harness.experiments import Experiment
from tskd.models import EncoderSpec


@pytest.fixture(scope="session", autouse=True)
def single_threaded_blas():
    with threadpool_limits(limits=1):
        yield


def tiny_config(**overrides) -> ExperimentConfig:
    """A config that trains in well under a second per run."""
    cfg = ExperimentConfig()
    cfg.task = TaskSpec(
        d_in=16,
        latent_dim=4,
        n_super=2,
        classes_per_super=2,
        train_per_class=10,
        val_per_class=10,
        test_per_class=30,
        pretrain_per_super=300,
        pretrain_classes_per_super=3,
        noise=0.5,
        obs_noise=0.3,
        warp_width=16,
    )
    cfg.teacher_encoder = EncoderSpec(16, [48], 16)
    cfg.student_encoder = EncoderSpec(16, [8], 8)
    cfg.pretrain_teacher = replace(cfg.pretrain_teacher, epochs=5)
    cfg.pretrain_student = replace(cfg.pretrain_student, epochs=1)
    cfg.probe = replace(cfg.probe, epochs=5)
    cfg.finetune = replace(cfg.finetune, epochs=5)
    cfg.distill = replace(cfg.distill, epochs=5)
    cfg.multiplier = 2
    cfg.seeds = [0, 1]
    cfg.teacher_seeds = [0, 1]
    cfg.runs_per_teacher = 2
    cfg.procedures = ["probe-student", "finetune-student", "distill", "distill+sd"]
    for key, value in overrides.items():
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


@pytest.fixture(scope="session")
def tiny_experiment() -> Experiment:
    return Experiment(tiny_config())


def default_paired_config() -> ExperimentConfig:
    """Default task and models, five paired teacher/student seeds."""
    cfg = ExperimentConfig()
    cfg.seeds = [0, 1, 2, 3, 4]
    cfg.teacher_seeds = [0, 1, 2, 3, 4]
    cfg.runs_per_teacher = None
    cfg.pairing = "paired"
    cfg.procedures = ["probe-teacher", "finetune-student", "distill", "distill+sd"]
    return cfg


@pytest.fixture(scope="session")
def default_experiment() -> Experiment:
    return Experiment(default_paired_config())


# one summary line per acceptance criterion
_CRITERIA: dict[str, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        number = marker.args[0]
        failed = not report.passed or _CRITERIA.get(number) == "FAIL"
        _CRITERIA[number] = "FAIL" if failed else "PASS"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA, key=int):
        terminalreporter.write_line(f"criterion {number:>2}: {_CRITERIA[number]}")
