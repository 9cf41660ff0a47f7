import time

import pytest

from utils.errors import UsageError
from utils.gradcheck_suite import CASES, SAMPLED_ELEMENTS, run_suite


def test_every_case_passes_within_a_minute():
    started = time.perf_counter()
    results = run_suite(seed=0)
    elapsed = time.perf_counter() - started
    assert {r.name for r in results} == set(CASES)
    failed = [(r.name, r.max_error) for r in results if not r.passed]
    assert not failed
    assert elapsed < 60.0


def test_groups_cover_the_stack():
    assert {case.group for case in CASES.values()} == {"op", "encoder", "loss", "objective"}


def test_encoder_cases_sample_elements():
    sampled = run_suite(seed=5, names=["encode_video"])[0]
    full = run_suite(seed=5, names=["encode_video"], exhaustive=True)[0]
    assert sampled.passed and full.passed
    # one extra element per leaf at most
    assert SAMPLED_ELEMENTS <= sampled.elements < full.elements
    assert run_suite(seed=5, names=["matmul"])[0].elements == 3 * 4 + 4 * 2


def test_selected_cases_and_instances():
    results = run_suite(seed=3, instances=2, names=["softmax_temp_dot", "orth_loss"])
    assert [(r.name, r.instance) for r in results] == [
        ("softmax_temp_dot", 0), ("softmax_temp_dot", 1), ("orth_loss", 0), ("orth_loss", 1)]
    assert all(r.passed for r in results)


def test_unknown_case():
    with pytest.raises(UsageError, match="no_such_op"):
        run_suite(names=["no_such_op"])


@pytest.mark.slow
def test_many_random_points():
    results = run_suite(seed=1, instances=50, names=["retrieve_fuse_project", "stage2_objective"])
    assert all(r.passed for r in results)


@pytest.mark.slow
def test_hundred_instances_per_operation():
    names = [name for name, case in CASES.items() if case.group in ("op", "loss")]
    results = run_suite(seed=2, instances=100, names=names)
    assert len(results) == 100 * len(names)
    failed = sorted({r.name for r in results if not r.passed})
    assert not failed
