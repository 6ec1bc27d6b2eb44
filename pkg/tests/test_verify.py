from src.kvserve.services.simulator import Mode
from src.kvserve.services.verify import (
    end_to_end_deviation,
    logit_gap,
    replay_modes,
    run_oracle_suite,
    split_point_trials,
    toy_value_trace,
)


def test_incremental_matches_full_recompute():
    assert split_point_trials(10, seed=1) <= 1e-9


def test_injected_fault_is_detected():
    assert split_point_trials(3, seed=1, inject_fault=True) > 1e-5


def test_end_to_end_modes_agree_with_recompute():
    assert end_to_end_deviation(40, seed=2) <= 1e-9


def test_thousand_request_replay_matches_recompute_through_evictions():
    runs = replay_modes(toy_value_trace(1000, seed=3))

    assert logit_gap(runs) <= 1e-5
    hierarchical = runs[Mode.HIERARCHICAL].finish()
    assert hierarchical.num_requests == 1000
    assert hierarchical.evictions > 0
    assert hierarchical.tail_tokens_lost > 0
    assert hierarchical.host_served_tokens > 0
    assert runs[Mode.GPU_ONLY].finish().evictions > 0


def test_suite_result_payload():
    result = run_oracle_suite(4, seed=0, tolerance=1e-5, end_to_end_requests=20)

    assert result.passed
    assert not result.vacuous
    payload = result.to_dict()
    assert payload["trials"] == 4
    assert payload["end_to_end_requests"] == 20
    assert payload["passed"] is True


def test_zero_trials_is_vacuous():
    result = run_oracle_suite(0, seed=0, tolerance=1e-5, end_to_end_requests=0)

    assert result.vacuous
    assert result.passed
    assert result.max_deviation == 0.0


def test_faulty_suite_fails():
    result = run_oracle_suite(3, seed=0, tolerance=1e-5, end_to_end_requests=0, inject_fault=True)

    assert not result.passed
