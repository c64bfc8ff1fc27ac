import math

import pytest

from fedprune.errors import ConfigError
from fedprune.schedule import (LossHistory, PruneSchedule, default_schedules, expected_prune_events,
                               hard_gates_open, should_prune)

T = 40


def _history(losses, since=None):
    h = LossHistory()
    for loss in losses:
        h.record(loss)
    h.rounds_since_prune = since
    return h


def _open(**kw):
    return PruneSchedule("iterative", 0.25, 0.80, **kw)


class TestGates:
    def test_warmup(self):
        assert not should_prune(_open(), _history([1.0]), 0, T, 0.0)
        assert not should_prune(_open(), _history([1.0]), 1, T, 0.0)
        assert should_prune(_open(), _history([1.0]), 2, T, 0.0)

    def test_final_freeze(self):
        assert not should_prune(_open(), _history([1.0]), T - 1, T, 0.0)
        assert not should_prune(_open(), _history([1.0]), T - 3, T, 0.0)
        assert should_prune(_open(), _history([1.0]), T - 4, T, 0.0)

    def test_recovery_band(self):
        assert should_prune(_open(), _history([1.0, 1.10]), 5, T, 0.0)
        assert not should_prune(_open(), _history([1.0, 1.20]), 5, T, 0.0)

    def test_target_reached(self):
        assert not should_prune(_open(), _history([1.0]), 5, T, 0.80)
        assert should_prune(_open(), _history([1.0]), 5, T, 0.75)

    def test_min_recovery_rounds(self):
        assert not should_prune(_open(), _history([1.0], since=2), 10, T, 0.25)
        assert should_prune(_open(), _history([1.0], since=3), 10, T, 0.25)

    def test_one_shot_only_once(self):
        s = default_schedules()["one_shot"]
        h = _history([1.0])
        assert should_prune(s, h, 2, T, 0.0)
        h.mark_pruned()
        h.rounds_since_prune = 20
        assert not should_prune(s, h, 25, T, 0.0)

    def test_none_never_prunes(self):
        s = default_schedules()["none"]
        assert s.rate == 0.0
        assert not any(should_prune(s, _history([1.0]), t, T, 0.0) for t in range(T))

    def test_no_loss_yet(self):
        assert not should_prune(_open(), LossHistory(), 5, T, 0.0)

    def test_pure(self):
        h = _history([1.0, 0.9])
        before = (list(h.losses), h.loss_best, h.rounds_since_prune)
        should_prune(_open(), h, 5, T, 0.0)
        assert (h.losses, h.loss_best, h.rounds_since_prune) == before

    def test_hard_gates_ignore_loss(self):
        assert hard_gates_open(_open(), 5, T, 0.0)
        assert not hard_gates_open(_open(), 1, T, 0.0)


class TestHistory:
    def test_running_min(self):
        h = _history([3.0, 1.0, 2.0])
        assert h.loss_best == 1.0

    def test_prune_resets_counter(self):
        h = _history([1.0])
        h.mark_pruned()
        assert h.rounds_since_prune == 0 and h.prune_events == 1
        h.record(1.0)
        h.record(1.0)
        assert h.rounds_since_prune == 2


class TestDefaults:
    def test_values(self):
        d = default_schedules()
        assert (d["iterative"].rate, d["iterative"].target_sparsity, d["iterative"].min_recovery_rounds) == (0.25, 0.80, 3)
        lt = d["iterative_lt"]
        assert (lt.rate, lt.target_sparsity, lt.min_recovery_rounds, lt.lth_reset) == (0.415, 0.80, 7, True)
        assert (d["one_shot"].rate, d["one_shot"].target_sparsity, d["one_shot"].lth_reset) == (0.70, 0.70, False)
        assert d["one_shot_lt"].lth_reset
        for s in d.values():
            assert (s.warmup_rounds, s.final_freeze, s.recovery_factor) == (2, 3, 1.15)

    @pytest.mark.parametrize("kw", [dict(rate=0.0), dict(rate=1.0), dict(target_sparsity=1.0),
                                    dict(warmup_rounds=-1), dict(recovery_factor=0.9)])
    def test_validation(self, kw):
        with pytest.raises(ConfigError):
            _open().with_overrides(**kw)

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            PruneSchedule("random")


class TestExpectedEvents:
    def test_iterative(self):
        assert 1 - 0.75 ** 5 < 0.80 < 1 - 0.75 ** 6
        assert expected_prune_events(default_schedules()["iterative"]) == 6

    def test_lt(self):
        assert expected_prune_events(default_schedules()["iterative_lt"]) == 3

    def test_one_shot(self):
        assert expected_prune_events(default_schedules()["one_shot"]) == 1

    def test_none(self):
        with pytest.raises(ConfigError):
            expected_prune_events(default_schedules()["none"])


def simulate(schedule, n_weights=10_000, rounds=T):
    """Drive the gate with always-recovering losses and floor-rounded pruning."""
    h = LossHistory()
    surviving = n_weights
    for t in range(rounds):
        h.record(1.0)
        sp = 1 - surviving / n_weights
        if should_prune(schedule, h, t, rounds, sp):
            surviving -= math.floor(schedule.rate * surviving)
            h.mark_pruned()
    return h.prune_events, 1 - surviving / n_weights


@pytest.mark.parametrize("variant", ["iterative", "iterative_lt", "one_shot", "one_shot_lt"])
def test_simulated_run(variant):
    s = default_schedules()[variant]
    events, final = simulate(s)
    assert abs(events - expected_prune_events(s)) <= 1
    if s.one_shot:
        assert events == 1
        assert abs(final - 0.70) <= 1e-4
    else:
        assert s.target_sparsity - 1e-3 <= final <= s.target_sparsity + s.rate * (1 - s.target_sparsity)
