import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pipecraft.schedules import (
    ScheduleError,
    TaskId,
    dump_schedule,
    gpipe,
    interleaved_1f1b,
    load_schedule,
    one_f_one_b,
    validate,
)


def f(i, s):
    return TaskId(i, "fwd", s)


def b(i, s):
    return TaskId(i, "bwd", s)


class TestGpipe:
    def test_definitional_ordering(self):
        s = gpipe(2, 2)
        assert s.per_actor[0] == (f(0, 0), f(1, 0), b(0, 0), b(1, 0))
        assert s.per_actor[1] == (f(0, 1), f(1, 1), b(0, 1), b(1, 1))

    def test_single_actor(self):
        s = gpipe(1, 3)
        assert s.per_actor[0] == (f(0, 0), f(1, 0), f(2, 0), b(0, 0), b(1, 0), b(2, 0))
        assert validate(s).ok

    def test_rejects_nonpositive(self):
        with pytest.raises(ScheduleError):
            gpipe(0, 4)
        with pytest.raises(ScheduleError):
            gpipe(2, 0)


class TestOneFOneB:
    def test_two_by_two(self):
        s = one_f_one_b(2, 2)
        assert s.per_actor[1] == (f(0, 1), b(0, 1), f(1, 1), b(1, 1))
        assert s.per_actor[0] == (f(0, 0), f(1, 0), b(0, 0), b(1, 0))

    def test_single_actor_matches_gpipe_multiset(self):
        assert sorted(one_f_one_b(1, 4).per_actor[0]) == sorted(gpipe(1, 4).per_actor[0])
        assert validate(one_f_one_b(1, 4)).ok

    def test_small_m_degrades_to_gpipe_ordering(self):
        s = one_f_one_b(4, 2)
        assert s.per_actor[0] == (f(0, 0), f(1, 0), b(0, 0), b(1, 0))
        assert validate(s).ok

    def test_warmup_counts(self):
        s = one_f_one_b(4, 8)
        for a in range(4):
            head = s.per_actor[a][:4 - 1 - a]
            assert all(t.ty == "fwd" for t in head)
            nxt = s.per_actor[a][4 - 1 - a:4 - a + 1]
            assert [t.ty for t in nxt] == ["fwd", "bwd"]


class TestInterleaved:
    def test_v1_equals_one_f_one_b(self):
        for P, M in [(1, 1), (2, 4), (4, 8), (3, 6)]:
            assert interleaved_1f1b(P, M, 1).per_actor == one_f_one_b(P, M).per_actor

    def test_stage_ownership(self):
        s = interleaved_1f1b(2, 4, 2)
        assert s.num_stages == 4
        stages0 = {t.stage for t in s.per_actor[0]}
        assert stages0 == {0, 2}
        assert validate(s).ok

    def test_divisibility_required(self):
        with pytest.raises(ScheduleError, match="divisible"):
            interleaved_1f1b(2, 3, 2)

    def test_validates_across_grid(self):
        for P, M, V in [(2, 2, 2), (2, 4, 3), (4, 8, 2), (4, 4, 4), (8, 8, 2)]:
            assert validate(interleaved_1f1b(P, M, V)).ok, (P, M, V)


class TestValidate:
    def test_generated_schedules_are_valid(self):
        assert validate(gpipe(2, 2)).ok

    def test_backward_before_forward_is_a_cycle(self):
        s = gpipe(2, 2)
        actor0 = (b(0, 0), f(0, 0), f(1, 0), b(1, 0))
        bad = type(s)(num_actors=2, num_microbatches=2, num_stages=2,
                      per_actor=(actor0, s.per_actor[1]))
        rep = validate(bad)
        assert any("dependency cycle" in v for v in rep.violations)

    def test_colocation_violation(self):
        # b(0,1) placed on actor 0 while stage 1 lives on actor 1.
        per0 = (f(0, 0), f(1, 0), b(0, 0), b(1, 0), b(0, 1))
        per1 = (f(0, 1), f(1, 1), b(1, 1))
        bad = type(gpipe(2, 2))(num_actors=2, num_microbatches=2, num_stages=2,
                                per_actor=(per0, per1))
        rep = validate(bad)
        assert any("co-location" in v for v in rep.violations)

    def test_duplicate_and_missing(self):
        per0 = (f(0, 0), f(0, 0), b(0, 0))
        bad = type(gpipe(1, 1))(num_actors=1, num_microbatches=1, num_stages=1,
                                per_actor=(per0,))
        rep = validate(bad)
        assert any("appears twice" in v for v in rep.violations)

    @settings(max_examples=60, deadline=None)
    @given(P=st.integers(1, 8), M=st.integers(1, 64))
    def test_gpipe_and_1f1b_always_valid(self, P, M):
        assert validate(gpipe(P, M)).ok
        assert validate(one_f_one_b(P, M)).ok

    @settings(max_examples=60, deadline=None)
    @given(P=st.integers(1, 8), mult=st.integers(1, 8), V=st.integers(1, 8))
    def test_interleaved_always_valid(self, P, mult, V):
        M = P * mult
        assert validate(interleaved_1f1b(P, M, V)).ok

    def test_task_multiset_identical_across_families(self):
        for P, M in [(2, 4), (4, 8)]:
            ref = {t for acts in gpipe(P, M).per_actor for t in acts}
            assert {t for acts in one_f_one_b(P, M).per_actor for t in acts} == ref
            assert {t for acts in interleaved_1f1b(P, M, 1).per_actor for t in acts} == ref


class TestScheduleFile:
    def test_round_trip(self, tmp_path):
        s = interleaved_1f1b(2, 4, 2)
        path = tmp_path / "sched.json"
        dump_schedule(s, path)
        loaded = load_schedule(path)
        assert loaded.per_actor == s.per_actor
        assert loaded.circular_repeat == 2

    def test_listing_style_file(self, tmp_path):
        # Two actors owning stages {0,2} and {1,3}: circular repeat of 2.
        s = interleaved_1f1b(2, 2, 2)
        doc = {"actors": [[{"i": t.i, "ty": t.ty, "stage": t.stage} for t in acts]
                          for acts in s.per_actor]}
        path = tmp_path / "listing.json"
        path.write_text(json.dumps(doc))
        loaded = load_schedule(path)
        assert loaded.num_actors == 2
        assert loaded.circular_repeat == 2
        assert {t.stage for t in loaded.per_actor[0]} == {0, 2}

    def test_empty_actsince_list_rejected(self, tmp_path):
        path = tmp_path / "empty.json"
        path.write_text(json.dumps({"actors": []}))
        with pytest.raises(ScheduleError, match="actor count"):
            load_schedule(path)

    def test_duplicate_task_rejected(self, tmp_path):
        doc = {"actors": [[{"i": 0, "ty": "fwd", "stage": 0},
                           {"i": 0, "ty": "fwd", "stage": 0},
                           {"i": 0, "ty": "bwd", "stage": 0}]]}
        path = tmp_path / "dup.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ScheduleError, match="appears twice"):
            load_schedule(path)

    def test_parse_error(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{nope")
        with pytest.raises(ScheduleError):
            load_schedule(path)
