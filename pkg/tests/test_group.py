import json
import random
import threading
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from privneg import messages as m
from privneg.errors import BadValue, CombinatorialLimit, EmptyGroup, RaggedMatrix, UnknownUser
from privneg.group import (
    BoundaryVector,
    CandidatePolicy,
    GroupMatrix,
    GroupSession,
    Verdict,
    aggregate_least_misery,
    binding_users,
    candidate_count,
    enumerate_candidates,
    load_group,
    optimize,
    parse_group,
    pareto_front,
    score,
)
from privneg.policy import FormFactorSet, Retention, is_at_most_as_permissive
from privneg.utility import ScoringModel

from oracles import brute_force, meet_oracle
from strategies import factor_sets

FIXTURES = Path(__file__).parent / "fixtures"
MODEL = ScoringModel()
R = Retention


def ffs(t, r=R.NONE, s=False, i=False):
    return FormFactorSet(t, r, s, i)


@st.composite
def matrices(draw, max_sensors=3, max_users=5):
    sensors = draw(st.lists(st.sampled_from(["image", "video", "temperature", "audio"]),
                            min_size=1, max_size=max_sensors, unique=True))
    users = [f"u{k}" for k in range(draw(st.integers(1, max_users)))]
    rows = {u: [draw(factor_sets(s)) for s in sensors] for u in users}
    return GroupMatrix.from_rows(sensors, rows)


class TestLeastMisery:
    def test_retention_example(self):
        session = load_group(FIXTURES / "group_retention.xml")
        boundary = session.run().boundary
        assert boundary["video"].retention is R.ONE_MONTH

    @settings(max_examples=200)
    @given(matrices())
    def test_boundary_is_meet(self, matrix):
        boundary = aggregate_least_misery(matrix)
        for k, sensor in enumerate(matrix.sensors):
            column = [matrix.cells[u][k] for u in matrix.users]
            assert boundary[sensor] == meet_oracle(column)
            assert all(is_at_most_as_permissive(boundary[sensor], c) for c in column)

    @given(matrices())
    def test_order_independent(self, matrix):
        shuffled = list(matrix.users)
        random.Random(0).shuffle(shuffled)
        other = GroupMatrix(matrix.sensors, tuple(shuffled), matrix.cells)
        assert aggregate_least_misery(other) == aggregate_least_misery(matrix)

    @given(matrices(), factor_sets("image"))
    def test_adding_a_member_never_loosens(self, matrix, extra):
        if "image" not in matrix.sensors:
            return
        row = [extra if s == "image" else matrix.cells[matrix.users[0]][k] for k, s in enumerate(matrix.sensors)]
        bigger = matrix.with_row("newcomer", row)
        before, after = aggregate_least_misery(matrix), aggregate_least_misery(bigger)
        for s in matrix.sensors:
            assert is_at_most_as_permissive(after[s], before[s])

    def test_empty_group(self):
        with pytest.raises(EmptyGroup):
            aggregate_least_misery(GroupMatrix(("image",), (), {}))

    def test_ragged(self):
        with pytest.raises(RaggedMatrix):
            aggregate_least_misery(GroupMatrix(("image", "video"), ("a",), {"a": (ffs("image"),)}))

    def test_unknown_user(self):
        with pytest.raises(UnknownUser):
            GroupMatrix.from_rows(["image"], {"a": [ffs("image")]}).row("b")


class TestCandidates:
    def test_count_formula(self):
        b = BoundaryVector(("image", "audio"), (ffs("image", R.THREE_MONTH, True, False), ffs("audio")))
        # (3 retentions * 2 shared * 1 inferred * 2 include) * (1 * 1 * 1 * 2)
        assert candidate_count(b) == 12 * 2
        assert len(enumerate_candidates(b)) == 24

    def test_all_within_boundary(self):
        b = BoundaryVector(("image",), (ffs("image", R.ONE_YEAR, True, True),))
        for c in enumerate_candidates(b):
            assert is_at_most_as_permissive(c.factors[0], b.factors[0])

    def test_cap(self):
        b = BoundaryVector(("image", "video"), (ffs("image", R.INDEFINITE, True, True), ffs("video", R.INDEFINITE, True, True)))
        with pytest.raises(CombinatorialLimit) as info:
            enumerate_candidates(b, cap=100)
        assert info.value.cap == 100 and info.value.cardinality == 40 * 40

    def test_excluded_sensor_scores_zero(self):
        c = score(CandidatePolicy((ffs("image", R.ONE_YEAR),), (False,)), MODEL)
        assert (c.score_exposure, c.score_benefit) == (0.0, 0.0)


class TestOptimizer:
    def test_pareto_small(self):
        pts = [(1, 1), (2, 3), (2, 2), (3, 3), (0, 0), (2, 3)]
        cands = [CandidatePolicy((), (), e, b) for e, b in pts]
        assert pareto_front(cands) == [0, 1, 4, 5]

    @settings(max_examples=60, deadline=None)
    @given(st.lists(factor_sets("image"), min_size=1, max_size=1) | st.lists(
        st.sampled_from([ffs("temperature", r, s, i) for r in R for s in (0, 1) for i in (0, 1)]),
        min_size=1, max_size=1),
        st.sampled_from([(1.0, 1.0), (2.0, 1.0), (1.0, 3.0)]))
    def test_matches_oracle_single_sensor(self, boundary, weights):
        self._check(boundary, weights)

    @settings(max_examples=40, deadline=None)
    @given(factor_sets("image"), factor_sets("audio"))
    def test_matches_oracle_two_sensors(self, a, b):
        self._check([a, b], (1.0, 1.0))

    @staticmethod
    def _check(boundary, weights):
        bv = BoundaryVector(tuple(f.data_type for f in boundary), tuple(boundary))
        result = optimize(enumerate_candidates(bv), MODEL, weights)
        frontier, chosen, n = brute_force(boundary, *weights)
        key = lambda c: tuple((f.retention, f.shared, f.inferred, x) for f, x in zip(c.factors, c.include))
        assert {key(c) for c in result.pareto} == frontier
        assert key(result.chosen) == chosen

    def test_bad_weights(self):
        b = BoundaryVector(("image",), (ffs("image"),))
        with pytest.raises(BadValue):
            optimize(enumerate_candidates(b), MODEL, (0.0, 1.0))

    def test_single_user_gets_own_preferences_or_stricter(self):
        session = GroupSession(["image", "video"])
        prefs = [ffs("image", R.THREE_MONTH, False, True), ffs("video", R.ONE_YEAR, True, False)]
        session.add_member("solo", prefs)
        chosen = session.run().chosen
        for f, p in zip(chosen.factors, prefs):
            assert is_at_most_as_permissive(f, p)


class TestSecondRound:
    def test_three_sensor_fixture_matches_frozen_oracle(self):
        expected = json.loads((FIXTURES / "group_three_oracle.json").read_text())
        result = load_group(FIXTURES / "group_three.xml").run()
        assert [[f.retention.label, f.shared, f.inferred] for f in result.boundary.factors] == expected["boundary"]
        enc = lambda c: [[f.retention.label, f.shared, f.inferred, x] for f, x in zip(c.factors, c.include)]
        assert result.candidate_count == expected["candidate_count"]
        assert enc(result.chosen) == expected["chosen"]
        assert sorted(enc(c) for c in result.pareto) == expected["frontier"]

    def test_contacts_and_notifications(self):
        result = load_group(FIXTURES / "group_three.xml").run()
        assert [(c.user_id, c.sensor, c.verdict) for c in result.contacts] == [
            ("ben", "image", Verdict.ACCEPT),
            ("cho", "temperature", Verdict.DECLINE),
            ("ana", "audio", Verdict.ACCEPT),
        ]
        assert [n.user_id for n in result.notifications] == ["cho"]
        note = result.notifications[0]
        assert m.decode(note.frame) == note.message
        assert note.message.factors == result.chosen.factors
        assert note.message.include == result.chosen.include

    def test_chosen_respects_every_standing_row(self):
        result = load_group(FIXTURES / "group_three.xml").run()
        for user in result.matrix.users:
            for f, cell in zip(result.chosen.factors, result.matrix.row(user)):
                assert is_at_most_as_permissive(f, cell)

    def test_no_decliners_no_notifications(self):
        result = load_group(FIXTURES / "group_retention.xml").run()
        assert result.contacts == [] and result.notifications == []

    def test_binding_users(self):
        matrix = GroupMatrix.from_rows(["image"], {
            "a": [ffs("image", R.ONE_MONTH)], "b": [ffs("image", R.ONE_YEAR)], "c": [ffs("image", R.ONE_MONTH)]})
        assert binding_users(matrix, "image") == []  # a and c tie
        assert binding_users(matrix.without("c"), "image") == ["a"]

    def test_second_round_unknown_user(self):
        session = GroupSession(["image"])
        with pytest.raises(UnknownUser):
            session.second_round("ghost", "image", ffs("image"))

    def test_concurrent_submissions(self):
        session = GroupSession(["image"])
        frames = [m.encode(m.GroupPrefSubmit(f"u{k:02d}", (ffs("image", R.scale()[k % 5]),))) for k in range(32)]
        threads = [threading.Thread(target=session.submit_frame, args=(f,)) for f in frames]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        result = session.run()
        assert len(result.matrix.users) == 32
        assert result.boundary["image"].retention is R.NONE


class TestGroupFile:
    def test_unknown_sensor(self):
        with pytest.raises(BadValue):
            parse_group('<group><sensor name="image"/><member id="a"><pref sensor="video"/></member></group>')

    def test_missing_pref(self):
        with pytest.raises(RaggedMatrix):
            parse_group('<group><sensor name="image"/><sensor name="video"/>'
                        '<member id="a"><pref sensor="image"/></member></group>')

    def test_no_members(self):
        with pytest.raises(EmptyGroup):
            parse_group('<group><sensor name="image"/></group>')
