import math

import pytest
from hypothesis import given

from privneg.errors import BadValue
from privneg.policy import FormFactorSet, Retention, is_at_most_as_permissive
from privneg.utility import (
    Ordering,
    ScoringModel,
    benefit,
    compare_requests,
    compare_values,
    exposure,
    parse_scoring,
    serialize_scoring,
    utility,
)

from oracles import rule_b, rule_pe
from strategies import factor_sets, scoring_models

MODEL = ScoringModel()


def test_listing_request_scores():
    req = FormFactorSet("image", Retention.THREE_MONTH, False, True)
    own = FormFactorSet("image", Retention.ONE_YEAR, False, True)
    # 4 * 2 * 1 * 2 and 4 + 2 + 1 + 2
    assert utility([req], MODEL).exposure == 16
    assert utility([req], MODEL).benefit == 9
    assert utility([req], MODEL).utility == -7
    assert utility([own], MODEL).utility == 11 - 32
    assert compare_requests([req], [own], MODEL) is Ordering.GREATER


def test_unknown_type_uses_default_weight():
    f = FormFactorSet("humidity")
    assert MODEL.rule_exposure(f) == 2 * 0.5


@given(factor_sets())
def test_default_model_matches_oracle(f):
    assert MODEL.rule_exposure(f) == rule_pe(f)
    assert MODEL.rule_benefit(f) == rule_b(f)


@given(scoring_models(), factor_sets("image"), factor_sets("image"))
def test_stricter_never_more_exposed(model, a, b):
    if is_at_most_as_permissive(a, b):
        assert exposure([a], model) <= exposure([b], model)


@given(scoring_models(), factor_sets(), factor_sets())
def test_totals_are_additive(model, a, b):
    assert math.isclose(exposure([a, b], model), exposure([a], model) + exposure([b], model))
    assert math.isclose(benefit([a, b], model), benefit([a], model) + benefit([b], model))


def test_gamma_scales_exposure():
    f = FormFactorSet("video", Retention.ONE_YEAR, True, True)
    half = ScoringModel(gamma=0.5)
    assert utility([f], half).utility == rule_b(f) - 0.5 * rule_pe(f)


def test_compare_values_tolerance():
    assert compare_values(1.0, 1.0 + 1e-12) is Ordering.EQUAL
    assert compare_values(1.0, 1.001) is Ordering.LESS


@pytest.mark.parametrize("kwargs", [
    {"gamma": -1.0},
    {"pe_shared": {False: 3.0, True: 1.0}},
    {"pe_type": {"image": 1.0}},
    {"pe_retention": {r: 1.0 for r in list(Retention)[:3]}},
    {"b_shared": {False: -1.0, True: 1.0}},
])
def test_invalid_models(kwargs):
    with pytest.raises(BadValue):
        ScoringModel(**kwargs)


def test_decreasing_retention_weights_rejected():
    with pytest.raises(BadValue):
        ScoringModel(pe_retention={r: 10.0 - k for k, r in enumerate(Retention.scale())})


@given(scoring_models())
def test_scoring_file_round_trip(model):
    assert parse_scoring(serialize_scoring(model)) == model


def test_partial_scoring_file_keeps_defaults():
    model = parse_scoring('<scoring gamma="2"><pe-type name="image">5</pe-type></scoring>')
    assert model.gamma == 2.0
    assert model.pe_type["image"] == 5.0
    assert model.pe_type["video"] == 8.0


def test_scoring_file_errors():
    with pytest.raises(BadValue):
        parse_scoring('<scoring><pe-type name="image">lots</pe-type></scoring>')
    with pytest.raises(BadValue):
        parse_scoring('<scoring><weights/></scoring>')
