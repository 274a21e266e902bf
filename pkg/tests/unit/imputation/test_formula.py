import io

import numpy as np
import pytest

from mlmi_cli.exceptions import ParseError, ValidationError
from mlmi_cli.imputation.data_model import load_dataset
from mlmi_cli.imputation.formula import INTERCEPT, build_design, parse_formula

pytestmark = pytest.mark.unit


@pytest.fixture
def dataset():
    text = "ID,MA,SES,x,z\n1,1.0,NA,0.5,1\n1,NA,2.0,1.5,2\n2,3.0,1.0,-0.5,3\n2,4.0,0.0,0.0,4\n3,5.0,NA,1.0,NA\n"
    return load_dataset(io.StringIO(text), "ID")


def test_empty_model():
    f = parse_formula("MA + SES ~ 1 + (1|ID)")
    assert f.responses == ("MA", "SES")
    assert f.fixed_names == (INTERCEPT,)
    assert f.random_names == (INTERCEPT,)
    assert f.group == "ID"


def test_random_slope_model():
    f = parse_formula("MA ~ 1 + x + (1 + x | ID)")
    assert f.fixed_names == (INTERCEPT, "x")
    assert f.random_names == (INTERCEPT, "x")
    assert f.variables == ("MA", "x", "ID")


@pytest.mark.parametrize(
    "text",
    ["MA+SES~1+(1|ID)", "  MA + SES ~ 1 + ( 1 | ID )  ", "MA + SES ~ 1 + x + (1 + x | ID)", "MA ~ x", "MA ~ 1"],
)
def test_canonical_form_parses_back(text):
    f = parse_formula(text)
    assert parse_formula(f.canonical()) == f


def test_canonical_spacing():
    assert parse_formula("MA+SES~1+x+(1+x|ID)").canonical() == "MA + SES ~ 1 + x + (1 + x | ID)"


def test_intercept_only_when_written():
    f = parse_formula("MA ~ x + (1 | ID)")
    assert not f.fixed_intercept
    assert f.fixed_names == ("x",)


@pytest.mark.parametrize(
    "text, offset",
    [
        ("MA ~ 1 + (1 | )", 14),
        ("MA ~ 1 + $", 9),
        ("MA ~ ", 5),
        ("~ 1", 0),
        ("MA ~ 2", 5),
    ],
)
def test_parse_errors_carry_offsets(text, offset):
    with pytest.raises(ParseError) as err:
        parse_formula(text)
    assert err.value.offset == offset


def test_empty_formula():
    with pytest.raises(ParseError):
        parse_formula("   ")


def test_response_on_both_sides():
    with pytest.raises(ParseError, match="both sides"):
        parse_formula("MA ~ 1 + MA")


def test_duplicate_fixed_term():
    with pytest.raises(ParseError, match="Duplicate"):
        parse_formula("MA ~ 1 + x + x")


def test_random_term_must_be_fixed():
    with pytest.raises(ParseError, match="also be a fixed term"):
        parse_formula("MA ~ 1 + (1 + x | ID)")


def test_two_random_blocks():
    with pytest.raises(ParseError, match="one random-effects block"):
        parse_formula("MA ~ 1 + (1 | ID) + (1 | school)")


def test_build_design_shapes(dataset):
    f = parse_formula("MA + SES ~ 1 + x + (1 + x | ID)")
    design = build_design(f, dataset)
    assert (design.n, design.r, design.p, design.q) == (5, 2, 2, 2)
    assert design.groups.J == 3
    assert design.missing.sum() == 3
    np.testing.assert_array_equal(design.X[:, 0], np.ones(5))
    np.testing.assert_array_equal(design.Z, design.X)


def test_build_design_rejects_missing_predictor(dataset):
    f = parse_formula("MA ~ 1 + z + (1 | ID)")
    with pytest.raises(ValidationError, match="completely observed"):
        build_design(f, dataset)


def test_build_design_unknown_variable(dataset):
    with pytest.raises(ValidationError, match="Unknown variable"):
        build_design(parse_formula("MA ~ 1 + w + (1 | ID)"), dataset)


def test_single_level_design(dataset):
    design = build_design(parse_formula("MA + SES ~ 1 + (1 | ID)"), dataset, single_level=True)
    assert design.q == 0
    assert design.groups.J == 1
    assert design.groups.sizes.tolist() == [5]


def test_multilevel_design_needs_random_block(dataset):
    with pytest.raises(ValidationError, match="random-effects block"):
        build_design(parse_formula("MA ~ 1 + x"), dataset)
