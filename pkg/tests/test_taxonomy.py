import pytest

from ipt_lab.taxonomy import CATEGORIES, CategoryExample, category_index


def test_thirteen_categories():
    assert len(CATEGORIES) == 13
    assert len(set(CATEGORIES)) == 13


def test_category_lookup_is_case_insensitive():
    assert category_index("  human ACTIVITIES ") == CATEGORIES.index("Human activities")


def test_unknown_category_lists_the_allowed_set():
    with pytest.raises(ValueError, match="allowed: General reference"):
        category_index("Sports")


def test_example_canonicalises_its_category():
    assert CategoryExample("x", "culture and the arts").category == "Culture and the arts"
    with pytest.raises(ValueError):
        CategoryExample("x", "nope")
