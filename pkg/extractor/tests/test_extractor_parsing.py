import pytest

from otcil_extractor.parsing import (InsufficientAttributes, ParseError,
                                     parse_numbered_list, require_min)


def test_inline_numbering():
    out = parse_numbered_list("1. long tail. 2. short ears. 3. round eyes.")
    assert out == ["long tail.", "short ears.", "round eyes."]


def test_multiline_numbering():
    out = parse_numbered_list("1. first\n2. second\n3. third\n")
    assert out == ["first", "second", "third"]


def test_paren_style_numbering():
    out = parse_numbered_list("1) alpha\n2) beta")
    assert out == ["alpha", "beta"]


def test_markdown_bold_numbers():
    out = parse_numbered_list("**1.** Long tail. **2.** Short ears.")
    assert out == ["Long tail.", "Short ears."]


def test_order_follows_appearance_not_labels():
    out = parse_numbered_list("2. written first 1. written second")
    assert out == ["written first", "written second"]


def test_trailing_continuation_dropped():
    out = parse_numbered_list("1. solid item 2. another item 3. ...")
    assert out == ["solid item", "another item"]


def test_unicode_ellipsis_dropped():
    out = parse_numbered_list("1. real\n2. …")
    assert out == ["real"]


def test_empty_answer_rejected():
    with pytest.raises(ParseError):
        parse_numbered_list("   \n  ")


def test_unnumbered_answer_rejected():
    with pytest.raises(ParseError):
        parse_numbered_list("a prose answer with no list at all")


def test_answer_of_only_continuations_rejected():
    with pytest.raises(ParseError):
        parse_numbered_list("1. ... 2. …")


def test_require_min_passes_through():
    attrs = ["a", "b", "c"]
    assert require_min(attrs, 3, "x") is attrs


def test_require_min_message():
    with pytest.raises(InsufficientAttributes) as exc:
        require_min(["a", "b"], 5, "duck")
    assert str(exc.value) == "insufficient attributes for 'duck': got 2, need 5"
    assert exc.value.got == 2 and exc.value.need == 5
