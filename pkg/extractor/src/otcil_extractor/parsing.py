"""Turning a model's numbered-list answer into clean attribute strings."""

import re

# "1. text", "2) text", "**3.** text", with items separated by newlines or
# run together on one line
_ITEM = re.compile(r"(?:^|\s)(?:\*\*)?(\d{1,3})\s*[.)]\s*(?:\*\*)?\s*")

# a bare continuation marker some models append ("6. ..." / unicode ellipsis)
_CONTINUATION = re.compile(r"^[.·…⋯\s]*$")


class ParseError(ValueError):
    pass


class InsufficientAttributes(ValueError):
    def __init__(self, class_name: str, got: int, need: int):
        self.got = got
        self.need = need
        super().__init__(
            f"insufficient attributes for {class_name!r}: got {got}, need {need}")


def parse_numbered_list(text: str) -> list:
    """Extract the attribute strings from a numbered answer.

    Tolerates inline and multiline numbering, markdown bold around the
    numbers, and trailing continuation ellipses. Order follows appearance,
    not the printed numbers.
    """
    if not text or not text.strip():
        raise ParseError("empty answer")
    hits = list(_ITEM.finditer(text))
    if not hits:
        raise ParseError(f"no numbered items in answer: {text[:80]!r}")
    items = []
    for i, h in enumerate(hits):
        end = hits[i + 1].start() if i + 1 < len(hits) else len(text)
        chunk = text[h.end():end].strip().strip("*").strip()
        if _CONTINUATION.match(chunk):
            continue
        items.append(chunk)
    if not items:
        raise ParseError("numbered answer held no usable items")
    return items


def require_min(attrs: list, n: int, class_name: str) -> list:
    if len(attrs) < n:
        raise InsufficientAttributes(class_name, len(attrs), n)
    return attrs
