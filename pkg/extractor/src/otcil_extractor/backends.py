"""Attribute sources: an HTTP chat backend and offline canned answers.

The canned answers exist so the whole pipeline runs deterministically with
no network and no paid API; they read like real model output, numbered list
and all, so the parser is exercised the same way in both modes.
"""

import json
import os
import time
import urllib.error
import urllib.request

from .parsing import InsufficientAttributes, ParseError, parse_numbered_list, require_min

API_KEY_ENV = "OTCIL_EXTRACTOR_API_KEY"

_REPROMPT = " Give at least {n} distinct numbered attributes."

# class name -> canned numbered answer
FIXTURE_ANSWERS = {
    "duck": (
        "1. Relatively short neck connecting the head and body. "
        "2. Short, upturned tail at the rear of the body. "
        "3. Paired wings along the sides. "
        "4. Bills are often colored orange or red. "
        "5. Webbed feet are visible beneath the body."
    ),
    "snail": (
        "1. Distinct rounded coiled shell with a clear spiral pattern. "
        "2. Soft, elongated flattened foot extends beneath the shell. "
        "3. The shell is proportionally large. "
        "4. A head bearing two long upper tentacles. "
        "5. Shells show earthy or golden hues, while the soft body is darker."
    ),
    "shih_tzu": (
        "1. Dense, long, silky coat that covers the body and head. "
        "2. Short, pushed-in muzzle with a broad black nose. "
        "3. Broad, rounded skull producing a domed forehead. "
        "4. Long, heavily coated ears that hang down alongside the face. "
        "5. Small, compact body with short legs."
    ),
    "pig": (
        "1. A short, curly or corkscrew-shaped tail. "
        "2. Short, rounded head with a broad snout area. "
        "3. Distinct round, flattened snout with two visible nostrils. "
        "4. Small eyes set on the sides of the head. "
        "5. Stout, barrel-shaped body that is broad and compact."
    ),
    "mobile_phone": (
        "1. Thin, flat rectangular handheld shape. "
        "2. Prominent rectangular display that occupies much of the front face. "
        "3. Corners and edges are generally rounded. "
        "4. Small enough to be held and operated with a single hand. "
        "5. Largely featureless aside from the screen and buttons."
    ),
}

# filled per slot for classes without a canned answer; still numbered so the
# parser path is identical
_GENERIC_SLOTS = [
    "Overall silhouette characteristic of a {name}.",
    "Surface texture and coloring typical of a {name}.",
    "Proportions between the main parts of a {name}.",
    "Distinctive edges or contours that outline a {name}.",
    "Context or pose in which a {name} usually appears.",
    "Fine structural details unique to a {name}.",
    "Repeating patterns or markings found on a {name}.",
    "Size cues relative to surrounding objects near a {name}.",
]


class BackendError(RuntimeError):
    """The backend could not produce an answer."""


class FixtureBackend:
    """Deterministic offline answers."""

    name = "fixture"

    def complete(self, prompt: str, class_name: str, image_paths: list) -> str:
        canned = FIXTURE_ANSWERS.get(class_name)
        if canned is not None:
            return canned
        n = max(5, _wanted_count(prompt))
        slots = [_GENERIC_SLOTS[i % len(_GENERIC_SLOTS)] for i in range(n)]
        return " ".join(f"{i + 1}. {s.format(name=class_name)}"
                        for i, s in enumerate(slots))


def _wanted_count(prompt: str) -> int:
    # the re-prompt suffix carries the target count; first asks carry none
    import re
    m = re.search(r"at least (\d+) distinct", prompt)
    return int(m.group(1)) if m else 0


class HttpBackend:
    """Minimal chat-completion client. The model id is free-form."""

    name = "http"

    def __init__(self, base_url: str, model: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.timeout = timeout

    def complete(self, prompt: str, class_name: str, image_paths: list) -> str:
        key = os.environ.get(API_KEY_ENV, "")
        body = {
            "model": self.model,
            "messages": [{
                "role": "user",
                "content": prompt,
                # image references travel as paths; a multimodal deployment
                # would inline them, which is out of scope here
                "images": list(image_paths),
            }],
        }
        req = urllib.request.Request(
            self.base_url + "/chat/completions",
            data=json.dumps(body).encode("utf-8"),
            headers={"Content-Type": "application/json",
                     "Authorization": f"Bearer {key}"},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise BackendError(f"http backend failed: {exc}") from exc
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed backend response: {payload!r}") from exc


def make_backend(backend_id: str, base_url: str = "", model: str = ""):
    if backend_id == "fixture":
        return FixtureBackend()
    if backend_id == "http":
        if not base_url:
            raise ValueError("http backend needs --base-url")
        return HttpBackend(base_url, model or "default")
    raise ValueError(f"unknown backend {backend_id!r}")


def generate_attributes(backend, prompt: str, class_name: str, image_paths: list,
                        min_attrs: int, retries: int = 2,
                        backoff: float = 0.5) -> tuple:
    """Ask for attributes until the minimum is met.

    Short answers get one re-prompt with the count spelled out. Transport
    failures are retried, then the fixture stands in; either path is noted
    in the returned provenance string ("" means the first ask sufficed).
    """
    note = ""
    ask = prompt
    for attempt in range(retries + 1):
        try:
            text = backend.complete(ask, class_name, image_paths)
            attrs = parse_numbered_list(text)
            if len(attrs) < min_attrs:
                short = InsufficientAttributes(class_name, len(attrs), min_attrs)
                if ask is prompt:
                    ask = prompt + _REPROMPT.format(n=min_attrs)
                    note = f"re-prompted: {short}"
                    continue
                raise short
            return require_min(attrs, min_attrs, class_name), note
        except InsufficientAttributes:
            raise
        except (BackendError, ParseError) as exc:
            if attempt < retries:
                time.sleep(backoff * (attempt + 1))
                continue
            if isinstance(backend, FixtureBackend):
                raise
            fallback = FixtureBackend().complete(prompt, class_name, image_paths)
            attrs = require_min(parse_numbered_list(fallback), min_attrs, class_name)
            return attrs, f"fixture fallback after backend failure: {exc}"
    raise BackendError(f"no usable answer for {class_name!r} after {retries + 1} attempts")
