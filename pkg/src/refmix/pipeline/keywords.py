"""Versioned keyword vocabulary for tuple construction.

Three categories: depictable objects, local attributes (properties of one
element), and global attributes (properties of the whole image). The
lists are data, not claims — swap or extend them freely; bump the version
when you do.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import InputError

VOCAB_VERSION = 1

CATEGORIES = ("concrete-object", "abstract-local", "abstract-global")

VOCAB: dict[str, tuple[str, ...]] = {
    "concrete-object": (
        "bag", "dress", "lamp", "mug", "armchair", "hat", "clock",
        "vase", "bicycle", "guitar", "teapot", "scarf",
    ),
    "abstract-local": (
        "pattern", "texture", "material", "hairstyle", "posture",
        "embroidery", "trim", "glaze", "weave",
    ),
    "abstract-global": (
        "design style", "lighting", "color palette", "mood",
        "weather", "season", "art style", "atmosphere",
    ),
}


@dataclass(frozen=True)
class Keyword:
    text: str
    category: str

    def __post_init__(self):
        if not self.text:
            raise InputError("keyword text must be nonempty")
        if self.category not in CATEGORIES:
            raise InputError(f"unknown keyword category {self.category!r}; expected {CATEGORIES}")

    def as_dict(self) -> dict:
        return {"text": self.text, "category": self.category}


def pick_keyword(rng, category: str) -> Keyword:
    words = VOCAB[category]
    return Keyword(words[rng.integers(0, len(words))], category)


def pick_category(rng, weights: dict[str, float]) -> str:
    cats = [c for c in CATEGORIES if weights.get(c, 0.0) > 0]
    return rng.choice_weighted(cats, [weights[c] for c in cats])
