# Wikipedia top-level taxonomy used to label the knowledge-pretraining corpus.
from dataclasses import dataclass
from typing import Tuple

CATEGORIES: Tuple[str, ...] = (
    "General reference",
    "Culture and the arts",
    "Geography and places",
    "Health and fitness",
    "History and events",
    "Human activities",
    "Mathematics and logic",
    "Natural and physical sciences",
    "People and self",
    "Philosophy and thinking",
    "Religion and belief systems",
    "Society and social sciences",
    "Technology and applied sciences",
)


def category_index(name: str) -> int:
    """Index of ``name`` in the closed category set (case-insensitive match)."""
    lowered = name.strip().lower()
    for i, c in enumerate(CATEGORIES):
        if c.lower() == lowered:
            return i
    allowed = "; ".join(CATEGORIES)
    raise ValueError(f"unknown category {name!r}; allowed: {allowed}")


@dataclass(frozen=True)
class CategoryExample:
    text: str
    category: str

    def __post_init__(self):
        if self.category not in CATEGORIES:
            object.__setattr__(self, "category", CATEGORIES[category_index(self.category)])
