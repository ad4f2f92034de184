"""Service-group classification from textual service descriptions.

A deterministic, training-free term-overlap scorer against a shared domain
taxonomy.  The taxonomy is a plain file, so classification behaviour can be
changed at runtime by swapping the file — no retraining step exists.
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

# Fixed 30-word stopword list; tokens shorter than 3 characters are dropped
# before this list is consulted, so the short entries only matter for
# documentation completeness.
STOPWORDS = frozenset({
    "a", "an", "and", "are", "as", "at", "be", "but", "by", "for",
    "from", "has", "have", "in", "is", "it", "its", "of", "on", "or",
    "that", "the", "this", "to", "was", "were", "will", "with", "not",
    "you",
})

MIN_TOKEN_LEN = 3
DEFAULT_THRESHOLD = 0.3

_SPLIT_RE = re.compile(r"[^0-9a-zA-Z]+")
_SANITIZE_RE = re.compile(r"[^a-z0-9._-]")


class EmptyDescription(ValueError):
    """The description has no usable tokens."""


class TaxonomyError(ValueError):
    """The taxonomy file is malformed."""


def tokenize(description: str) -> Counter:
    """Lowercase token multiset: split on non-alphanumeric runs, drop
    tokens shorter than 3 characters and the fixed stopword list."""
    tokens = Counter()
    for raw in _SPLIT_RE.split(description.lower()):
        if len(raw) >= MIN_TOKEN_LEN and raw not in STOPWORDS:
            tokens[raw] += 1
    return tokens


@dataclass(frozen=True)
class GroupTerms:
    domain: str
    terms: frozenset[str]


@dataclass
class DomainTaxonomy:
    groups: dict[str, GroupTerms] = field(default_factory=dict)
    threshold: float = DEFAULT_THRESHOLD

    def validate(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise TaxonomyError(f"threshold {self.threshold} not in [0, 1]")
        for group_id, group in self.groups.items():
            if not group.terms:
                raise TaxonomyError(f"group {group_id!r} has no terms")


@dataclass
class MatchResult:
    best_group: str | None
    score: float
    ranked: list[tuple[str, float]]


def match_group(taxonomy: DomainTaxonomy, description: str) -> MatchResult:
    """Score every group as |tokens ∩ terms| / |terms| (set semantics)."""
    tokens = set(tokenize(description))
    ranked = []
    for group_id, group in taxonomy.groups.items():
        score = len(tokens & group.terms) / len(group.terms)
        ranked.append((group_id, score))
    ranked.sort(key=lambda item: (-item[1], item[0]))
    if ranked and ranked[0][1] >= taxonomy.threshold:
        return MatchResult(ranked[0][0], ranked[0][1], ranked)
    top = ranked[0][1] if ranked else 0.0
    return MatchResult(None, top, ranked)


def propose_group_id(description: str, existing: set[str] | frozenset[str]
                     | tuple[str, ...] = ()) -> str:
    """Deterministic new group id: the lexicographically smallest of the two
    highest-frequency tokens, with ``-2``, ``-3``, ... on collision."""
    tokens = tokenize(description)
    if not tokens:
        raise EmptyDescription(f"no usable tokens in {description!r}")
    ordered = sorted(tokens.items(), key=lambda item: (-item[1], item[0]))
    top_two = [token for token, _ in ordered[:2]]
    candidate = _SANITIZE_RE.sub("", min(top_two))
    if not candidate:
        raise EmptyDescription(f"tokens of {description!r} sanitize to nothing")
    taken = set(existing)
    if candidate not in taken:
        return candidate
    suffix = 2
    while f"{candidate}-{suffix}" in taken:
        suffix += 1
    return f"{candidate}-{suffix}"


def parse_taxonomy(text: str) -> DomainTaxonomy:
    """Parse the tab-separated taxonomy format.

    One group per line: ``group_id<TAB>domain<TAB>comma-separated terms``.
    ``#`` starts a comment.  An optional two-field line
    ``threshold<TAB><value>`` sets the match threshold.
    """
    taxonomy = DomainTaxonomy()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split("\t")]
        if len(fields) == 2 and fields[0] == "threshold":
            try:
                taxonomy.threshold = float(fields[1])
            except ValueError:
                raise TaxonomyError(
                    f"line {lineno}: bad threshold {fields[1]!r}"
                ) from None
            continue
        if len(fields) != 3:
            raise TaxonomyError(
                f"line {lineno}: expected 3 tab-separated fields, got "
                f"{len(fields)}"
            )
        group_id, domain, terms_csv = fields
        if group_id in taxonomy.groups:
            raise TaxonomyError(f"line {lineno}: duplicate group {group_id!r}")
        terms = frozenset(
            t.strip().lower() for t in terms_csv.split(",") if t.strip()
        )
        if not terms:
            raise TaxonomyError(f"line {lineno}: group {group_id!r} has no terms")
        taxonomy.groups[group_id] = GroupTerms(domain, terms)
    taxonomy.validate()
    return taxonomy


def load_taxonomy(path: str | Path) -> DomainTaxonomy:
    return parse_taxonomy(Path(path).read_text(encoding="utf-8"))
