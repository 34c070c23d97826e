"""Case groups and the exposure decision.

An infected device's uploaded tags are linked into one case group with a
random identifier. A querying device's exposure to a case is the sum of its
per-tag exposure over every tag in the group, which is what lets exposure
keep accumulating across tag rotations. The decision compares the largest
per-group total against the threshold (15 minutes by default).
"""
from __future__ import annotations

import math
import secrets
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional

from .errors import DuplicateUploadError

DEFAULT_EXPOSURE_THRESHOLD_S = 900.0
GROUP_ID_SIZE = 16


@dataclass(frozen=True)
class CaseGroup:
    group_id: bytes
    tags: tuple  # upload order, kept for stable publication
    cursor: int = 0

    @property
    def tag_set(self) -> frozenset:
        return frozenset(self.tags)

    def to_dict(self) -> dict:
        return {"cursor": self.cursor, "group_id": self.group_id.hex(),
                "tags": [t.hex() for t in self.tags]}

    @classmethod
    def from_dict(cls, data: dict) -> CaseGroup:
        return cls(group_id=bytes.fromhex(data["group_id"]),
                   tags=tuple(bytes.fromhex(t) for t in data["tags"]),
                   cursor=int(data["cursor"]))


@dataclass(frozen=True)
class ExposureDecision:
    positive: bool
    matched_group_count: int
    max_group_exposure_s: float

    def to_dict(self) -> dict:
        return {"positive": self.positive,
                "matched_group_count": self.matched_group_count,
                "max_group_exposure_s": self.max_group_exposure_s}


class InfectedIndex:
    """All published case groups plus a tag -> group lookup."""

    def __init__(self, id_factory: Optional[Callable[[], bytes]] = None):
        self.groups: list[CaseGroup] = []
        self.by_tag: dict[bytes, CaseGroup] = {}
        self._new_id = id_factory or (lambda: secrets.token_bytes(GROUP_ID_SIZE))

    @property
    def cursor(self) -> int:
        return len(self.groups)

    def existing_group(self, tags) -> Optional[CaseGroup]:
        """The group an identical bundle already created, if any.

        Raises DuplicateUploadError when the bundle partially overlaps.
        """
        tag_set = frozenset(tags)
        hits = {self.by_tag[t].group_id: self.by_tag[t]
                for t in tag_set if t in self.by_tag}
        if not hits:
            return None
        if len(hits) == 1:
            (group,) = hits.values()
            if group.tag_set == tag_set:
                return group
        raise DuplicateUploadError(
            f"{sum(t in self.by_tag for t in tag_set)} tag(s) already published")

    def add(self, group: CaseGroup) -> None:
        """Append an already-identified group (used by journal replay)."""
        if group.cursor != self.cursor + 1:
            raise ValueError(
                f"group cursor {group.cursor} does not follow {self.cursor}")
        if any(t in self.by_tag for t in group.tags):
            raise DuplicateUploadError("group overlaps an existing group")
        self.groups.append(group)
        for t in group.tags:
            self.by_tag[t] = group

    def allocate(self, tags: tuple) -> CaseGroup:
        """Build the next group for ``tags`` without publishing it."""
        return CaseGroup(group_id=self._new_id(), tags=tags, cursor=self.cursor + 1)

    def since(self, cursor: int) -> list[CaseGroup]:
        return self.groups[cursor:]


def register_case(index: InfectedIndex, tags: Iterable[bytes]) -> CaseGroup:
    tags = tuple(dict.fromkeys(tags))
    if not tags:
        raise ValueError("cannot register an empty bundle")
    existing = index.existing_group(tags)
    if existing is not None:
        return existing
    group = index.allocate(tags)
    index.add(group)
    return group


def group_exposures(lookup: Mapping[bytes, CaseGroup], contacts) -> dict:
    """Total exposure seconds per matched group id.

    ``contacts`` holds objects with ``tag`` and ``exposure_s`` attributes.
    Sums use ``math.fsum`` so contact order cannot change the result.
    """
    per_group: dict[bytes, list] = {}
    for contact in contacts:
        group = lookup.get(contact.tag)
        if group is not None:
            per_group.setdefault(group.group_id, []).append(contact.exposure_s)
    return {gid: math.fsum(values) for gid, values in per_group.items()}


def _decide(lookup, contacts, threshold_s: float) -> ExposureDecision:
    totals = group_exposures(lookup, contacts)
    matched = sum(1 for v in totals.values() if v > 0)
    best = max(totals.values(), default=0.0)
    return ExposureDecision(positive=best >= threshold_s,
                            matched_group_count=matched,
                            max_group_exposure_s=float(best))


def match_contacts(index: InfectedIndex, contacts,
                   exposure_threshold_s: float = DEFAULT_EXPOSURE_THRESHOLD_S
                   ) -> ExposureDecision:
    return _decide(index.by_tag, contacts, exposure_threshold_s)


def local_match(snapshot: Iterable[CaseGroup], contacts,
                exposure_threshold_s: float = DEFAULT_EXPOSURE_THRESHOLD_S
                ) -> ExposureDecision:
    """Device-side decision from a downloaded list of case groups."""
    lookup = {tag: group for group in snapshot for tag in group.tags}
    return _decide(lookup, contacts, exposure_threshold_s)
