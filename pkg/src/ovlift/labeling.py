"""Open-tag collection and matching of instance crops to tag text embeddings."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

NORM_TOL = 1e-4


class LabelStrategy(str, Enum):
    SCORE = "score"  # label of the member with the highest similarity
    NUMBER = "number"  # most frequent member label


@dataclass
class TagSet:
    tags: list
    text_embeddings: np.ndarray | None = None  # C×D, unit rows

    def __post_init__(self):
        if len(set(self.tags)) != len(self.tags):
            raise ValueError("tags must be unique")
        if self.text_embeddings is not None:
            emb = np.asarray(self.text_embeddings, dtype=np.float64)
            if emb.shape[0] != len(self.tags):
                raise ValueError("one embedding row per tag required")
            if np.any(np.abs(np.linalg.norm(emb, axis=1) - 1) > NORM_TOL):
                raise ValueError("tag embeddings must be unit norm")
            self.text_embeddings = emb


@dataclass
class CropEmbedding:
    coarse_mask_id: int
    view_id: int
    vector: np.ndarray


def load_blocklist(path=None) -> set:
    """Tags to discard: one per line, '#' starts a comment. Defaults to the bundled list."""
    if path is None:
        text = resources.files("ovlift").joinpath("data/blocklist.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    out = set()
    for line in text.splitlines():
        tag = line.split("#", 1)[0].strip().casefold()
        if tag:
            out.add(tag)
    return out


def collect_open_tags(per_frame_tags, blocklist=frozenset()) -> TagSet:
    blocked = {b.casefold() for b in blocklist}
    seen = {}
    for tags in per_frame_tags:
        for tag in tags:
            t = tag.strip().casefold()
            if t and t not in blocked and t not in seen:
                seen[t] = None
    if not seen:
        logger.warning("no open tags survived filtering; instances stay unlabeled")
    return TagSet(list(seen))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def member_labels(crop_embeddings, tag_set: TagSet):
    """Best tag index and its similarity for every coarse mask with crops.

    Per mask, the similarity to a tag is the max over that mask's views.
    """
    if not tag_set.tags or tag_set.text_embeddings is None:
        return {}
    text = tag_set.text_embeddings
    best = {}
    for crop in crop_embeddings:
        v = np.asarray(crop.vector, dtype=np.float64)
        norm = np.linalg.norm(v)
        if norm == 0:
            continue
        sims = np.clip(text @ (v / norm), -1.0, 1.0)
        prev = best.get(crop.coarse_mask_id)
        best[crop.coarse_mask_id] = sims if prev is None else np.maximum(prev, sims)
    out = {}
    for mask_id, sims in best.items():
        c = int(np.argmax(sims))
        out[mask_id] = (c, float(sims[c]))
    return out


def match_labels(instances, crop_embeddings, tag_set: TagSet, strategy=LabelStrategy.SCORE):
    """Label each instance from its composition members' best tags (in place; returns instances)."""
    strategy = LabelStrategy(strategy)
    per_mask = member_labels(crop_embeddings, tag_set)
    for inst in instances:
        members = [(mid, *per_mask[mid]) for mid in inst.composition if mid in per_mask]
        missing = len(inst.composition) - len(members)
        if missing:
            logger.warning("instance %d: %d composition member(s) without crop embeddings", inst.id, missing)
        if not members:
            inst.label, inst.confidence = None, None
            continue
        if strategy is LabelStrategy.SCORE:
            # max() keeps the first of equal scores, i.e. composition order.
            _, c, score = max(members, key=lambda m: m[2])
        else:
            votes = Counter(m[1] for m in members)
            top = max(votes.values())
            tied = [c for c, n in votes.items() if n == top]
            c = max(tied, key=lambda c: (max(m[2] for m in members if m[1] == c), -c))
            score = max(m[2] for m in members if m[1] == c)
        inst.label = tag_set.tags[c]
        inst.confidence = score
    return instances
