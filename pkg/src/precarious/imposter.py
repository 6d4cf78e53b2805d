"""Imposter selection: the synthetic samples that best fool the discriminator."""

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .discriminator import score_batch


@dataclass(frozen=True)
class ScoredSample:
    index: int
    score: float


@dataclass(frozen=True)
class ImposterSet:
    entries: tuple  # ScoredSample, descending score
    k: int
    pool_id: str = ""
    truncated: bool = False

    @property
    def indices(self):
        return [e.index for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def to_json(self):
        return {"poolId": self.pool_id, "k": self.k,
                "entries": [{"index": e.index, "score": e.score} for e in self.entries]}

    @classmethod
    def from_json(cls, obj):
        entries = tuple(ScoredSample(int(e["index"]), float(e["score"])) for e in obj["entries"])
        return cls(entries, int(obj["k"]), obj.get("poolId", ""), len(entries) < int(obj["k"]))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def score_pool(model, pool_images):
    """Discriminator score for every pool image, in pool order."""
    if len(pool_images) == 0:
        raise ValueError("the synthetic pool is empty")
    scores = score_batch(model, pool_images)
    return [ScoredSample(i, float(s)) for i, s in enumerate(scores)]


def select_imposters(scored, k, pool_id=""):
    """Top-k samples by score; ties go to the lower pool index."""
    if k < 0:
        raise ValueError("k must be non-negative")
    truncated = k > len(scored)
    if truncated:
        warnings.warn(f"k={k} exceeds pool size {len(scored)}; returning the whole pool", stacklevel=2)
    idx = np.array([s.index for s in scored], dtype=np.int64)
    sc = np.array([s.score for s in scored], dtype=np.float64)
    order = np.lexsort((idx, -sc))[:k]
    entries = tuple(ScoredSample(int(idx[i]), float(sc[i])) for i in order)
    return ImposterSet(entries, int(k), pool_id, truncated)
