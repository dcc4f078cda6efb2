"""Keyframe descriptor database for global loop-candidate retrieval.

ORB keypoints are quantized into a fixed 4096-word vocabulary by seeded
random-hyperplane hashing, giving training-free TF-IDF bag-of-words vectors.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass, field

import cv2
import numpy as np

SNAPSHOT_VERSION = 1
_WORD_BITS = 12  # 4096 words
_IDF_FREEZE_FRAMES = 50


@dataclass
class BoWVector:
    """Sparse L1-normalized TF-IDF word weights."""

    weights: dict
    degenerate: bool = False

    def l1(self) -> float:
        return sum(self.weights.values())


def similarity(a: BoWVector, b: BoWVector) -> float:
    """s(a, b) = 1 - 0.5 * sum |a_w - b_w| over the word union."""
    words = set(a.weights) | set(b.weights)
    if not words:
        return 0.0
    diff = sum(abs(a.weights.get(w, 0.0) - b.weights.get(w, 0.0)) for w in words)
    return max(0.0, 1.0 - 0.5 * diff)


def dynamic_threshold(keyframe_vec: BoWVector, submap_frame_vecs) -> float:
    """Minimum similarity between the keyframe and its submap's frames."""
    vecs = list(submap_frame_vecs)
    if not vecs:
        raise ValueError("no submap frame vectors")
    return min(similarity(keyframe_vec, v) for v in vecs)


class Vocabulary:
    """Random-hyperplane quantizer for 256-bit binary descriptors."""

    def __init__(self, seed: int = 12345):
        rng = np.random.default_rng(seed)
        self.planes = rng.standard_normal((_WORD_BITS, 256))
        self.n_words = 1 << _WORD_BITS

    def quantize(self, descriptors: np.ndarray) -> np.ndarray:
        bits = np.unpackbits(descriptors, axis=1).astype(np.float64) * 2.0 - 1.0
        signs = bits @ self.planes.T > 0
        return (signs @ (1 << np.arange(_WORD_BITS))).astype(np.int64)


class FrameDescriber:
    """ORB keypoints -> quantized words -> TF-IDF BoW vector."""

    def __init__(self, vocabulary: Vocabulary | None = None, n_features: int = 500,
                 min_keypoints: int = 10):
        self.vocab = vocabulary or Vocabulary()
        self.orb = cv2.ORB_create(nfeatures=n_features, fastThreshold=10)
        self.min_keypoints = min_keypoints
        self._df = np.zeros(self.vocab.n_words)
        self._n_docs = 0
        self._idf_frozen = False

    def _idf(self) -> np.ndarray:
        n = max(self._n_docs, 1)
        return np.log((n + 1.0) / (self._df + 1.0)) + 1.0

    def describe(self, gray_image: np.ndarray) -> BoWVector:
        img = np.asarray(gray_image)
        if img.size == 0:
            raise ValueError("empty image")
        if img.dtype != np.uint8:
            img = np.clip(img * 255.0 if img.max() <= 1.0 else img, 0, 255).astype(np.uint8)
        _, desc = self.orb.detectAndCompute(img, None)
        if desc is None or len(desc) == 0:
            return BoWVector({}, degenerate=True)
        words = self.vocab.quantize(desc)
        if not self._idf_frozen:
            self._df[np.unique(words)] += 1
            self._n_docs += 1
            if self._n_docs >= _IDF_FREEZE_FRAMES:
                self._idf_frozen = True
        idf = self._idf()
        counts = np.bincount(words, minlength=self.vocab.n_words).astype(np.float64)
        tfidf = counts * idf
        total = tfidf.sum()
        weights = {int(w): float(tfidf[w] / total) for w in np.unique(words)}
        return BoWVector(weights, degenerate=len(desc) < self.min_keypoints)


class KeyframeDatabase:
    """Inverted index over keyframe BoW vectors; one writer, many readers."""

    def __init__(self):
        self.inverted: dict = {}          # word -> list of (keyframe id, weight)
        self.vectors: dict = {}           # keyframe id -> BoWVector
        self.submap_of: dict = {}         # keyframe id -> submap id

    def __len__(self):
        return len(self.vectors)

    def add(self, keyframe_id: int, vec: BoWVector, submap_id: int) -> None:
        if keyframe_id in self.vectors:
            raise ValueError(f"keyframe {keyframe_id} already stored")
        self.vectors[keyframe_id] = vec
        self.submap_of[keyframe_id] = submap_id
        for w, weight in vec.weights.items():
            self.inverted.setdefault(w, []).append((keyframe_id, weight))

    def query(self, vec: BoWVector, k: int, s_min: float, min_distance: int,
              query_submap_id: int):
        """Top-k candidates by similarity, gated by score and submap distance."""
        # accumulate sum of min(weights) over shared words via the inverted index
        overlap: dict = {}
        for w, weight in vec.weights.items():
            for kf_id, stored in self.inverted.get(w, ()):
                overlap[kf_id] = overlap.get(kf_id, 0.0) + min(weight, stored)
        scored = []
        for kf_id, shared in overlap.items():
            if abs(self.submap_of[kf_id] - query_submap_id) < min_distance:
                continue
            # L1 similarity via shared mass: 1 - 0.5(|a|+|b| - 2*sum min) = sum min
            score = shared
            if score > s_min:
                scored.append((kf_id, score))
        scored.sort(key=lambda x: (-x[1], x[0]))
        return scored[:k]

    def save(self, path) -> None:
        with open(path, "wb") as f:
            pickle.dump({"version": SNAPSHOT_VERSION,
                         "vectors": {k: (v.weights, v.degenerate) for k, v in self.vectors.items()},
                         "submap_of": self.submap_of}, f)

    @staticmethod
    def load(path) -> "KeyframeDatabase":
        with open(path, "rb") as f:
            blob = pickle.load(f)
        if blob.get("version") != SNAPSHOT_VERSION:
            raise ValueError("unsupported database snapshot version")
        db = KeyframeDatabase()
        for kf_id, (weights, degenerate) in blob["vectors"].items():
            db.add(kf_id, BoWVector(weights, degenerate), blob["submap_of"][kf_id])
        return db
