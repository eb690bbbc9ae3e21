"""Linear reward model over a finite prompt/response catalog.

A catalog fixes the world: prompts, their candidate responses, and a
d-dimensional feature vector per (prompt, response). Rewards are linear,
``theta @ features``. Choice probabilities follow the usual logit forms:
sigmoid of a reward difference for pairs, softmax over the choice set for
larger sets, and population mixtures thereof.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import CatalogKeyError, InvalidChoiceError

__all__ = [
    "Catalog",
    "LatentType",
    "Population",
    "reward",
    "pairwise_prob",
    "choice_prob",
    "mixture_choice_prob",
    "softmax",
]

SIMPLEX_ATOL = 1e-12


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max subtraction)."""
    scores = np.asarray(scores, dtype=float)
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class Catalog:
    """Finite prompt/response universe with feature vectors.

    Use :meth:`build` rather than the raw constructor; it validates the
    invariants (>= 2 responses per prompt, consistent feature dimension,
    unique response ids within a prompt).
    """

    d: int
    prompts: tuple[str, ...]
    _responses: dict[str, tuple[str, ...]] = field(repr=False)
    _features: dict[str, np.ndarray] = field(repr=False)
    _index: dict[str, dict[str, int]] = field(repr=False)

    @classmethod
    def build(
        cls, entries: Mapping[str, Sequence[tuple[str, Iterable[float]]]]
    ) -> "Catalog":
        """Build from ``{prompt_id: [(response_id, feature_vector), ...]}``.

        Response order within a prompt is preserved and meaningful.
        """
        if not entries:
            raise ValueError("catalog needs at least one prompt")
        responses: dict[str, tuple[str, ...]] = {}
        features: dict[str, np.ndarray] = {}
        index: dict[str, dict[str, int]] = {}
        d: int | None = None
        for prompt, items in entries.items():
            rids = [rid for rid, _ in items]
            if len(rids) < 2:
                raise ValueError(f"prompt {prompt!r} has fewer than 2 responses")
            if len(set(rids)) != len(rids):
                raise ValueError(f"duplicate response ids under prompt {prompt!r}")
            mat = np.array([np.asarray(vec, dtype=float) for _, vec in items])
            if mat.ndim != 2:
                raise ValueError(f"features for prompt {prompt!r} must be vectors")
            if d is None:
                d = mat.shape[1]
            elif mat.shape[1] != d:
                raise ValueError(
                    f"feature dimension mismatch at prompt {prompt!r}: "
                    f"{mat.shape[1]} != {d}"
                )
            if not np.all(np.isfinite(mat)):
                raise ValueError(f"non-finite feature under prompt {prompt!r}")
            mat.setflags(write=False)
            responses[prompt] = tuple(rids)
            features[prompt] = mat
            index[prompt] = {rid: i for i, rid in enumerate(rids)}
        assert d is not None
        if d < 1:
            raise ValueError("feature dimension must be >= 1")
        return cls(
            d=d,
            prompts=tuple(entries.keys()),
            _responses=responses,
            _features=features,
            _index=index,
        )

    def responses(self, prompt: str) -> tuple[str, ...]:
        try:
            return self._responses[prompt]
        except KeyError:
            raise CatalogKeyError(f"unknown prompt {prompt!r}") from None

    def features(self, prompt: str) -> np.ndarray:
        """(n_responses, d) feature matrix of a prompt; read-only view."""
        try:
            return self._features[prompt]
        except KeyError:
            raise CatalogKeyError(f"unknown prompt {prompt!r}") from None

    def feature(self, prompt: str, response: str) -> np.ndarray:
        return self.features(prompt)[self.response_index(prompt, response)]

    def response_index(self, prompt: str, response: str) -> int:
        try:
            return self._index[prompt][response]
        except KeyError:
            if prompt not in self._index:
                raise CatalogKeyError(f"unknown prompt {prompt!r}") from None
            raise CatalogKeyError(
                f"unknown response {response!r} under prompt {prompt!r}"
            ) from None

    def to_json_dict(self) -> dict:
        return {
            "d": self.d,
            "prompts": [
                {
                    "id": p,
                    "responses": [
                        {"id": r, "features": list(map(float, f))}
                        for r, f in zip(self._responses[p], self._features[p])
                    ],
                }
                for p in self.prompts
            ],
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping) -> "Catalog":
        entries = {
            p["id"]: [(r["id"], r["features"]) for r in p["responses"]]
            for p in doc["prompts"]
        }
        cat = cls.build(entries)
        if int(doc["d"]) != cat.d:
            raise ValueError(f"declared d={doc['d']} but features have d={cat.d}")
        return cat

    def content_hash(self) -> str:
        """sha256 over the canonical JSON form; identity for manifests."""
        blob = json.dumps(self.to_json_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class LatentType:
    """One latent preference type: weight vector theta and mixture mass eta."""

    id: int
    theta: np.ndarray
    eta: float

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        if not (0.0 <= self.eta <= 1.0):
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")


@dataclass(frozen=True)
class Population:
    """Discrete mixture of latent types; etas sum to one."""

    types: tuple[LatentType, ...]

    def __post_init__(self):
        if len(self.types) < 1:
            raise ValueError("population needs at least one type")
        total = sum(t.eta for t in self.types)
        if abs(total - 1.0) > SIMPLEX_ATOL:
            raise ValueError(f"mixture weights sum to {total}, not 1")
        dims = {t.theta.shape for t in self.types}
        if len(dims) != 1:
            raise ValueError("all types must share the same theta dimension")

    @classmethod
    def from_weights(
        cls, thetas: Sequence[Iterable[float]], etas: Sequence[float]
    ) -> "Population":
        if len(thetas) != len(etas):
            raise ValueError("thetas and etas must have equal length")
        return cls(
            types=tuple(
                LatentType(id=k, theta=np.asarray(t, dtype=float), eta=float(e))
                for k, (t, e) in enumerate(zip(thetas, etas))
            )
        )

    @property
    def k(self) -> int:
        return len(self.types)

    @property
    def etas(self) -> np.ndarray:
        return np.array([t.eta for t in self.types])

    @property
    def thetas(self) -> np.ndarray:
        return np.stack([t.theta for t in self.types])


def reward(catalog: Catalog, theta: np.ndarray, prompt: str, response: str) -> float:
    """Linear reward theta @ psi(prompt, response)."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (catalog.d,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({catalog.d},)")
    return float(theta @ catalog.feature(prompt, response))


def pairwise_prob(
    catalog: Catalog, theta: np.ndarray, prompt: str, y1: str, y2: str
) -> float:
    """P(y1 beats y2) = sigmoid of the reward difference."""
    if y1 == y2:
        raise InvalidChoiceError(f"pair must be distinct, got {y1!r} twice")
    delta = reward(catalog, theta, prompt, y1) - reward(catalog, theta, prompt, y2)
    return float(expit(delta))


def choice_prob(
    catalog: Catalog,
    theta: np.ndarray,
    prompt: str,
    choice_set: Sequence[str],
    chosen: str,
) -> float:
    """P(chosen is top pick among choice_set): softmax over linear rewards."""
    if chosen not in choice_set:
        raise InvalidChoiceError(f"chosen {chosen!r} not in choice set")
    if len(set(choice_set)) != len(choice_set):
        raise InvalidChoiceError("choice set contains duplicates")
    if len(choice_set) < 2:
        raise InvalidChoiceError("choice set needs at least 2 alternatives")
    theta = np.asarray(theta, dtype=float)
    idx = [catalog.response_index(prompt, y) for y in choice_set]
    rewards = catalog.features(prompt)[idx] @ theta
    probs = softmax(rewards)
    return float(probs[choice_set.index(chosen)])


def mixture_choice_prob(
    catalog: Catalog,
    population: Population,
    prompt: str,
    choice_set: Sequence[str],
    chosen: str,
) -> float:
    """Population-level choice probability: eta-weighted average over types."""
    return float(
        sum(
            t.eta * choice_prob(catalog, t.theta, prompt, choice_set, chosen)
            for t in population.types
        )
    )
