"""Structural features, K-means speciation and nearest-centroid assignment."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .graph import GenotypeGraph
from .populations import Population, SpeciesRef


@dataclass(frozen=True)
class FeatureVector:
    network_size: float
    node_count: int
    edge_count: int

    def as_array(self) -> np.ndarray:
        return np.array([self.network_size, self.node_count, self.edge_count], dtype=float)


def extract_features(graph: GenotypeGraph, species_sizes: Mapping[int, float] | None = None) -> FeatureVector:
    """(network size, intermediate node count, edge count including terminal edges).

    Module size is the sum of conv filters and dense units.  Blueprint nodes
    carry no layers yet, so each contributes the mean size of the module
    species it points at (``species_sizes``).
    """
    size = 0.0
    for nid in graph.intermediate:
        content = graph.content(nid)
        if isinstance(content, SpeciesRef):
            size += float((species_sizes or {}).get(content.species_id, 0.0))
        else:
            size += content.size()
    return FeatureVector(size, len(graph.intermediate), len(graph.edges))


def zscore(samples: np.ndarray, mean=None, std=None):
    """Per-feature standardisation; constant features are left unscaled."""
    samples = np.asarray(samples, dtype=float)
    if mean is None:
        mean = samples.mean(axis=0)
        std = samples.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (samples - mean) / std, mean, std


def wcss(samples: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    return float(((samples - centroids[labels]) ** 2).sum())


def _nearest(samples, centroids):
    d = ((samples[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1), d


def lloyd(samples: np.ndarray, centroids: np.ndarray, tolerance: float = 1e-6, max_iters: int = 100):
    """Batch Lloyd iterations from the given centroids.

    Returns labels, centroids, the within-cluster sum of squares after every
    assignment step, and the iteration count.  An emptied cluster is re-seeded
    at the sample farthest from its current centroid.
    """
    samples = np.asarray(samples, dtype=float)
    centroids = np.array(centroids, dtype=float)
    history = []
    iters = 0
    labels, d = _nearest(samples, centroids)
    for iters in range(1, max_iters + 1):
        history.append(wcss(samples, labels, centroids))
        new = centroids.copy()
        for c in range(len(centroids)):
            members = samples[labels == c]
            if len(members):
                new[c] = members.mean(axis=0)
        for c in range(len(centroids)):
            if not (labels == c).any():
                far = int(d[np.arange(len(samples)), labels].argmax())
                new[c] = samples[far]
                labels[far] = c
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        labels, d = _nearest(samples, centroids)
        if shift < tolerance:
            break
    history.append(wcss(samples, labels, centroids))
    return labels, centroids, history, iters


def _plus_plus(samples, k, rng):
    first = int(rng.integers(len(samples)))
    chosen = [first]
    for _ in range(1, k):
        d = ((samples[:, None, :] - samples[chosen][None, :, :]) ** 2).sum(axis=2).min(axis=1)
        total = d.sum()
        if total <= 0:
            remaining = [i for i in range(len(samples)) if i not in chosen]
            chosen.append(remaining[int(rng.integers(len(remaining)))])
        else:
            chosen.append(int(rng.choice(len(samples), p=d / total)))
    return samples[chosen]


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    history: list
    iterations: int

    @property
    def inertia(self) -> float:
        return self.history[-1]


def kmeans(samples, k: int, tolerance: float = 1e-6, max_iters: int = 100,
           rng: np.random.Generator | None = None, n_init: int = 10) -> KMeansResult:
    """Lloyd's K-means with k-means++ seeding, best of ``n_init`` restarts by WCSS.

    Samples are expected to be standardised already (see ``zscore``).
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    if k < 1 or k > len(samples):
        raise ValueError(f"k={k} needs 1 <= k <= {len(samples)} samples")
    rng = rng if rng is not None else np.random.default_rng(0)
    best = None
    for _ in range(max(1, n_init)):
        init = _plus_plus(samples, k, rng)
        labels, centroids, history, iters = lloyd(samples, init, tolerance, max_iters)
        if best is None or history[-1] < best.history[-1] - 1e-12:
            best = KMeansResult(labels, centroids, history, iters)
    return best


def best_of_all_seedings(samples, k: int, tolerance: float = 1e-9, max_iters: int = 300) -> KMeansResult:
    """Exhaustive reference: Lloyd from every k-subset of samples, lowest WCSS wins."""
    samples = np.asarray(samples, dtype=float)
    best = None
    for combo in itertools.combinations(range(len(samples)), k):
        labels, centroids, history, iters = lloyd(samples, samples[list(combo)], tolerance, max_iters)
        if best is None or history[-1] < best.history[-1] - 1e-12:
            best = KMeansResult(labels, centroids, history, iters)
    return best


@dataclass
class Species:
    id: int
    members: set = field(default_factory=set)
    centroid: np.ndarray | None = None  # normalised space of the latest speciation
    raw_mean: np.ndarray | None = None  # mean raw features of the members
    shared_fitness: float | None = None


def assign_species(member, species: list[Species], new_species_threshold: float, new_id: int) -> int:
    """Nearest centroid in normalised space, or ``new_id`` if every centroid is too far."""
    member = np.asarray(member, dtype=float)
    best_id, best_d = None, np.inf
    for s in sorted(species, key=lambda s: s.id):
        d = float(np.sqrt(((member - s.centroid) ** 2).sum()))
        if d < best_d:
            best_id, best_d = s.id, d
    if best_id is None or best_d > new_species_threshold:
        return new_id
    return best_id


class SpeciesSet:
    """Live species of one population plus the last known state of extinct ones."""

    def __init__(self, threshold: float = 3.0):
        self.threshold = threshold
        self.species: dict[int, Species] = {}
        self.extinct: dict[int, Species] = {}
        self.next_id = 1

    def live_ids(self) -> list[int]:
        return sorted(self.species)

    def _new(self) -> Species:
        s = Species(self.next_id)
        self.next_id += 1
        return s

    def _refresh(self, population: Population, raw: dict[int, np.ndarray], mean, std) -> None:
        for s in self.species.values():
            s.members = {m.uid for m in population if m.species == s.id}
        for sid in [sid for sid, s in self.species.items() if not s.members]:
            self.extinct[sid] = self.species.pop(sid)
        for s in self.species.values():
            rows = np.array([raw[u] for u in sorted(s.members)])
            s.raw_mean = rows.mean(axis=0)
            s.centroid = zscore(s.raw_mean[None, :], mean, std)[0][0]

    def initialize(self, population: Population, features: dict, k: int,
                   rng: np.random.Generator, tolerance: float = 1e-6, max_iters: int = 100) -> None:
        """Cluster the whole population into ``k`` species (fewer if it is smaller)."""
        uids = [m.uid for m in population]
        raw = {u: features[u].as_array() for u in uids}
        x, mean, std = zscore(np.array([raw[u] for u in uids]))
        result = kmeans(x, min(k, len(uids)), tolerance, max_iters, rng)
        ids = {}
        for label in sorted(set(result.labels.tolist())):
            ids[label] = self._new()
            self.species[ids[label].id] = ids[label]
        for m, label in zip(population.members, result.labels):
            m.species = ids[int(label)].id
        self._refresh(population, raw, mean, std)

    def speciate(self, population: Population, features: dict) -> None:
        """Assign every member without a species; elites keep theirs.

        Centroids come from the previous members' mean features, standardised
        with statistics of the current population.
        """
        uids = [m.uid for m in population]
        raw = {u: features[u].as_array() for u in uids}
        _, mean, std = zscore(np.array([raw[u] for u in uids]))
        known = [s for s in self.species.values() if s.raw_mean is not None]
        for s in known:
            s.centroid = zscore(s.raw_mean[None, :], mean, std)[0][0]
        for m in population.members:
            if m.species is not None and m.species in self.species:
                continue
            point = zscore(raw[m.uid][None, :], mean, std)[0][0]
            sid = assign_species(point, known, self.threshold, self.next_id)
            if sid == self.next_id:
                founded = self._new()
                founded.centroid = point
                founded.raw_mean = raw[m.uid]
                self.species[founded.id] = founded
                known.append(founded)
            m.species = sid
        self._refresh(population, raw, mean, std)

    def nearest_live(self, species_id: int) -> int:
        """Closest live species (raw-feature distance) to a possibly extinct one."""
        if species_id in self.species:
            return species_id
        live = self.live_ids()
        if not live:
            raise ValueError("no live species")
        gone = self.extinct.get(species_id)
        if gone is None or gone.raw_mean is None:
            return live[0]
        rows = np.array([self.species[s].raw_mean for s in live] + [gone.raw_mean])
        z, _, _ = zscore(rows)
        d = ((z[:-1] - z[-1]) ** 2).sum(axis=1)
        return live[int(d.argmin())]

    def mean_sizes(self) -> dict[int, float]:
        sizes = {sid: float(s.raw_mean[0]) for sid, s in self.extinct.items() if s.raw_mean is not None}
        sizes.update({sid: float(s.raw_mean[0]) for sid, s in self.species.items()})
        return sizes
