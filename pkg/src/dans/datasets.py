"""Synthetic benchmark-shaped knowledge graphs for tests and demos.

The generator plants a latent bilinear world: each entity gets a latent
vector, each relation a bilinear form, and the highest-scoring pairs per
relation become the ground-truth triplets.  The resulting graph is
learnable by an embedding model while having realistic degree skew, which
makes it a useful stand-in when the public benchmark files are not on
disk.
"""

from __future__ import annotations

import numpy as np

from .data import TripletStore
from .errors import ConfigError


def make_synthetic_kg(n_entities: int = 135,
                      n_relations: int = 46,
                      n_train: int = 5216,
                      n_valid: int = 652,
                      n_test: int = 661,
                      latent_dim: int = 8,
                      seed: int = 0) -> TripletStore:
    """Generate a TripletStore with the requested split sizes.

    Deterministic for a given argument tuple.  Every entity and relation
    is guaranteed to appear in the train split.
    """
    n_total = n_train + n_valid + n_test
    if n_total > n_entities * n_entities * n_relations // 2:
        raise ConfigError("requested more triplets than the world can hold")
    if n_train < n_entities or n_train < n_relations:
        raise ConfigError("train split too small to cover all entities/relations")

    rng = np.random.default_rng(seed)
    latents = rng.standard_normal((n_entities, latent_dim)) / np.sqrt(latent_dim)
    # Heterogeneous relation sizes, at least 2 triplets each.
    weights = rng.dirichlet(np.full(n_relations, 1.5))
    quota = np.maximum(2, np.round(weights * n_total).astype(int))
    while quota.sum() != n_total:
        adjust = 1 if quota.sum() < n_total else -1
        r = int(rng.integers(n_relations))
        if quota[r] + adjust >= 2:
            quota[r] += adjust

    triples: list[tuple[int, int, int]] = []
    for r in range(n_relations):
        form = rng.standard_normal((latent_dim, latent_dim))
        scores = latents @ form @ latents.T
        np.fill_diagonal(scores, -np.inf)  # no self-loops
        flat = np.argsort(scores, axis=None)[::-1][:quota[r]]
        heads, tails = np.unravel_index(flat, scores.shape)
        triples.extend((int(h), r, int(t)) for h, t in zip(heads, tails))

    # Entities that no relation's top scores touched get one forced edge
    # to their nearest latent neighbor; the surplus is trimmed later from
    # outside the coverage block.
    present: set[int] = set()
    for h, _, t in triples:
        present.update((h, t))
    used = set(triples)
    similarity = latents @ latents.T
    np.fill_diagonal(similarity, -np.inf)
    n_forced = 0
    for e in range(n_entities):
        if e in present:
            continue
        partner = int(np.argmax(similarity[e]))
        r = int(rng.integers(n_relations))
        while (e, r, partner) in used:
            r = (r + 1) % n_relations
        triples.append((e, r, partner))
        used.add((e, r, partner))
        n_forced += 1

    rng.shuffle(triples)

    # Move one triplet per missing entity/relation to the front so the
    # train split covers the whole vocabulary.
    covered: set[int] = set()
    covered_rel: set[int] = set()
    front: list[int] = []
    for pos, (h, r, t) in enumerate(triples):
        if h not in covered or t not in covered or r not in covered_rel:
            covered.update((h, t))
            covered_rel.add(r)
            front.append(pos)
    reordered = [triples[i] for i in front] + \
        [t for i, t in enumerate(triples) if i not in set(front)]
    if len(front) > n_train:
        raise ConfigError("train split too small to cover all entities")
    reordered = reordered[:n_total]  # trim the forced surplus off the tail

    entity_names = [f"ent_{i:04d}" for i in range(n_entities)]
    relation_names = [f"rel_{r:03d}" for r in range(n_relations)]
    arr = np.array(reordered, dtype=np.int64)
    return TripletStore(entity_names, relation_names,
                        arr[:n_train], arr[n_train:n_train + n_valid],
                        arr[n_train + n_valid:])
