"""Triplet scoring functions and the embedding-model cross-entropy loss.

Every decoder turns (head embedding, relation parameters, tail embedding)
into a raw score and a plausibility probability.  Training goes through
the differentiable ``score_batch``; evaluation uses the closed-form
``scores_all_tails`` / ``scores_all_heads`` fast paths, which are checked
against the batch path in the tests.

Complex-valued decoders store an embedding of even dimension ``d`` as
real parts in the first half and imaginary parts in the second.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .errors import ConfigError, ContractError
from .rgcn import uniform_init


@dataclass
class ScoredTriplet:
    """Score of one candidate triplet; ``probability == sigmoid`` mapping
    of the raw score (margin-shifted for the rotation decoder)."""

    head: int
    relation: int
    tail: int
    raw_score: float
    probability: float


class Decoder:
    """Shared surface: relation parameters plus scoring in two layouts."""

    name: str = ""

    def __init__(self, n_relations: int, dim: int, rng: np.random.Generator):
        self.n_relations = n_relations
        self.dim = dim
        self.relation_params = ad.Tensor(
            uniform_init(rng, (n_relations, self.relation_dim()), dim),
            requires_grad=True)

    def relation_dim(self) -> int:
        return self.dim

    def named_tensors(self) -> list[tuple[str, ad.Tensor]]:
        return [("decoder.relation_params", self.relation_params)]

    def relation_rows(self, r_idx: np.ndarray) -> ad.Tensor:
        return ad.gather_rows(self.relation_params, np.asarray(r_idx))

    def probability(self, raw: ad.Tensor) -> ad.Tensor:
        return ad.sigmoid(raw)

    def raw_batch(self, h_emb: ad.Tensor, rel_rows: ad.Tensor,
                  t_emb: ad.Tensor) -> ad.Tensor:
        raise NotImplementedError

    def score_batch(self, h_emb: ad.Tensor, r_idx: np.ndarray,
                    t_emb: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        """Differentiable (raw, probability) columns for a triplet batch."""
        raw = self.raw_batch(h_emb, self.relation_rows(r_idx), t_emb)
        return raw, self.probability(raw)

    def score(self, h_emb, relation: int, t_emb, head: int = -1,
              tail: int = -1) -> ScoredTriplet:
        """Score a single triplet given embeddings for both ends."""
        h = ad.Tensor(np.asarray(h_emb, dtype=np.float32).reshape(1, -1))
        t = ad.Tensor(np.asarray(t_emb, dtype=np.float32).reshape(1, -1))
        raw, p = self.score_batch(h, np.array([relation]), t)
        return ScoredTriplet(head, relation, tail,
                             float(raw.array[0, 0]), float(p.array[0, 0]))

    def relation_condition(self, r_idx: np.ndarray) -> np.ndarray:
        """A d-vector per relation for conditioning the sample generator."""
        return self.relation_params.array[np.asarray(r_idx)]

    def scores_all_tails(self, h_row: np.ndarray, relation: int,
                         entities: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def scores_all_heads(self, t_row: np.ndarray, relation: int,
                         entities: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class DistMult(Decoder):
    name = "distmult"

    def raw_batch(self, h_emb, rel_rows, t_emb):
        return ad.row_sum(ad.mul(ad.mul(h_emb, rel_rows), t_emb))

    def scores_all_tails(self, h_row, relation, entities):
        return entities @ (h_row * self.relation_params.array[relation])

    def scores_all_heads(self, t_row, relation, entities):
        return entities @ (t_row * self.relation_params.array[relation])


def _halves(t: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
    k = t.shape[1] // 2
    return ad.narrow(t, 1, 0, k), ad.narrow(t, 1, k, k)


class ComplEx(Decoder):
    """Complex bilinear scoring; the tail is conjugated by default.

    ``conjugate_tail=False`` drops the conjugation, which loses the
    ability to model asymmetric relations but is available for
    comparison runs.
    """

    name = "complex"

    def __init__(self, n_relations, dim, rng, conjugate_tail: bool = True):
        if dim % 2:
            raise ConfigError("complex decoder needs an even embedding dim")
        super().__init__(n_relations, dim, rng)
        self.conjugate_tail = conjugate_tail

    def raw_batch(self, h_emb, rel_rows, t_emb):
        h_re, h_im = _halves(h_emb)
        r_re, r_im = _halves(rel_rows)
        t_re, t_im = _halves(t_emb)
        prod_re = ad.sub(ad.mul(h_re, r_re), ad.mul(h_im, r_im))
        prod_im = ad.add(ad.mul(h_re, r_im), ad.mul(h_im, r_re))
        if self.conjugate_tail:
            real_part = ad.add(ad.mul(prod_re, t_re), ad.mul(prod_im, t_im))
        else:
            real_part = ad.sub(ad.mul(prod_re, t_re), ad.mul(prod_im, t_im))
        return ad.row_sum(real_part)

    def _rel_halves(self, relation: int) -> tuple[np.ndarray, np.ndarray]:
        row = self.relation_params.array[relation]
        k = self.dim // 2
        return row[:k], row[k:]

    def scores_all_tails(self, h_row, relation, entities):
        k = self.dim // 2
        h_re, h_im = h_row[:k], h_row[k:]
        r_re, r_im = self._rel_halves(relation)
        w_re = h_re * r_re - h_im * r_im
        w_im = h_re * r_im + h_im * r_re
        if not self.conjugate_tail:
            w_im = -w_im
        return entities[:, :k] @ w_re + entities[:, k:] @ w_im

    def scores_all_heads(self, t_row, relation, entities):
        k = self.dim // 2
        t_re, t_im = t_row[:k], t_row[k:]
        r_re, r_im = self._rel_halves(relation)
        sign = 1.0 if self.conjugate_tail else -1.0
        u_re = r_re * t_re + sign * r_im * t_im
        u_im = sign * r_re * t_im - r_im * t_re
        return entities[:, :k] @ u_re + entities[:, k:] @ u_im


class RotatE(Decoder):
    """Relations as rotations in the complex plane; raw score is minus the
    squared distance, probability is sigmoid(margin + raw)."""

    name = "rotate"

    def __init__(self, n_relations, dim, rng, margin: float = 12.0):
        if dim % 2:
            raise ConfigError("rotation decoder needs an even embedding dim")
        self.margin = float(margin)
        super().__init__(n_relations, dim, rng)
        # phases initialised over the full circle
        phases = rng.uniform(-np.pi, np.pi,
                             size=self.relation_params.shape).astype(np.float32)
        self.relation_params.array[...] = phases

    def relation_dim(self) -> int:
        return self.dim // 2

    def probability(self, raw: ad.Tensor) -> ad.Tensor:
        return ad.sigmoid(ad.add_const(raw, self.margin))

    def raw_batch(self, h_emb, rel_rows, t_emb):
        h_re, h_im = _halves(h_emb)
        t_re, t_im = _halves(t_emb)
        c, s = ad.cos(rel_rows), ad.sin(rel_rows)
        diff_re = ad.sub(ad.sub(ad.mul(h_re, c), ad.mul(h_im, s)), t_re)
        diff_im = ad.sub(ad.add(ad.mul(h_re, s), ad.mul(h_im, c)), t_im)
        sq = ad.add(ad.row_sum(ad.mul(diff_re, diff_re)),
                    ad.row_sum(ad.mul(diff_im, diff_im)))
        return ad.scale(sq, -1.0)

    def relation_condition(self, r_idx):
        theta = self.relation_params.array[np.asarray(r_idx)]
        return np.concatenate([np.cos(theta), np.sin(theta)], axis=1)

    def _rotated(self, h_row, relation):
        k = self.dim // 2
        theta = self.relation_params.array[relation]
        c, s = np.cos(theta), np.sin(theta)
        return h_row[:k] * c - h_row[k:] * s, h_row[:k] * s + h_row[k:] * c

    def scores_all_tails(self, h_row, relation, entities):
        rot_re, rot_im = self._rotated(h_row, relation)
        k = self.dim // 2
        cross = entities[:, :k] @ rot_re + entities[:, k:] @ rot_im
        norms = np.einsum("ij,ij->i", entities, entities)
        target = rot_re @ rot_re + rot_im @ rot_im
        return -(norms + target - 2.0 * cross)

    def scores_all_heads(self, t_row, relation, entities):
        k = self.dim // 2
        theta = self.relation_params.array[relation]
        c, s = np.cos(theta), np.sin(theta)
        t_re, t_im = t_row[:k], t_row[k:]
        v_re = t_re * c + t_im * s
        v_im = t_im * c - t_re * s
        cross = entities[:, :k] @ v_re + entities[:, k:] @ v_im
        norms = np.einsum("ij,ij->i", entities, entities)
        return -(norms + t_row @ t_row - 2.0 * cross)


DECODERS = {cls.name: cls for cls in (DistMult, ComplEx, RotatE)}


def build_decoder(name: str, n_relations: int, dim: int,
                  rng: np.random.Generator, rotate_margin: float = 12.0,
                  conjugate_tail: bool = True) -> Decoder:
    if name not in DECODERS:
        raise ConfigError(f"unknown decoder {name!r}; choose from {sorted(DECODERS)}")
    if name == "rotate":
        return RotatE(n_relations, dim, rng, margin=rotate_margin)
    if name == "complex":
        return ComplEx(n_relations, dim, rng, conjugate_tail=conjugate_tail)
    return DistMult(n_relations, dim, rng)


def probability_all(decoder: Decoder, raw: np.ndarray) -> np.ndarray:
    shift = decoder.margin if isinstance(decoder, RotatE) else 0.0
    return expit(raw + shift)


def base_loss(p: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    """Mean binary cross-entropy over scored triplets.

    ``labels`` holds 1 for positives and 0 for sampled negatives; the sum
    form is divided by the number of scored triplets so the learning rate
    does not depend on how many negatives each positive carries.
    """
    labels = np.asarray(labels, dtype=np.float32).reshape(-1, 1)
    if labels.size == 0:
        raise ContractError("base_loss needs at least one scored triplet")
    if labels.shape[0] != p.shape[0]:
        raise ContractError("labels and probabilities differ in length")
    y = ad.Tensor(labels)
    one_minus_y = ad.Tensor(1.0 - labels)
    terms = ad.add(ad.mul(y, ad.log(p)),
                   ad.mul(one_minus_y, ad.log(ad.add_const(ad.scale(p, -1.0), 1.0))))
    return ad.scale(ad.mean(terms), -1.0)
