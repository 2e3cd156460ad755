"""Query/gallery retrieval scoring with mAP and CMC.

Scores are verifier probabilities; higher means more likely the same
identity.  Each image is encoded once and the pairwise heads run over the
cached pyramids.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import DimensionError
from .model import ModelConfig, as_image_batch, heads_from_pyramids, logistic, pyramids
from .nn import Layers, ParamSet
from .tensor import Tensor

DEFAULT_KS = (1, 5, 10)


@dataclass
class RankList:
    query: int
    order: np.ndarray      # gallery indices, best first
    relevant: np.ndarray   # bool per rank position

    @property
    def num_relevant(self) -> int:
        return int(self.relevant.sum())


def _pyramid_bank(images, layers, config, chunk):
    banks = []
    for s in range(0, len(images), chunk):
        banks.append({k: v.data for k, v in pyramids(images[s:s + chunk], layers, config).items()})
    return {k: np.concatenate([b[k] for b in banks]) for k in banks[0]}


def score_all(params: ParamSet, config: ModelConfig, queries, gallery, chunk: int = 32,
              symmetric: bool = False) -> np.ndarray:
    """``S[q, g]`` = eval-mode probability that query ``q`` and gallery ``g`` match.

    The query is the matching reference; ``symmetric`` averages the logits
    of both orders, as :func:`forward_pair` does.
    """
    q_imgs, g_imgs = as_image_batch(queries), as_image_batch(gallery)
    layers = Layers(params, train=False)
    pq = _pyramid_bank(q_imgs, layers, config, chunk)
    pg = _pyramid_bank(g_imgs, layers, config, chunk)
    nq, ng = len(q_imgs), len(g_imgs)
    logits = np.empty((nq, ng))
    pairs = [(q, g) for q in range(nq) for g in range(ng)]
    for s in range(0, len(pairs), chunk):
        qi, gi = np.array(pairs[s:s + chunk]).T
        pa = {k: Tensor(v[qi]) for k, v in pq.items()}
        pb = {k: Tensor(v[gi]) for k, v in pg.items()}
        z = heads_from_pyramids(pa, pb, layers, config).logits.data
        if symmetric:
            z = 0.5 * (z + heads_from_pyramids(pb, pa, layers, config).logits.data)
        logits[qi, gi] = z
    return logistic(logits)


def rank(scores: np.ndarray, query_ids, gallery_ids) -> list[RankList]:
    """Rank lists by descending score; ties keep ascending gallery index."""
    scores = np.asarray(scores, dtype=np.float64)
    query_ids, gallery_ids = np.asarray(query_ids), np.asarray(gallery_ids)
    if scores.shape != (len(query_ids), len(gallery_ids)):
        raise DimensionError(f"scores {scores.shape} vs {len(query_ids)} queries x {len(gallery_ids)} gallery")
    out = []
    for q in range(len(query_ids)):
        order = np.argsort(-scores[q], kind="stable")
        out.append(RankList(q, order, gallery_ids[order] == query_ids[q]))
    return out


def _usable(ranklists: Sequence[RankList]) -> list[RankList]:
    usable = [r for r in ranklists if r.num_relevant > 0]
    skipped = len(ranklists) - len(usable)
    if skipped:
        warnings.warn(f"{skipped} quer{'y' if skipped == 1 else 'ies'} without relevant gallery items excluded")
    return usable


# AP, mAP and CMC are ratios of small integers; exact rationals make them
# independent of summation order and round once at the end.

def _ap_exact(relevant) -> Fraction:
    positions = np.flatnonzero(np.asarray(relevant, dtype=bool))
    return sum((Fraction(k + 1, int(p) + 1) for k, p in enumerate(positions)), Fraction(0)) / len(positions)


def average_precision(relevant: np.ndarray) -> float:
    """Mean over relevant positions ``k`` of the precision within the top ``k``."""
    return float(_ap_exact(relevant))


def mean_ap(ranklists: Sequence[RankList]) -> float:
    usable = _usable(ranklists)
    if not usable:
        return float("nan")
    return float(sum((_ap_exact(r.relevant) for r in usable), Fraction(0)) / len(usable))


def cmc(ranklists: Sequence[RankList], ks: Sequence[int] = DEFAULT_KS) -> dict[int, float]:
    """Fraction of queries with a relevant item within the top ``k``, per ``k``."""
    usable = _usable(ranklists)
    out = {}
    for k in ks:
        if k < 1:
            raise ValueError("k must be >= 1")
        if usable and k > len(usable[0].order):
            warnings.warn(f"top-{k} exceeds the gallery size {len(usable[0].order)}; clamped")
        if not usable:
            out[k] = float("nan")
            continue
        out[k] = float(Fraction(sum(bool(r.relevant[:k].any()) for r in usable), len(usable)))
    return out


def metrics_rows(ranklists: Sequence[RankList], ks: Sequence[int] = DEFAULT_KS) -> list[tuple[str, float]]:
    usable = _usable(ranklists)  # warn once, not per metric
    curve = cmc(usable, ks)
    return [("mAP", mean_ap(usable))] + [(f"top{k}", v) for k, v in curve.items()]


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("metric", "value"))
    for name, value in rows:
        writer.writerow((name, repr(float(value))))
    return buf.getvalue()


def scores_csv(scores: np.ndarray) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in np.asarray(scores))


def query_gallery_split(ids: np.ndarray, pool: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First sample of every identity in ``pool`` is a query, the rest form the gallery."""
    seen, queries, gallery = set(), [], []
    for i in pool:
        key = int(ids[i])
        (gallery if key in seen else queries).append(int(i))
        seen.add(key)
    return np.array(queries, dtype=np.int64), np.array(gallery, dtype=np.int64)
