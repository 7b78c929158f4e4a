"""Typicality of perceptions and Bayesian weighting of competing theories."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .configspace import PsiSource
from .ensemble import Ensemble, rng_for
from .perception import SBM, SCBM, SQM, Perception, PerceptionSet, Theory


class ZeroMeasureError(ValueError):
    pass


class ImpossibleObservationError(ValueError):
    pass


def typicality_from_densities(m: Sequence[float], w: Sequence[float]) -> list[float]:
    """T(p) = mu({p' : m(p') <= m(p)}) / mu(all), with mu = sum of w * m.

    Equal densities all fall in the "<=" set. Sums use ``math.fsum`` so the
    result is independent of summation order. Perceptions with m = 0 get
    T = 0: they carry no measure.
    """
    m = [float(v) for v in m]
    c = [float(a) * b for a, b in zip(w, m)]
    total = math.fsum(c)
    if not total > 0:
        raise ZeroMeasureError("theory assigns zero total measure")
    order = sorted(range(len(m)), key=lambda i: m[i])
    T = [0.0] * len(m)
    k = 0
    while k < len(order):
        end = k
        while end + 1 < len(order) and m[order[end + 1]] == m[order[k]]:
            end += 1
        num = math.fsum(c[i] for i in order[:end + 1])
        for i in order[k:end + 1]:
            T[i] = num / total
        k = end + 1
    return T


TypicalityRule = Callable[[Sequence[float], Sequence[float]], list]


@dataclass
class TypicalityReport:
    tag: str
    ids: list[str]
    m: list[float]
    T: list[float]
    total: float

    def __getitem__(self, pid: str) -> float:
        return self.T[self.ids.index(pid)]

    def rows(self):
        return list(zip(self.ids, self.m, self.T))

    def to_dict(self):
        return {"theory": self.tag, "total_measure": self.total,
                "perceptions": [{"id": i, "m": m, "T": t} for i, m, t in self.rows()]}


def typicality(S: PerceptionSet, theory: Theory, rule: TypicalityRule = typicality_from_densities) -> TypicalityReport:
    """Typicality of every perception in ``S`` under ``theory``.

    ``rule`` maps (densities, prior weights) to typicalities; swap it to try
    other typicality notions.
    """
    m = theory.densities(S)
    w = S.weights
    T = rule(m, w)
    total = math.fsum(float(a) * b for a, b in zip(w, m))
    return TypicalityReport(theory.tag, S.ids, m.tolist(), list(T), total)


@dataclass
class TheoryComparison:
    tags: list[str]
    priors: list[float]
    likelihoods: list[float]
    posteriors: list[float]

    def to_dict(self):
        return {"theories": [{"theory": t, "prior": p, "likelihood": l, "posterior": q}
                             for t, p, l, q in zip(self.tags, self.priors, self.likelihoods, self.posteriors)]}


def compare_theories(observed: Perception | str, S: PerceptionSet, theories) -> TheoryComparison:
    """Posterior over theories with the observed perception's typicality as
    likelihood. A theory giving the observation zero measure (or zero total
    measure) gets likelihood 0."""
    pid = observed if isinstance(observed, str) else observed.id
    if pid not in S.ids:
        raise ValueError(f"observed perception {pid!r} is not in the perception set")
    tags, priors, likes = [], [], []
    for theory, prior in theories:
        if not prior > 0:
            raise ValueError(f"prior for {theory.tag} must be positive")
        try:
            like = typicality(S, theory)[pid]
        except ZeroMeasureError:
            like = 0.0
        tags.append(theory.tag)
        priors.append(float(prior))
        likes.append(float(like))
    prods = [p * l for p, l in zip(priors, likes)]
    z = math.fsum(prods)
    if not z > 0:
        raise ImpossibleObservationError("observation impossible under every candidate theory")
    return TheoryComparison(tags, priors, likes, [q / z for q in prods])


# -- SCBM vs SQM typicality agreement ----------------------------------------


def _typicality_matrix(m: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Vectorized typicality for replicate rows of densities m (B, P)."""
    c = m * w
    total = c.sum(axis=1, keepdims=True)
    le = m[:, None, :] <= m[:, :, None]  # [b, p, q] = m_q <= m_p
    num = np.einsum("bpq,bq->bp", le, c)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, num / total, np.nan)


def _disjoint_single_time(S: PerceptionSet) -> bool:
    if len(S.times) != 1:
        return False
    ps = list(S)
    return not any(ps[i].region.overlaps(ps[j].region) for i in range(len(ps)) for j in range(i + 1, len(ps)))


@dataclass
class AgreementReport:
    ids: list[str]
    m_sqm: list[float]
    T_sqm: list[float]
    m_scbm: list[float]
    T_scbm: list[float]
    band: list[float]            # 3-sigma Monte Carlo band on T_SCBM
    band_method: str
    sbm_members: list[int]
    T_sbm: list[list[float] | None]   # per SBM member; None if it misses every region
    n: int

    @property
    def deviations(self) -> list[float]:
        return [abs(a - b) for a, b in zip(self.T_scbm, self.T_sqm)]

    @property
    def within(self) -> list[bool]:
        return [d < b or d == 0.0 for d, b in zip(self.deviations, self.band)]

    @property
    def fraction_within(self) -> float:
        return float(np.mean(self.within))

    def sbm_divergent(self) -> list[tuple[int, str, float]]:
        """(member, perception id, |T_SBM - T_SQM|) where SBM leaves the band."""
        out = []
        for member, row in zip(self.sbm_members, self.T_sbm):
            if row is None:
                continue
            for pid, ts, tq, b in zip(self.ids, row, self.T_sqm, self.band):
                if abs(ts - tq) > b:
                    out.append((member, pid, abs(ts - tq)))
        return out

    def to_dict(self):
        return {
            "N": self.n, "band_method": self.band_method, "fraction_within": self.fraction_within,
            "perceptions": [
                {"id": i, "m_sqm": a, "T_sqm": b, "m_scbm": c, "T_scbm": d, "band": e, "within": f}
                for i, a, b, c, d, e, f in zip(self.ids, self.m_sqm, self.T_sqm, self.m_scbm,
                                               self.T_scbm, self.band, self.within)
            ],
            "sbm": [{"member": k, "T": row} for k, row in zip(self.sbm_members, self.T_sbm)],
        }


def typicality_agreement_experiment(S: PerceptionSet, source: PsiSource, ens: Ensemble,
                                    n_sbm: int = 5, replicates: int = 2000, seed: int = 0) -> AgreementReport:
    """Compare SCBM and SQM typicalities perception by perception.

    The band on T_SCBM is three times its Monte Carlo standard deviation.
    For single-time families with disjoint regions, ensemble cell counts are
    multinomial under the |psi|^2 hypothesis, so the deviation is estimated
    from ``replicates`` simulated count vectors at the SQM masses. It is
    floored by the delta-method deviation of the cumulative mass, which the
    simulation cannot resolve for cells far below 1/replicates. Other families
    fall back to a bootstrap over ensemble members, floored by a
    dependence-free bound on the delta-method deviation.

    Also reports the SBM typicalities of the first ``n_sbm`` members taken as
    single-trajectory theories.
    """
    grid = source.grid
    sqm = SQM(source)
    scbm = SCBM(ens, grid)
    w = S.weights
    m_q = sqm.densities(S)
    T_q = np.array(typicality_from_densities(m_q, w))
    hits = scbm.indicators(S)
    m_s = hits.mean(axis=0)
    T_s = np.array(typicality_from_densities(m_s, w))
    N = ens.n
    rng = rng_for(seed)

    if _disjoint_single_time(S):
        probs = np.append(m_q, max(0.0, 1.0 - m_q.sum()))
        counts = rng.multinomial(N, probs / probs.sum(), size=replicates)[:, :-1]
        reps = _typicality_matrix(counts / N, w)
        sigma = np.nanstd(reps, axis=0)
        total = float(np.sum(w * m_q))
        le = m_q[None, :] <= m_q[:, None]
        var = np.array([np.sum(m_q * (w * (le[p] - T_q[p])) ** 2) for p in range(len(m_q))])
        sigma = np.maximum(sigma, np.sqrt(var / N) / total)
        method = "null-multinomial"
    else:
        idx = rng.integers(0, N, size=(replicates, N))
        reps = _typicality_matrix(hits[idx].mean(axis=1), w)
        sigma = np.nanstd(reps, axis=0)
        # Cells no member reaches give a zero bootstrap spread. Floor with the
        # delta-method deviation, bounded by Cauchy-Schwarz because indicators
        # of overlapping or multi-time perceptions are correlated.
        total = float(np.sum(w * m_q))
        le = m_q[None, :] <= m_q[:, None]
        sd = np.sqrt(m_q * (1 - m_q) / N)
        floor = np.array([np.sum(np.abs(w * (le[p] - T_q[p])) * sd) for p in range(len(m_q))]) / total
        sigma = np.maximum(sigma, floor)
        method = "bootstrap"

    members = list(range(min(n_sbm, N)))
    T_b = []
    for k in members:
        try:
            T_b.append(typicality(S, SBM(ens.trajectory(k), grid)).T)
        except ZeroMeasureError:
            T_b.append(None)
    return AgreementReport(S.ids, m_q.tolist(), T_q.tolist(), m_s.tolist(), T_s.tolist(),
                           (3 * sigma).tolist(), method, members, T_b, N)
