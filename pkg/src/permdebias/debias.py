"""Permutation ensembling, cyclic averaging and prior matching."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    Distribution,
    ExampleRecords,
    Permutation,
    RecordSet,
    answers_from_labels,
    as_permutation,
    labels_from_answers,
)
from .errors import (
    DegenerateLabels,
    DimensionMismatch,
    MissingRotation,
    PartialPermutationSet,
    ValidationError,
)
from .metrics import BiasReport, bias_report

log = logging.getLogger(__name__)

POLICIES = ("baseline", "prior_match", "ctx_prior_match", "cyclic", "perm_debias")
PRIOR_TOL = 1e-6
PRIOR_MAX_ITER = 1000


@dataclass
class PriorWeights:
    alpha: np.ndarray
    granularity: str
    converged: bool
    iterations: int

    def to_json(self) -> dict:
        return {
            "alpha": [float(a) for a in self.alpha],
            "granularity": self.granularity,
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PriorWeights":
        return cls(np.asarray(obj["alpha"], dtype=np.float64), obj["granularity"],
                   bool(obj["converged"]), int(obj["iterations"]))


def _sorted_mean(rows: np.ndarray, perms: list) -> np.ndarray:
    # Summing in lexicographic permutation order makes the result independent
    # of the order records were ingested in.
    order = sorted(range(len(perms)), key=lambda i: perms[i].mapping)
    return rows[order].sum(axis=0) / len(order)


def permutation_debias(example, allow_partial: bool = False) -> Distribution:
    """Average the answer-space distributions over all K! orderings.

    ``example`` is an :class:`ExampleRecords` or a mapping permutation ->
    answer-space distribution. With ``allow_partial`` a strict subset is
    averaged instead of raising.
    """
    perms, rows = _answer_example(example)
    k = rows.shape[1]
    if len(perms) != math.factorial(k) and not allow_partial:
        raise PartialPermutationSet(
            f"permutation debiasing needs all {math.factorial(k)} orderings, got {len(perms)}"
        )
    return Distribution(_sorted_mean(rows, perms))


def _answer_example(example) -> tuple:
    if isinstance(example, ExampleRecords):
        return list(example.permutations), example.answer_probs
    perms = [as_permutation(p) for p in example]
    rows = np.array([np.asarray(d, dtype=np.float64) for d in example.values()])
    return perms, rows


def cyclic_debias(example, base: Optional[Permutation] = None) -> Distribution:
    """Average over the K cyclic rotations of ``base`` (identity by default).

    Removes slot preference over that set, but not every ordering effect.
    """
    perms, rows = _answer_example(example)
    k = rows.shape[1]
    base = Permutation.identity(k) if base is None else as_permutation(base)
    index = {p: i for i, p in enumerate(perms)}
    rotations = base.rotations()
    missing = [list(r.mapping) for r in rotations if r not in index]
    if missing:
        raise MissingRotation(f"cyclic debiasing is missing rotations {missing}")
    sel = [index[r] for r in rotations]
    return Distribution(_sorted_mean(rows[sel], rotations))


def reweight(label_probs, alpha) -> Distribution:
    """Scale label probabilities by per-slot weights and renormalise."""
    p = np.asarray(label_probs, dtype=np.float64)
    a = np.asarray(alpha.alpha if isinstance(alpha, PriorWeights) else alpha, dtype=np.float64)
    if p.shape != a.shape:
        raise DimensionMismatch(f"label_probs size {p.shape} vs alpha size {a.shape}")
    scaled = a * p
    return Distribution(scaled / scaled.sum())


def _reweight_rows(rows: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    scaled = rows * alpha[..., None, :]
    return scaled / scaled.sum(axis=-1, keepdims=True)


def _fit_alpha(probs: np.ndarray, weights: np.ndarray, tol: float, max_iter: int,
               polish: bool = True) -> tuple:
    """Multiplicative fixed point making the weighted positional marginal uniform.

    probs: (n, R, K) label distributions for n independent fitting sets.
    weights: (n, R) row weights summing to one per set.
    Returns alpha (n, K) gauged to sum K, converged (n,), iterations (n,).
    """
    n, _, k = probs.shape
    support = np.einsum("nr,nrk->nk", weights, probs)
    if np.any(support <= 0):
        raise DegenerateLabels("a position has zero mass in every record; prior matching is undefined")
    target = 1.0 / k
    alpha = np.ones((n, k))
    best_alpha = alpha.copy()
    best_err = np.full(n, np.inf)
    converged = np.zeros(n, dtype=bool)
    iterations = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    for it in range(1, max_iter + 1):
        a = alpha[active]
        pos = np.einsum("nr,nrk->nk", weights[active], _reweight_rows(probs[active], a))
        err = np.abs(pos - target).max(axis=1)
        improved = err < best_err[active]
        best_err[active[improved]] = err[improved]
        best_alpha[active[improved]] = a[improved]
        iterations[active] = it
        done = err < tol
        converged[active[done]] = True
        keep = ~done
        a = a[keep] * (target / pos[keep])
        a *= k / a.sum(axis=1, keepdims=True)
        active = active[keep]
        alpha[active] = a
        if active.size == 0:
            break
    stalled = np.where(~converged)[0]
    if stalled.size and polish:
        a, ok, extra = _newton_polish(probs[stalled], weights[stalled], best_alpha[stalled], tol)
        better = ok | (_marginal_error(probs[stalled], weights[stalled], a) < best_err[stalled])
        best_alpha[stalled[better]] = a[better]
        converged[stalled] = ok
        iterations[stalled] += extra
    return best_alpha, converged, iterations


def _marginal_error(probs, weights, alpha) -> np.ndarray:
    pos = np.einsum("nr,nrk->nk", weights, _reweight_rows(probs, alpha))
    return np.abs(pos - 1.0 / probs.shape[2]).max(axis=1)


def _newton_polish(probs, weights, alpha, tol, max_iter: int = 50) -> tuple:
    """Damped Newton on the convex potential whose gradient is P(alpha) - 1/K.

    Used only where the fixed point stalls: sharply peaked examples leave the
    marginal almost flat in alpha and the multiplicative step crawls.
    """
    n, _, k = probs.shape
    beta = np.log(alpha)
    ones = np.ones((k, k)) / k

    def potential(b):
        return np.einsum("nr,nr->n", weights, np.log(np.einsum("nrk,nk->nr", probs, np.exp(b)))) - b.mean(axis=1)

    ok = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        q = _reweight_rows(probs, np.exp(beta))
        pos = np.einsum("nr,nrk->nk", weights, q)
        g = pos - 1.0 / k
        ok = np.abs(g).max(axis=1) < tol
        if ok.all():
            break
        live = ~ok
        iters[live] += 1
        qw = q * weights[..., None]
        hess = np.einsum("nk,kj->nkj", pos, np.eye(k)) - np.einsum("nrk,nrj->nkj", qw, q)
        step = np.linalg.solve(hess + ones, g[..., None])[..., 0]
        f0 = potential(beta)
        t = np.ones(n)
        for _ in range(30):
            trial = beta - t[:, None] * step
            bad = live & (potential(trial) > f0 + 1e-15)
            if not bad.any():
                break
            t[bad] *= 0.5
        beta = np.where(live[:, None], beta - t[:, None] * step, beta)
        beta -= beta.mean(axis=1, keepdims=True)
    alpha = np.exp(beta)
    return alpha * k / alpha.sum(axis=1, keepdims=True), ok, iters


def fit_prior_matching(records, granularity: str = "dataset", tol: float = PRIOR_TOL,
                       max_iter: int = PRIOR_MAX_ITER, polish: bool = True):
    """Fit slot weights whose reweighted positional distribution is uniform.

    ``dataset``: one :class:`PriorWeights` for the whole set; every example
    contributes equally regardless of how many orderings it has.
    ``context``: a dict example_id -> :class:`PriorWeights`, each fitted over
    that example's full set of K! orderings. Passing a single
    :class:`ExampleRecords` returns one :class:`PriorWeights`.

    Sets the fixed point leaves short of ``tol`` after ``max_iter`` steps get
    a Newton refinement unless ``polish`` is false.
    """
    if granularity == "dataset":
        exs = list(records.examples.values()) if isinstance(records, RecordSet) else [records]
        if not exs:
            raise ValidationError("no records to fit")
        k = exs[0].num_options
        rows = np.concatenate([ex.label_probs for ex in exs])
        w = np.concatenate([np.full(len(ex), 1.0 / (len(ex) * len(exs))) for ex in exs])
        alpha, conv, its = _fit_alpha(rows[None], w[None], tol, max_iter, polish)
        pw = PriorWeights(alpha[0], "dataset", bool(conv[0]), int(its[0]))
        if not pw.converged:
            log.warning("dataset prior matching did not converge in %d iterations", max_iter)
        return pw
    if granularity == "context":
        if isinstance(records, ExampleRecords):
            return fit_prior_matching(_single(records), "context", tol, max_iter, polish)[records.example_id]
        return _fit_context(records, tol, max_iter, polish)
    raise ValidationError(f"unknown granularity {granularity!r}")


def _single(ex: ExampleRecords) -> RecordSet:
    rs = RecordSet()
    rs.examples[ex.example_id] = ex
    return rs


def _fit_context(records: RecordSet, tol: float, max_iter: int, polish: bool = True) -> dict:
    groups: dict = {}
    for ex in records.examples.values():
        if not ex.is_full:
            raise PartialPermutationSet(
                f"context prior matching needs all orderings of {ex.example_id}, got {len(ex)}"
            )
        groups.setdefault(ex.label_probs.shape, []).append(ex)
    out = {}
    for (p, k), exs in groups.items():
        probs = np.stack([ex.label_probs for ex in exs])
        alpha, conv, its = _fit_alpha(probs, np.full((len(exs), p), 1.0 / p), tol, max_iter, polish)
        for i, ex in enumerate(exs):
            out[ex.example_id] = PriorWeights(alpha[i], "context", bool(conv[i]), int(its[i]))
    n_bad = sum(not w.converged for w in out.values())
    if n_bad:
        log.warning("context prior matching did not converge for %d examples", n_bad)
    return {eid: out[eid] for eid in records.examples}


@dataclass
class DebiasResult:
    policy: str
    distributions: dict          # example_id -> answer-space Distribution
    records: RecordSet           # every recorded ordering after the policy
    report: BiasReport
    weights: object = None       # PriorWeights or dict of them


def _baseline_row(ex: ExampleRecords, answer_rows: np.ndarray, base: Optional[Permutation]) -> np.ndarray:
    if base is None:
        ident = Permutation.identity(ex.num_options)
        if ex.has(ident):
            return answer_rows[ex.permutations.index(ident)]
        return answer_rows[ex.sorted_order()[0]]
    if not ex.has(base):
        raise ValidationError(
            f"example {ex.example_id}: baseline ordering {list(base.mapping)} was not recorded"
        )
    return answer_rows[ex.permutations.index(base)]


def apply_debias_policy(records: RecordSet, policy: str, divergence: str = "tv",
                        baseline: Optional[Permutation] = None,
                        allow_partial: bool = False) -> DebiasResult:
    """Apply one debiasing policy to every example.

    The per-example output distribution is the policy applied to the
    baseline ordering: ``baseline`` if given, else the identity ordering, else
    the lexicographically first recorded one. The report is computed over
    every recorded ordering after the policy, so accuracy is averaged over
    orderings.
    """
    if policy not in POLICIES:
        raise ValidationError(f"unknown policy {policy!r}; choose from {list(POLICIES)}")
    base = None if baseline is None else as_permutation(baseline)
    weights = None
    if policy == "prior_match":
        weights = fit_prior_matching(records, "dataset")
    elif policy == "ctx_prior_match":
        weights = fit_prior_matching(records, "context")

    out = RecordSet()
    dists = {}
    for eid, ex in records.examples.items():
        perms = ex.permutations
        mappings = ex.mappings
        if policy == "baseline":
            labels = ex.label_probs
        elif policy in ("prior_match", "ctx_prior_match"):
            w = weights if policy == "prior_match" else weights[eid]
            labels = _reweight_rows(ex.label_probs, w.alpha)
        elif policy == "perm_debias":
            ens = permutation_debias(ex, allow_partial=allow_partial).probs
            labels = labels_from_answers(np.broadcast_to(ens, mappings.shape), mappings)
        else:
            answers = ex.answer_probs
            index = {p: i for i, p in enumerate(perms)}
            cyc = np.empty_like(answers)
            for i, p in enumerate(perms):
                rots = p.rotations()
                if any(r not in index for r in rots):
                    raise MissingRotation(
                        f"example {eid}: rotations of {list(p.mapping)} are incomplete"
                    )
                cyc[i] = _sorted_mean(answers[[index[r] for r in rots]], rots)
            labels = labels_from_answers(cyc, mappings)
        answer_rows = answers_from_labels(labels, mappings)
        dists[eid] = Distribution(_baseline_row(ex, answer_rows, base))
        ex_out = out._example(eid, ex.num_options, ex.gold)
        for p, row in zip(perms, labels):
            ex_out.add(p, np.array(row))
    report = bias_report(out, divergence)
    report.extra["policy"] = policy
    if weights is not None:
        if isinstance(weights, PriorWeights):
            report.extra["prior"] = weights.to_json()
        else:
            report.extra["prior_converged"] = int(sum(w.converged for w in weights.values()))
    return DebiasResult(policy, dists, out, report, weights)
