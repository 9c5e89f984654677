"""A compact softmax student distilled from a permutation-debiased teacher.

The student scores every presentation slot with a linear function of the
answer shown there, shared across slots. In error-correction mode it also
sees the slot of one sampled biased teacher decision and adds a learned
``ec_weights[sample_slot, slot]`` offset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .core import (
    Distribution,
    Permutation,
    RecordSet,
    answers_from_labels,
    as_permutation,
    labels_from_answers,
    permutation_array,
    permutation_ranks,
)
from .errors import (
    DimensionMismatch,
    EmptySampleSet,
    MissingPermutations,
    ValidationError,
)
from .metrics import mean_pairwise_divergence
from .rng import substream

MODES = ("distill", "error_correct")
LOSSES = ("whitebox", "mc")


@dataclass
class StudentModel:
    weights: np.ndarray          # (d,) shared slot scorer
    ec_weights: np.ndarray       # (K, K) sample slot -> slot logit offset
    bias: np.ndarray             # (K,) per-slot logit offset
    mode: str = "distill"
    temperature: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown student mode {self.mode!r}")
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.ec_weights = np.asarray(self.ec_weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        k = self.bias.size
        if self.ec_weights.shape != (k, k):
            raise DimensionMismatch(f"ec_weights must be {k}x{k}")
        if self.mode == "distill":
            self.ec_weights = np.zeros((k, k))

    @classmethod
    def zeros(cls, feature_dim: int, num_options: int, mode: str = "distill",
              temperature: float = 1.0) -> "StudentModel":
        return cls(np.zeros(feature_dim), np.zeros((num_options, num_options)),
                   np.zeros(num_options), mode, temperature)

    @property
    def feature_dim(self) -> int:
        return self.weights.size

    @property
    def num_options(self) -> int:
        return self.bias.size

    def copy(self) -> "StudentModel":
        return replace(self, weights=self.weights.copy(), ec_weights=self.ec_weights.copy(),
                       bias=self.bias.copy())

    def to_json(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "ec_weights": self.ec_weights.tolist(),
            "bias": self.bias.tolist(),
            "mode": self.mode,
            "feature_dim": self.feature_dim,
            "K": self.num_options,
            "temperature": self.temperature,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "StudentModel":
        model = cls(obj["weights"], obj["ec_weights"], obj["bias"], obj["mode"],
                    float(obj.get("temperature", 1.0)))
        if model.feature_dim != obj["feature_dim"] or model.num_options != obj["K"]:
            raise ValidationError("checkpoint shapes disagree with feature_dim/K")
        return model


@dataclass
class Gradient:
    weights: np.ndarray
    ec_weights: np.ndarray
    bias: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights, self.ec_weights.ravel(), self.bias])


@dataclass
class StudentExample:
    """One training tuple: slot features for a given ordering plus a target.

    ``features`` are (K, d) in presentation order. ``target`` is an
    answer-space distribution (white-box); ``samples`` are canonical answers
    drawn from the black-box teacher. ``biased_sample`` is the canonical
    answer of one biased teacher draw under this ordering.
    """

    features: np.ndarray
    permutation: Permutation
    target: Optional[Distribution] = None
    samples: Optional[Sequence[int]] = None
    biased_sample: Optional[int] = None


class Batch(NamedTuple):
    features: np.ndarray      # (B, K, d) presentation order
    mappings: np.ndarray      # (B, K)
    targets: np.ndarray       # (B, K) answer space, rows sum to 1
    sample_pos: np.ndarray    # (B,) slot of the biased sample, -1 if none


def _stack(examples, loss_kind: str) -> Batch:
    if isinstance(examples, Batch):
        return examples
    examples = list(examples)
    if not examples:
        raise EmptySampleSet("empty batch")
    feats = np.stack([np.asarray(e.features, dtype=np.float64) for e in examples])
    perms = [as_permutation(e.permutation) for e in examples]
    k = feats.shape[1]
    mappings = np.array([p.mapping for p in perms], dtype=np.int64)
    targets = np.empty((len(examples), k))
    for i, e in enumerate(examples):
        if loss_kind == "whitebox":
            if e.target is None:
                raise ValidationError("white-box loss needs a target distribution")
            targets[i] = np.asarray(e.target)
        else:
            if not e.samples:
                raise EmptySampleSet("black-box loss needs at least one sample per example")
            c = np.bincount(np.asarray(e.samples, dtype=np.int64), minlength=k)
            targets[i] = c / c.sum()
    sample_pos = np.array([-1 if e.biased_sample is None else p.position_of(e.biased_sample)
                           for e, p in zip(examples, perms)], dtype=np.int64)
    return Batch(feats, mappings, targets, sample_pos)


def _check(model: StudentModel, batch: Batch) -> None:
    if batch.features.shape[2] != model.feature_dim or batch.features.shape[1] != model.num_options:
        raise DimensionMismatch(
            f"features {batch.features.shape[1:]} do not match model (K={model.num_options}, d={model.feature_dim})"
        )
    if model.mode == "error_correct" and np.any(batch.sample_pos < 0):
        raise ValidationError("error-correction student needs a biased sample for every example")


def _raw_logits(model: StudentModel, features: np.ndarray, sample_pos=None) -> np.ndarray:
    z = features @ model.weights + model.bias
    if model.mode == "error_correct" and sample_pos is not None:
        z = z + model.ec_weights[sample_pos]
    return z


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _slot_probs(model: StudentModel, batch: Batch) -> np.ndarray:
    return _softmax(_raw_logits(model, batch.features, batch.sample_pos) / model.temperature)


def forward(model: StudentModel, example: StudentExample) -> Distribution:
    """Student distribution over canonical answers for one presented ordering."""
    perm = as_permutation(example.permutation)
    feats = np.asarray(example.features, dtype=np.float64)
    if feats.shape != (model.num_options, model.feature_dim):
        raise DimensionMismatch(f"features {feats.shape} vs model ({model.num_options}, {model.feature_dim})")
    sp = None
    if model.mode == "error_correct":
        if example.biased_sample is None:
            raise ValidationError("error-correction student needs a biased sample")
        sp = perm.position_of(example.biased_sample)
    p = _softmax(_raw_logits(model, feats, sp) / model.temperature)
    return Distribution(answers_from_labels(p, perm.mapping))


def _cross_entropy(model: StudentModel, batch: Batch) -> float:
    _check(model, batch)
    z = _raw_logits(model, batch.features, batch.sample_pos) / model.temperature
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    t_slot = labels_from_answers(batch.targets, batch.mappings)
    with np.errstate(invalid="ignore"):
        terms = np.where(t_slot > 0, -t_slot * logp, 0.0)
    return float(terms.sum(axis=1).mean())


def distill_loss(model: StudentModel, batch) -> float:
    """Mean cross-entropy to the white-box debiased targets (KL up to a constant)."""
    return _cross_entropy(model, _stack(batch, "whitebox"))


def mc_distill_loss(model: StudentModel, batch) -> float:
    """Mean negative log-likelihood of the sampled canonical answers."""
    return _cross_entropy(model, _stack(batch, "mc"))


def gradient(model: StudentModel, batch, loss_kind: str = "whitebox") -> Gradient:
    """Exact gradient of :func:`distill_loss` or :func:`mc_distill_loss`."""
    if loss_kind not in LOSSES:
        raise ValidationError(f"unknown loss kind {loss_kind!r}")
    b = _stack(batch, loss_kind)
    _check(model, b)
    n = b.features.shape[0]
    p = _slot_probs(model, b)
    t_slot = labels_from_answers(b.targets, b.mappings)
    dz = (p - t_slot) / (model.temperature * n)
    g_w = np.einsum("bk,bkd->d", dz, b.features)
    g_b = dz.sum(axis=0)
    g_ec = np.zeros_like(model.ec_weights)
    if model.mode == "error_correct":
        np.add.at(g_ec, b.sample_pos, dz)
    return Gradient(g_w, g_ec, g_b)


@dataclass
class StudentData:
    """Teacher view of a set of examples, arranged for vectorised training.

    biased: (n, P, K) normalised teacher label distributions, one row per
    ordering in ``mappings`` (lexicographic when complete).
    debiased: (n, K) permutation-debiased answer distributions.
    counts: optional (n, K) black-box sample counts per canonical answer.
    """

    example_ids: list
    features: np.ndarray
    mappings: np.ndarray
    biased: np.ndarray
    debiased: np.ndarray
    gold: Optional[np.ndarray] = None
    counts: Optional[np.ndarray] = None
    _identity_row: int = field(default=-1, repr=False)

    def __post_init__(self):
        k = self.mappings.shape[1]
        ident = np.where((self.mappings == np.arange(k)).all(axis=1))[0]
        self._identity_row = int(ident[0]) if ident.size else -1
        self._full = self.mappings.shape[0] == math.factorial(k)

    def __len__(self):
        return len(self.example_ids)

    @property
    def num_options(self) -> int:
        return self.mappings.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]

    def subset(self, idx) -> "StudentData":
        idx = np.asarray(idx, dtype=np.int64)
        return StudentData(
            [self.example_ids[i] for i in idx], self.features[idx], self.mappings,
            self.biased[idx], self.debiased[idx],
            None if self.gold is None else self.gold[idx],
            None if self.counts is None else self.counts[idx],
        )

    def with_counts(self, counts: np.ndarray) -> "StudentData":
        out = self.subset(np.arange(len(self)))
        out.counts = np.asarray(counts, dtype=np.float64)
        return out

    def labels(self) -> np.ndarray:
        """Gold when available, else the debiased teacher's decision."""
        return self.gold if self.gold is not None else np.argmax(self.debiased, axis=1)

    def row_of(self, mappings: np.ndarray) -> np.ndarray:
        if self._full:
            return permutation_ranks(mappings)
        lookup = {tuple(m): i for i, m in enumerate(self.mappings)}
        try:
            return np.array([lookup[tuple(m)] for m in mappings], dtype=np.int64)
        except KeyError as exc:
            raise MissingPermutations(f"ordering {list(exc.args[0])} not recorded") from None

    @classmethod
    def from_records(cls, records: RecordSet, features: dict, example_ids=None) -> "StudentData":
        """Assemble from a record set with every ordering of every example."""
        ids = list(records.example_ids if example_ids is None else example_ids)
        if not ids:
            raise ValidationError("no examples")
        k = records[ids[0]].num_options
        mappings = permutation_array(k)
        biased = np.empty((len(ids), len(mappings), k))
        for i, eid in enumerate(ids):
            ex = records[eid]
            if not ex.is_full:
                raise MissingPermutations(f"example {eid} lacks some orderings ({len(ex)} recorded)")
            biased[i] = ex.label_probs[ex.sorted_order()]
        debiased = answers_from_labels(biased, mappings).sum(axis=1) / len(mappings)
        gold = None
        if all(records[eid].gold is not None for eid in ids):
            gold = np.array([records[eid].gold for eid in ids], dtype=np.int64)
        feats = np.stack([np.asarray(features[eid], dtype=np.float64) for eid in ids])
        return cls(ids, feats, mappings, biased, debiased, gold)


def _gather_batch(data: StudentData, idx: np.ndarray, mappings: np.ndarray, sample_pos: np.ndarray,
                  targets: np.ndarray) -> Batch:
    feats = data.features[idx[:, None], mappings]
    return Batch(feats, mappings, targets, sample_pos)


def _draw_slots(probs: np.ndarray, rng) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    return np.minimum((u[:, None] >= cdf).sum(axis=1), probs.shape[1] - 1)


def answer_distributions(model: StudentModel, data: StudentData, rows=None) -> np.ndarray:
    """Student answer distributions (n, R, K) for the orderings ``rows``.

    In error-correction mode the biased sample is marginalised exactly,
    weighting each sampled slot by the teacher's probability of it.
    """
    rows = np.arange(len(data.mappings)) if rows is None else np.asarray(rows)
    maps = data.mappings[rows]                                   # (R, K)
    feats = data.features[:, maps]                               # (n, R, K, d)
    base = (feats @ model.weights + model.bias)
    if model.mode == "error_correct":
        z = (base[:, :, None, :] + model.ec_weights[None, None]) / model.temperature  # (n, R, S, K)
        p = (_softmax(z) * data.biased[:, rows, :, None]).sum(axis=2)
    else:
        p = _softmax(base / model.temperature)
    return answers_from_labels(p, np.broadcast_to(maps, p.shape))


def student_accuracy(model: StudentModel, data: StudentData) -> float:
    """Accuracy on the identity ordering; exact expectation over the biased sample."""
    if data._identity_row < 0:
        raise MissingPermutations("identity ordering not available")
    labels = data.labels()
    if model.mode == "error_correct":
        maps = data.mappings[data._identity_row]
        base = data.features[:, maps] @ model.weights + model.bias            # (n, K)
        z = (base[:, None, :] + model.ec_weights[None]) / model.temperature    # (n, S, K)
        decisions = np.argmax(z, axis=2)                                      # slot == answer
        w = data.biased[:, data._identity_row, :]
        return float((w * (decisions == labels[:, None])).sum(axis=1).mean())
    p = answer_distributions(model, data, [data._identity_row])[:, 0]
    return float(np.mean(np.argmax(p, axis=1) == labels))


def evaluate_student(model: StudentModel, data: StudentData, divergence: str = "tv") -> dict:
    """Identity-ordering accuracy and permutation sensitivity over all K! orderings."""
    if not data._full:
        raise MissingPermutations(
            f"evaluation needs all {math.factorial(data.num_options)} orderings, got {len(data.mappings)}"
        )
    dists = answer_distributions(model, data)
    ps = mean_pairwise_divergence(dists, divergence)
    return {"accuracy": student_accuracy(model, data), "ps": float(np.mean(ps)), "n_examples": len(data)}


@dataclass
class TrainConfig:
    lr: float = 1e-2
    epochs: int = 2
    batch_size: int = 4
    seed: int = 0
    validation_fraction: float = 0.1
    eval_every: int = 1000
    loss: str = "whitebox"
    expand_permutations: bool = False

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValidationError(f"unknown loss {self.loss!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ValidationError("batch_size and eval_every must be >= 1, epochs >= 0")


def train(model: StudentModel, data: StudentData, config: TrainConfig,
          valid: Optional[StudentData] = None) -> tuple:
    """Mini-batch SGD with a fixed step; returns (best-validation model, history).

    Each example is shown under a freshly drawn uniform ordering every epoch
    (or under all orderings with ``expand_permutations``). History rows are
    dicts with epoch, step, loss and val_acc; step 0 scores the initial model.
    """
    if len(data) == 0:
        raise ValidationError("empty training set")
    if config.loss == "mc" and data.counts is None:
        raise EmptySampleSet("black-box training needs sample counts")
    rng = substream(config.seed, "train")
    if valid is None:
        n_valid = int(round(config.validation_fraction * len(data)))
        order = rng.permutation(len(data))
        valid = data.subset(np.sort(order[:n_valid])) if n_valid else None
        data = data.subset(np.sort(order[n_valid:]))
    if config.loss == "mc":
        sums = data.counts.sum(axis=1)
        if np.any(sums <= 0):
            raise EmptySampleSet("an example has no black-box samples")
        targets_all = data.counts / sums[:, None]
    else:
        targets_all = data.debiased

    model = model.copy()
    k = data.num_options
    n_perm = len(data.mappings)

    def score(m):
        return student_accuracy(m, valid) if valid is not None and len(valid) else float("nan")

    best, best_acc = model.copy(), score(model)
    history = [{"epoch": 0, "step": 0, "loss": float("nan"), "val_acc": best_acc}]
    step = seen = since = 0
    running, running_n = 0.0, 0
    for epoch in range(1, config.epochs + 1):
        if config.expand_permutations:
            ex_idx = np.repeat(np.arange(len(data)), n_perm)
            rows = np.tile(np.arange(n_perm), len(data))
            shuffle = rng.permutation(ex_idx.size)
            ex_idx, rows = ex_idx[shuffle], rows[shuffle]
            maps = data.mappings[rows]
        else:
            ex_idx = rng.permutation(len(data))
            maps = rng.permuted(np.tile(np.arange(k), (ex_idx.size, 1)), axis=1)
            rows = data.row_of(maps)
        if model.mode == "error_correct":
            sample_pos = _draw_slots(data.biased[ex_idx, rows], rng)
        else:
            sample_pos = np.full(ex_idx.size, -1, dtype=np.int64)
        for start in range(0, ex_idx.size, config.batch_size):
            sl = slice(start, start + config.batch_size)
            idx = ex_idx[sl]
            batch = _gather_batch(data, idx, maps[sl], sample_pos[sl], targets_all[idx])
            running += _cross_entropy(model, batch) * idx.size
            running_n += idx.size
            if config.lr:
                g = gradient(model, batch, "whitebox")
                model.weights -= config.lr * g.weights
                model.bias -= config.lr * g.bias
                if model.mode == "error_correct":
                    model.ec_weights -= config.lr * g.ec_weights
            step += 1
            seen += idx.size
            since += idx.size
            last = start + config.batch_size >= ex_idx.size
            if since >= config.eval_every or last:
                acc = score(model)
                history.append({"epoch": epoch, "step": step, "loss": running / running_n, "val_acc": acc})
                if acc > best_acc or (np.isnan(best_acc) and not np.isnan(acc)):
                    best, best_acc = model.copy(), acc
                elif valid is None:
                    best = model.copy()
                since, running, running_n = 0, 0.0, 0
    return best, history
