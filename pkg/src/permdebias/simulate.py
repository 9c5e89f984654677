"""Synthetic multiple-choice tasks and a teacher with controllable order bias.

The teacher's logit at presentation position ``pos`` is

    <w*, phi[mapping[pos]]> / tau + b[pos] + eta * g(example, ordering, pos)

where ``b`` is a fixed per-slot preference and ``g`` is a standard normal
value that is a deterministic function of (seed, example, ordering, slot).
A fraction ``rho`` of the mass is left on non-label tokens.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .core import (
    MAX_OPTIONS,
    Permutation,
    RawLabelMass,
    RecordSet,
    as_permutation,
    permutation_array,
)
from .errors import TooManyOptions, ValidationError
from .rng import substream

SPLITS = ("train", "valid", "eval")


@dataclass(frozen=True)
class TeacherSpec:
    num_options: int = 4
    feature_dim: int = 16
    quality_weights: tuple = ()
    position_bias: tuple = (0.8, 0.0, -0.4, -0.4)
    noise_scale: float = 1.0
    residual_mass: float = 0.02
    temperature: float = 1.0
    seed: int = 0
    quality_scale: float = 1.0
    boost: float = 1.5

    def __post_init__(self):
        k = self.num_options
        if k < 2:
            raise ValidationError("num_options must be >= 2")
        if len(self.position_bias) != k:
            raise ValidationError(f"position_bias has {len(self.position_bias)} entries, expected {k}")
        if not 0 <= self.residual_mass <= 0.1:
            raise ValidationError("residual_mass must lie in [0, 0.1]")
        if self.temperature <= 0 or self.noise_scale < 0:
            raise ValidationError("temperature must be > 0 and noise_scale >= 0")
        w = tuple(float(x) for x in self.quality_weights)
        if not w:
            rng = substream(self.seed, "teacher", "quality_weights")
            v = rng.standard_normal(self.feature_dim)
            w = tuple(float(x) for x in v / np.linalg.norm(v) * self.quality_scale)
        if len(w) != self.feature_dim:
            raise ValidationError(f"quality_weights has {len(w)} entries, expected {self.feature_dim}")
        object.__setattr__(self, "quality_weights", w)
        object.__setattr__(self, "position_bias", tuple(float(x) for x in self.position_bias))

    @property
    def w(self) -> np.ndarray:
        return np.asarray(self.quality_weights)

    @property
    def b(self) -> np.ndarray:
        return np.asarray(self.position_bias)

    def to_json(self) -> dict:
        return {
            "num_options": self.num_options,
            "feature_dim": self.feature_dim,
            "quality_weights": list(self.quality_weights),
            "position_bias": list(self.position_bias),
            "noise_scale": self.noise_scale,
            "residual_mass": self.residual_mass,
            "temperature": self.temperature,
            "seed": self.seed,
            "quality_scale": self.quality_scale,
            "boost": self.boost,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TeacherSpec":
        obj = dict(obj)
        obj["quality_weights"] = tuple(obj.get("quality_weights", ()))
        obj["position_bias"] = tuple(obj["position_bias"])
        return cls(**obj)


_CFG_KEYS = {
    "num_options": int, "feature_dim": int, "noise_scale": float, "residual_mass": float,
    "temperature": float, "seed": int, "quality_scale": float, "boost": float,
    "n_examples": int, "valid_fraction": float, "eval_fraction": float,
}
_CFG_ALIASES = {"k": "num_options", "d": "feature_dim", "eta": "noise_scale", "rho": "residual_mass",
                "tau": "temperature", "b": "position_bias"}


def read_spec_config(path) -> tuple:
    """Parse a flat ``key = value`` file into (TeacherSpec kwargs, dataset kwargs).

    List values (position_bias, quality_weights) are comma separated.
    """
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        try:
            parser.read_string("[spec]\n" + fh.read())
        except configparser.Error as exc:
            raise ValidationError(f"{path}: {exc}") from None
    spec_kw, data_kw = {}, {}
    for raw_key, value in parser["spec"].items():
        key = _CFG_ALIASES.get(raw_key, raw_key)
        try:
            if key in ("position_bias", "quality_weights"):
                spec_kw[key] = tuple(float(v) for v in value.replace("[", "").replace("]", "").split(",") if v.strip())
            elif key in ("n_examples", "valid_fraction", "eval_fraction"):
                data_kw[key] = _CFG_KEYS[key](value)
            elif key in _CFG_KEYS:
                spec_kw[key] = _CFG_KEYS[key](value)
            else:
                raise ValidationError(f"{path}: unknown key {raw_key!r}")
        except ValueError as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"{path}: bad value for {raw_key!r}: {value!r}") from None
    return spec_kw, data_kw


@dataclass(frozen=True)
class SyntheticExample:
    example_id: str
    features: np.ndarray      # (K, d), canonical answer order
    gold: int
    split: str = "train"


@dataclass
class SyntheticDataset:
    examples: list
    valid_fraction: float = 0.1
    eval_fraction: float = 0.2
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {ex.example_id: i for i, ex in enumerate(self.examples)}

    def __len__(self):
        return len(self.examples)

    def __getitem__(self, example_id) -> SyntheticExample:
        return self.examples[self._index[example_id]]

    def split(self, name: str) -> list:
        return [ex for ex in self.examples if ex.split == name]

    @property
    def features(self) -> np.ndarray:
        return np.stack([ex.features for ex in self.examples])

    @property
    def gold(self) -> np.ndarray:
        return np.array([ex.gold for ex in self.examples])


def example_ids(n: int) -> list:
    width = max(5, len(str(n - 1)))
    return [f"ex{i:0{width}d}" for i in range(n)]


def generate_dataset(spec: TeacherSpec, n_examples: int, seed: int,
                     valid_fraction: float = 0.1, eval_fraction: float = 0.2) -> SyntheticDataset:
    """Gaussian answer features with one answer per example pushed along w*.

    Gold is recomputed as argmax <w*, phi_a>, so the boosted answer is usually,
    but not always, the gold one.
    """
    if n_examples < 1:
        raise ValidationError("n_examples must be >= 1")
    if valid_fraction < 0 or eval_fraction < 0 or valid_fraction + eval_fraction >= 1:
        raise ValidationError("split fractions must be non-negative and leave room for training")
    k, d = spec.num_options, spec.feature_dim
    rng = substream(seed, "dataset")
    feats = rng.standard_normal((n_examples, k, d))
    boosted = rng.integers(0, k, size=n_examples)
    direction = spec.w / np.linalg.norm(spec.w)
    feats[np.arange(n_examples), boosted] += spec.boost * direction
    gold = np.argmax(feats @ spec.w, axis=1)

    n_eval = int(round(eval_fraction * n_examples))
    n_valid = int(round(valid_fraction * n_examples))
    splits = np.array(["train"] * n_examples, dtype=object)
    order = rng.permutation(n_examples)
    splits[order[:n_eval]] = "eval"
    splits[order[n_eval:n_eval + n_valid]] = "valid"

    ids = example_ids(n_examples)
    examples = [SyntheticExample(ids[i], feats[i], int(gold[i]), str(splits[i])) for i in range(n_examples)]
    return SyntheticDataset(examples, valid_fraction, eval_fraction)


@lru_cache(maxsize=None)
def _all_perms(k: int) -> np.ndarray:
    if k > MAX_OPTIONS:
        raise TooManyOptions(f"K={k} exceeds the cap of {MAX_OPTIONS}")
    arr = permutation_array(k)
    arr.setflags(write=False)
    return arr


def noise_table(spec: TeacherSpec, example_id: str) -> np.ndarray:
    """(K!, K) standard normals; row = lexicographic ordering rank, column = slot."""
    k = spec.num_options
    return substream(spec.seed, "teacher", "noise", example_id).standard_normal((math.factorial(k), k))


def label_mass_table(spec: TeacherSpec, example: SyntheticExample) -> tuple:
    """Label masses (K!, K) and residuals (K!,) for every ordering, lexicographic."""
    perms = _all_perms(spec.num_options)
    quality = example.features @ spec.w / spec.temperature
    logits = quality[perms] + spec.b
    if spec.noise_scale:
        logits = logits + spec.noise_scale * noise_table(spec, example.example_id)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=1, keepdims=True)
    masses = probs * (1.0 - spec.residual_mass)
    return masses, np.full(len(perms), spec.residual_mass)


def _single_noise(spec: TeacherSpec, example_id: str, perm: Permutation) -> np.ndarray:
    # Beyond the K! table cap each ordering gets its own keyed stream.
    key = ",".join(map(str, perm.mapping))
    return substream(spec.seed, "teacher", "noise", example_id, key).standard_normal(spec.num_options)


def teacher_distribution(spec: TeacherSpec, example: SyntheticExample, permutation) -> RawLabelMass:
    perm = as_permutation(permutation)
    if perm.k != spec.num_options:
        raise ValidationError("ordering size does not match the teacher")
    if spec.num_options <= MAX_OPTIONS:
        masses, residual = label_mass_table(spec, example)
        r = perm.rank()
        return RawLabelMass(masses[r], float(residual[r]))
    logits = example.features[list(perm.mapping)] @ spec.w / spec.temperature + spec.b
    if spec.noise_scale:
        logits = logits + spec.noise_scale * _single_noise(spec, example.example_id, perm)
    e = np.exp(logits - logits.max())
    return RawLabelMass(e / e.sum() * (1.0 - spec.residual_mass), spec.residual_mass)


class SimulatedTeacher:
    """In-process teacher answering any ordering of any dataset example."""

    def __init__(self, spec: TeacherSpec, dataset: SyntheticDataset):
        self.spec = spec
        self.dataset = dataset
        self._cache: dict = {}

    def num_options(self, example_id: str) -> int:
        return self.spec.num_options

    def mass_table(self, example_id: str) -> tuple:
        hit = self._cache.get(example_id)
        if hit is None:
            hit = label_mass_table(self.spec, self.dataset[example_id])
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[example_id] = hit
        return hit

    def label_mass(self, example_id: str, permutation) -> RawLabelMass:
        if self.spec.num_options > MAX_OPTIONS:
            return teacher_distribution(self.spec, self.dataset[example_id], permutation)
        masses, residual = self.mass_table(example_id)
        r = as_permutation(permutation).rank()
        return RawLabelMass(masses[r], float(residual[r]))


PERMUTATION_POLICIES = ("all", "cyclic", "single")


def emit_recordset(spec: TeacherSpec, dataset: SyntheticDataset, permutation_policy: str = "all",
                   examples: Optional[list] = None) -> RecordSet:
    """Normalised teacher label distributions for the chosen orderings."""
    k = spec.num_options
    if permutation_policy == "all":
        if k > MAX_OPTIONS:
            raise TooManyOptions(f"K={k} exceeds the cap of {MAX_OPTIONS}")
        perms = [Permutation(tuple(p)) for p in _all_perms(k)]
    elif permutation_policy == "cyclic":
        perms = Permutation.identity(k).rotations()
    elif permutation_policy == "single":
        perms = [Permutation.identity(k)]
    else:
        raise ValidationError(f"unknown permutation policy {permutation_policy!r}")
    ranks = [p.rank() for p in perms] if k <= MAX_OPTIONS else None
    rs = RecordSet()
    for ex in (dataset.examples if examples is None else examples):
        if ranks is not None:
            masses, _ = label_mass_table(spec, ex)
            masses = masses[ranks]
        else:
            masses = np.array([teacher_distribution(spec, ex, p).masses for p in perms])
        probs = masses / masses.sum(axis=1, keepdims=True)
        rs.add_block(ex.example_id, perms, probs, ex.gold)
    return rs
