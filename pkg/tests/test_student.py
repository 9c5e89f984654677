import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from permdebias.core import Distribution, Permutation, enumerate_permutations
from permdebias.debias import apply_debias_policy
from permdebias.errors import DimensionMismatch, EmptySampleSet, MissingPermutations, ValidationError
from permdebias.simulate import TeacherSpec, emit_recordset, generate_dataset
from permdebias.student import (
    StudentData,
    StudentExample,
    StudentModel,
    TrainConfig,
    distill_loss,
    evaluate_student,
    forward,
    gradient,
    mc_distill_loss,
    train,
)


def random_model(rng, d, k, mode):
    return StudentModel(rng.normal(size=d), rng.normal(size=(k, k)), rng.normal(size=k), mode,
                        float(rng.uniform(0.5, 2.0)))


def random_batch(rng, d, k, b, kind):
    out = []
    for _ in range(b):
        perm = Permutation(tuple(rng.permutation(k)))
        ex = StudentExample(rng.normal(size=(k, d)), perm, biased_sample=int(rng.integers(k)))
        if kind == "whitebox":
            ex.target = Distribution(rng.dirichlet(np.ones(k)))
        else:
            ex.samples = list(rng.integers(0, k, size=int(rng.integers(1, 9))))
        out.append(ex)
    return out


def loss_fn(kind):
    return distill_loss if kind == "whitebox" else mc_distill_loss


def finite_difference(model, batch, kind, h=1e-5):
    f = loss_fn(kind)
    params = [("weights", model.weights), ("ec_weights", model.ec_weights), ("bias", model.bias)]
    grads = []
    for name, arr in params:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            if name == "ec_weights" and model.mode == "distill":
                continue
            old = arr[idx]
            arr[idx] = old + h
            up = f(model, batch)
            arr[idx] = old - h
            down = f(model, batch)
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g.ravel())
    return np.concatenate(grads)


class TestForward:
    def test_zero_model_uniform(self, rng):
        m = StudentModel.zeros(5, 4)
        out = forward(m, StudentExample(rng.normal(size=(4, 5)), Permutation((2, 0, 3, 1))))
        np.testing.assert_allclose(out.probs, 0.25)

    def test_identical_features_uniform(self, rng):
        m = StudentModel(rng.normal(size=3), np.zeros((3, 3)), np.zeros(3))
        feats = np.tile(rng.normal(size=3), (3, 1))
        np.testing.assert_allclose(forward(m, StudentExample(feats, Permutation((1, 2, 0)))).probs, 1 / 3)

    def test_hand_set_two_options(self):
        m = StudentModel(np.array([1.0, -1.0]), np.zeros((2, 2)), np.array([0.5, 0.0]))
        feats = np.array([[2.0, 1.0], [0.0, 1.0]])          # slot logits 1.5 and -1.0
        z = np.array([1.5, -1.0])
        slot = np.exp(z) / np.exp(z).sum()
        np.testing.assert_allclose(forward(m, StudentExample(feats, Permutation((0, 1)))).probs, slot, atol=1e-15)
        np.testing.assert_allclose(forward(m, StudentExample(feats, Permutation((1, 0)))).probs, slot[::-1],
                                   atol=1e-15)

    def test_error_correct_offset(self):
        ec = np.array([[2.0, 0.0], [0.0, 0.0]])
        m = StudentModel(np.zeros(1), ec, np.zeros(2), "error_correct")
        # Sample is answer 1, shown at slot 0 under the swap: ec row 0 applies.
        out = forward(m, StudentExample(np.zeros((2, 1)), Permutation((1, 0)), biased_sample=1))
        want_slot = np.exp([2.0, 0.0]) / np.exp([2.0, 0.0]).sum()
        np.testing.assert_allclose(out.probs, want_slot[::-1], atol=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            forward(StudentModel.zeros(3, 2), StudentExample(np.zeros((2, 4)), Permutation((0, 1))))

    def test_ec_needs_sample(self):
        with pytest.raises(ValidationError):
            forward(StudentModel.zeros(3, 2, "error_correct"), StudentExample(np.zeros((2, 3)), Permutation((0, 1))))

    def test_distill_mode_zeroes_ec(self):
        m = StudentModel(np.zeros(2), np.ones((2, 2)), np.zeros(2), "distill")
        assert not m.ec_weights.any()

    def test_checkpoint_round_trip(self, rng):
        m = random_model(rng, 4, 3, "error_correct")
        js = m.to_json()
        assert {"weights", "ec_weights", "bias", "mode", "feature_dim", "K"} <= set(js)
        back = StudentModel.from_json(js)
        for a in ("weights", "ec_weights", "bias"):
            assert getattr(back, a).tobytes() == getattr(m, a).tobytes()


class TestLosses:
    def test_matching_target_gives_entropy(self, rng):
        m = random_model(rng, 3, 4, "distill")
        ex = StudentExample(rng.normal(size=(4, 3)), Permutation((3, 1, 0, 2)))
        ex.target = forward(m, ex)
        p = ex.target.probs
        assert distill_loss(m, [ex]) == pytest.approx(-(p * np.log(p)).sum(), rel=1e-12)
        assert np.abs(gradient(m, [ex]).flat()).max() < 1e-14

    def test_one_hot_half(self):
        m = StudentModel.zeros(1, 2)
        ex = StudentExample(np.zeros((2, 1)), Permutation((0, 1)), target=Distribution([1.0, 0.0]))
        assert distill_loss(m, [ex]) == pytest.approx(math.log(2), abs=1e-15)

    def test_zero_model_ordering_invariant(self, rng):
        m = StudentModel.zeros(3, 4)
        feats = rng.normal(size=(4, 3))
        target = Distribution(rng.dirichlet(np.ones(4)))
        losses = {distill_loss(m, [StudentExample(feats[list(p.mapping)], p, target=target)])
                  for p in enumerate_permutations(4)}
        assert max(losses) - min(losses) < 1e-15

    def test_mc_uniform_model(self):
        m = StudentModel.zeros(2, 3)
        ex = StudentExample(np.zeros((3, 2)), Permutation((0, 1, 2)), samples=[2])
        assert mc_distill_loss(m, [ex]) == pytest.approx(math.log(3), abs=1e-15)

    def test_mc_certain_model(self):
        m = StudentModel(np.zeros(1), np.zeros((2, 2)), np.array([800.0, 0.0]))
        ex = StudentExample(np.zeros((2, 1)), Permutation((1, 0)), samples=[1])
        assert mc_distill_loss(m, [ex]) == 0.0

    def test_mc_needs_samples(self):
        with pytest.raises(EmptySampleSet):
            mc_distill_loss(StudentModel.zeros(1, 2), [StudentExample(np.zeros((2, 1)), Permutation((0, 1)))])

    def test_mc_converges_to_whitebox(self):
        rng = np.random.default_rng(7)
        m = StudentModel(0.3 * rng.normal(size=3), np.zeros((4, 4)), 0.3 * rng.normal(size=4))
        feats, perm = rng.normal(size=(4, 3)), Permutation((2, 3, 0, 1))
        target = rng.dirichlet(np.ones(4))
        samples = rng.choice(4, size=4096, p=target)
        wb = distill_loss(m, [StudentExample(feats, perm, target=Distribution(target))])
        mc = mc_distill_loss(m, [StudentExample(feats, perm, samples=list(samples))])
        nll = -np.log(forward(m, StudentExample(feats, perm)).probs)
        se = np.sqrt((target * (nll - wb) ** 2).sum() / 4096)
        assert abs(wb - mc) < min(0.01, 3 * se)

    @given(st.integers(0, 2**32 - 1))
    def test_loss_at_least_entropy(self, seed):
        rng = np.random.default_rng(seed)
        m = random_model(rng, 3, 3, "distill")
        batch = random_batch(rng, 3, 3, 4, "whitebox")
        ent = np.mean([-(e.target.probs * np.log(e.target.probs)).sum() for e in batch])
        assert distill_loss(m, batch) >= ent - 1e-12


class TestGradient:
    @pytest.mark.parametrize("mode,kind,seed", [("distill", "whitebox", 0), ("distill", "mc", 1),
                                                ("error_correct", "whitebox", 2), ("error_correct", "mc", 3)])
    def test_finite_differences(self, mode, kind, seed):
        rng = np.random.default_rng(seed)
        for _ in range(20):
            d, k = int(rng.integers(1, 6)), int(rng.integers(2, 6))
            model = random_model(rng, d, k, mode)
            batch = random_batch(rng, d, k, int(rng.integers(1, 6)), kind)
            g = gradient(model, batch, kind).flat()
            fd = finite_difference(model, batch, kind)
            rel = np.linalg.norm(g - fd) / max(np.linalg.norm(g) + np.linalg.norm(fd), 1e-12)
            assert rel < 1e-4

    def test_single_sample_equals_one_hot(self, rng):
        m = random_model(rng, 3, 4, "error_correct")
        feats, perm = rng.normal(size=(4, 3)), Permutation((1, 0, 3, 2))
        mc = StudentExample(feats, perm, samples=[3], biased_sample=0)
        wb = StudentExample(feats, perm, target=Distribution([0, 0, 0, 1.0]), biased_sample=0)
        assert gradient(m, [mc], "mc").flat().tobytes() == gradient(m, [wb], "whitebox").flat().tobytes()


@pytest.fixture(scope="module")
def task():
    spec = TeacherSpec(seed=0)
    ds = generate_dataset(spec, 1500, seed=0)
    rs = emit_recordset(spec, ds)
    feats = {e.example_id: e.features for e in ds.examples}

    def data(split):
        return StudentData.from_records(rs, feats, [e.example_id for e in ds.split(split)])

    return rs, ds, data("train"), data("valid"), data("eval")


class TestTraining:
    def test_lr_zero_unchanged(self, task):
        _, _, tr, va, _ = task
        m0 = StudentModel.zeros(16, 4, "error_correct")
        m, hist = train(m0, tr.subset(np.arange(50)), TrainConfig(lr=0.0, epochs=1), valid=va)
        assert not m.weights.any() and not m.ec_weights.any() and not m.bias.any()
        assert hist[0]["step"] == 0

    def test_deterministic(self, task):
        _, _, tr, va, _ = task
        a, ha = train(StudentModel.zeros(16, 4, "error_correct"), tr, TrainConfig(seed=5), valid=va)
        b, hb = train(StudentModel.zeros(16, 4, "error_correct"), tr, TrainConfig(seed=5), valid=va)
        assert a.weights.tobytes() == b.weights.tobytes() and a.ec_weights.tobytes() == b.ec_weights.tobytes()
        assert str(ha) == str(hb)

    def test_distill_reaches_debiased_teacher(self, task):
        rs, ds, tr, va, ev = task
        m, _ = train(StudentModel.zeros(16, 4), tr, TrainConfig(seed=0), valid=va)
        ids = [e.example_id for e in ds.split("eval")]
        teacher = apply_debias_policy(rs.subset(ids), "perm_debias").report.aggregate["accuracy"]
        assert evaluate_student(m, ev)["accuracy"] >= teacher - 0.02

    def test_error_correct_beats_black_box_teacher(self, task):
        rs, ds, tr, va, ev = task
        m, _ = train(StudentModel.zeros(16, 4, "error_correct"), tr, TrainConfig(seed=0), valid=va)
        ids = [e.example_id for e in ds.split("eval")]
        black_box = apply_debias_policy(rs.subset(ids), "baseline").report.aggregate["accuracy_sampled"]
        scores = evaluate_student(m, ev)
        assert scores["accuracy"] > black_box
        assert scores["ps"] > 0

    def test_loss_non_increasing_over_epochs(self, task):
        _, _, tr, va, _ = task
        ok = 0
        for seed in range(10):
            _, hist = train(StudentModel.zeros(16, 4), tr, TrainConfig(seed=seed, epochs=3, eval_every=10**9),
                            valid=va)
            losses = [h["loss"] for h in hist[1:]]
            ok += all(b <= a for a, b in zip(losses, losses[1:]))
        assert ok >= 9

    def test_mc_training_needs_counts(self, task):
        _, _, tr, _, _ = task
        with pytest.raises(EmptySampleSet):
            train(StudentModel.zeros(16, 4), tr, TrainConfig(loss="mc"))

    def test_validation_carved_when_absent(self, task):
        _, _, tr, _, _ = task
        _, hist = train(StudentModel.zeros(16, 4), tr.subset(np.arange(100)),
                        TrainConfig(validation_fraction=0.2, epochs=1))
        assert not math.isnan(hist[-1]["val_acc"])

    def test_expand_permutations(self, task):
        _, _, tr, va, _ = task
        m, hist = train(StudentModel.zeros(16, 4), tr.subset(np.arange(20)),
                        TrainConfig(epochs=1, expand_permutations=True), valid=va)
        assert hist[-1]["step"] == 20 * 24 // 4


class TestEvaluate:
    def test_zero_model(self, task):
        *_, ev = task
        scores = evaluate_student(StudentModel.zeros(16, 4), ev)
        assert scores["ps"] == 0.0
        assert abs(scores["accuracy"] - 0.25) < 0.06

    def test_invariant_teacher_ps_small(self):
        spec = TeacherSpec(position_bias=(0, 0, 0, 0), noise_scale=0.0, seed=2)
        ds = generate_dataset(spec, 600, seed=2)
        rs = emit_recordset(spec, ds)
        feats = {e.example_id: e.features for e in ds.examples}
        tr = StudentData.from_records(rs, feats, [e.example_id for e in ds.split("train")])
        ev = StudentData.from_records(rs, feats, [e.example_id for e in ds.split("eval")])
        m, _ = train(StudentModel.zeros(16, 4), tr, TrainConfig(seed=0))
        assert evaluate_student(m, ev)["ps"] < 0.05

    def test_needs_all_orderings(self):
        spec = TeacherSpec()
        ds = generate_dataset(spec, 4, seed=0)
        rs = emit_recordset(spec, ds, "cyclic")
        with pytest.raises(MissingPermutations):
            StudentData.from_records(rs, {e.example_id: e.features for e in ds.examples})
