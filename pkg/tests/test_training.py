import io
import json
from dataclasses import replace

import numpy as np
import pytest

from tscm.data import SyntheticWorldConfig, generate_synthetic, mine_triplets
from tscm.errors import ConfigError, FrozenTeacherError, NonFiniteError, ShapeError
from tscm.losses import ALL_FOUR, NO_CROSS, PULL_ONLY, TripletEmbeddings, triplet_loss
from tscm.models import StudentConfig, build_model
from tscm.retrieval import describe
from tscm.tensor import Tensor
from tscm.training import (
    AdamState,
    TrainConfig,
    _assert_frozen,
    adam_step,
    distill_student,
    final_recall,
    mask_ablation,
    train_teacher,
    validation_recall,
)

FAST = TrainConfig(epochs=2, seed=3)


@pytest.fixture(scope="module")
def teacher(small_world):
    model, _ = train_teacher(small_world, replace(FAST, epochs=1))
    return model


def steps(records):
    return [r for r in records if r["kind"] == "step"]


def epochs(records):
    return [r for r in records if r["kind"] == "epoch"]


class TestAdam:
    def test_zero_gradient_no_decay_is_identity(self, rng):
        w = Tensor(rng.normal(size=(3, 2)))
        before = w.data.copy()
        adam_step({"w": w}, {"w": np.zeros((3, 2))}, AdamState(), lr=0.1, weight_decay=0.0)
        assert np.array_equal(w.data, before)

    def test_first_step_moves_against_gradient(self, rng):
        w = Tensor(np.zeros(5))
        g = rng.normal(size=5)
        adam_step({"w": w}, {"w": g}, AdamState(), lr=0.01)
        assert np.all(np.sign(w.data) == -np.sign(g))
        np.testing.assert_allclose(np.abs(w.data), 0.01, rtol=1e-6)

    def test_quadratic_descends(self):
        w = Tensor(np.array([1.0]))
        state = AdamState()
        seen = [abs(w.data[0])]
        for _ in range(3):
            adam_step({"w": w}, {"w": 2 * w.data}, state, lr=0.1)
            seen.append(abs(w.data[0]))
        assert seen[0] > seen[1] > seen[2] > seen[3]
        assert state.step == 3

    def test_weight_decay_folded_into_gradient(self):
        a, b = Tensor(np.array([2.0])), Tensor(np.array([2.0]))
        adam_step({"w": a}, {"w": np.array([0.0])}, AdamState(), lr=0.1, weight_decay=0.5)
        adam_step({"w": b}, {"w": np.array([1.0])}, AdamState(), lr=0.1)
        assert a.data[0] == b.data[0]

    def test_errors(self):
        w = Tensor(np.ones(2))
        with pytest.raises(ShapeError):
            adam_step({"w": w}, {"w": np.ones(3)}, AdamState(), lr=0.1)
        with pytest.raises(NonFiniteError):
            adam_step({"w": w}, {"w": np.array([1.0, np.nan])}, AdamState(), lr=0.1)


class TestConfig:
    def test_schedule(self):
        cfg = TrainConfig(learning_rate=1e-3)
        assert cfg.lr_at(10) == pytest.approx(1e-3 * 0.99 ** 10, rel=1e-15)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.learning_rate, cfg.lr_decay_per_epoch, cfg.weight_decay) == (8, 1e-3, 0.99, 0.001)
        assert cfg.mask == PULL_ONLY and cfg.margin == 0.1

    def test_mask_from_text_and_round_trip(self):
        cfg = TrainConfig(mask="d1,d2,d3,d4")
        assert cfg.mask == ALL_FOUR
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("kwargs", [{"batch_size": 0}, {"learning_rate": 0.0}, {"margin": -1.0},
                                        {"loss_weights": (1.0, 1.0)}, {"r_pos": 30.0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"momentum": 0.9})


class TestTeacherTraining:
    def test_one_epoch_lowers_loss_on_two_places(self):
        world = generate_synthetic(SyntheticWorldConfig(n_places=2, views_per_place=10), seed=2)
        cfg = TrainConfig(epochs=1, seed=0, learning_rate=3e-3, margin=0.5)
        model = build_model("teacher", seed=0)
        mining = mine_triplets(world, cfg.triplet_spec(), seed=0)

        def loss():
            a = describe(model, world.images([t.anchor for t in mining]))
            p = describe(model, world.images([t.positive for t in mining]))
            n = np.stack([describe(model, world.images(list(t.negatives))) for t in mining])
            return triplet_loss(TripletEmbeddings(a, p, n, margin=cfg.margin)).item()

        before = loss()
        train_teacher(world, cfg, init=model)
        assert loss() < before

    def test_deterministic(self, small_world):
        a, ra = train_teacher(small_world, FAST)
        b, rb = train_teacher(small_world, FAST)
        assert [r["L_total"] for r in steps(ra)] == [r["L_total"] for r in steps(rb)]
        assert a.digest() == b.digest()

    def test_log_records(self, small_world):
        sink = io.StringIO()
        _, records = train_teacher(small_world, FAST, log=sink)
        lines = [json.loads(x) for x in sink.getvalue().splitlines()]
        assert lines == json.loads(json.dumps(records))
        ep = epochs(records)
        assert [r["epoch"] for r in ep] == [0, 1, 2]
        assert all(0.0 <= r["val_recall@1"] <= 1.0 for r in ep)
        for r in steps(records):
            assert set(r) >= {"step", "epoch", "lr", "L_hard", "L_soft", "L_cm", "L_total", "val_recall@1"}
            assert r["lr"] == FAST.lr_at(r["epoch"])

    def test_callable_sink(self, small_world):
        got = []
        train_teacher(small_world, replace(FAST, epochs=1), log=got.append)
        assert got and got[0]["kind"] == "epoch"

    def test_empty_mining_aborts(self, small_world):
        from tscm.errors import EmptyMiningError

        with pytest.raises(EmptyMiningError):
            train_teacher(small_world, replace(FAST, r_pos=1e-9))


class TestDistillation:
    def test_total_is_sum_of_logged_components(self, small_world, teacher):
        _, records = distill_student(small_world, teacher, replace(FAST, mask=ALL_FOUR))
        for r in steps(records):
            assert abs(r["L_total"] - (r["L_hard"] + r["L_soft"] + r["L_cm"])) <= 1e-10

    def test_teacher_untouched_and_gradient_free(self, small_world, teacher):
        digest = teacher.digest()
        distill_student(small_world, teacher, FAST)
        assert teacher.digest() == digest
        assert all(p.grad is None for p in teacher.params.values())

    def test_frozen_violation_detected(self, teacher):
        name = next(iter(teacher.params))
        teacher.params[name].grad = np.ones(teacher.params[name].shape)
        try:
            with pytest.raises(FrozenTeacherError):
                _assert_frozen(teacher)
        finally:
            teacher.params[name].grad = None

    def test_width_mismatch(self, small_world, teacher):
        with pytest.raises(ShapeError):
            distill_student(small_world, teacher, FAST, model_config=StudentConfig(conv_width=40))

    def test_deterministic(self, small_world, teacher):
        a, _ = distill_student(small_world, teacher, FAST)
        b, _ = distill_student(small_world, teacher, FAST)
        assert a.digest() == b.digest()

    def test_reduces_to_triplet_training(self, small_world, teacher):
        cfg = replace(FAST, mask=NO_CROSS, loss_weights=(1.0, 0.0, 0.0))
        _, distilled = distill_student(small_world, teacher, cfg)
        _, plain = train_teacher(small_world, cfg, init=build_model("student", seed=cfg.seed))
        np.testing.assert_allclose([r["L_total"] for r in steps(distilled)],
                                   [r["L_total"] for r in steps(plain)], rtol=0, atol=1e-12)

    def test_epoch_records_track_teacher_distance(self, small_world, teacher):
        _, records = distill_student(small_world, teacher, FAST)
        assert all(r["val_mean_d_st"] >= 0 for r in epochs(records))

    def test_ablation_variants(self, small_world, teacher):
        out = mask_ablation(small_world, teacher, replace(FAST, epochs=1))
        assert set(out) == {"hard+soft", "hard+soft+d1d2", "hard+soft+d1d2d3d4"}
        assert all(0.0 <= v <= 1.0 for v in out.values())

    def test_final_recall_matches_direct_evaluation(self, small_world, teacher):
        student, records = distill_student(small_world, teacher, FAST)
        assert final_recall(records) == validation_recall(student, small_world)
