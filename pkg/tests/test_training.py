"""Training-loop contracts: the SGD update rule, determinism, the logged
losses, and the lambda-gradient separation between the identification and
verification paths."""

import numpy as np
import pytest

from siamtad.data import SyntheticDatasetSpec, generate_synthetic_dataset
from siamtad.losses import LossWeights, mean_of, overall_loss
from siamtad.network import build_model, load_checkpoint, save_checkpoint, tiny_config
from siamtad.tensor import GradientTape, NumericsError, ShapeError, Tensor
from siamtad.training import (TrainConfig, load_train_log, pair_losses,
                              save_train_log, sgd_step, train)


def tiny_dataset(seed=3, n_classes=4, clips_per_class=4):
    spec = SyntheticDatasetSpec(seed=seed, n_classes=n_classes,
                                clips_per_class=clips_per_class,
                                clip_shape=(1, 8, 16, 16))
    return generate_synthetic_dataset(spec)


def fresh_model(seed=0, n_classes=5):
    return build_model(tiny_config(n_classes=n_classes, seed=seed))


class TestTrainConfig:
    def test_defaults_follow_the_protocol(self):
        config = TrainConfig()
        assert config.learning_rate == 0.001
        assert config.momentum == 0.9
        assert config.batch_pairs == 5

    @pytest.mark.parametrize("bad", [
        dict(learning_rate=0.0),
        dict(momentum=1.0),
        dict(momentum=-0.1),
        dict(batch_pairs=0),
        dict(iterations=0),
        dict(lam=-0.5),
        dict(same_ratio=1.5),
        dict(loss="triplet"),
        dict(margin=0.0),
    ])
    def test_rejects_invalid_fields(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_dict_roundtrip_uses_the_lambda_key(self):
        config = TrainConfig(lam=2.0, loss="contrastive")
        d = config.to_dict()
        assert d["lambda"] == 2.0 and "lam" not in d
        assert TrainConfig.from_dict(d) == config


class TestSgdStep:
    def test_zero_momentum_is_plain_descent(self):
        w = {"w": Tensor(np.array([1.0, 2.0]))}
        g = {"w": np.array([0.5, -1.0])}
        v = {"w": np.zeros(2)}
        sgd_step(w, g, v, learning_rate=0.1, momentum=0.0)
        np.testing.assert_allclose(w["w"].data, [0.95, 2.1])

    def test_hand_computed_momentum_sequence(self):
        # g = 1 twice, lr 0.1, momentum 0.9, w0 = 0 -> w1 = -0.1, w2 = -0.29
        w = {"w": Tensor(np.array([0.0]))}
        v = {"w": np.zeros(1)}
        g = {"w": np.array([1.0])}
        sgd_step(w, g, v, learning_rate=0.1, momentum=0.9)
        assert w["w"].data[0] == pytest.approx(-0.1)
        sgd_step(w, g, v, learning_rate=0.1, momentum=0.9)
        assert w["w"].data[0] == pytest.approx(-0.29)

    def test_velocity_accumulates_in_place(self):
        w = {"w": Tensor(np.array([0.0]))}
        v = {"w": np.zeros(1)}
        sgd_step(w, {"w": np.array([2.0])}, v, learning_rate=0.01, momentum=0.5)
        assert v["w"][0] == pytest.approx(2.0)
        sgd_step(w, {"w": np.array([2.0])}, v, learning_rate=0.01, momentum=0.5)
        assert v["w"][0] == pytest.approx(3.0)

    def test_rejects_shape_mismatch(self):
        w = {"w": Tensor(np.zeros(2))}
        with pytest.raises(ShapeError, match="w"):
            sgd_step(w, {"w": np.zeros(3)}, {"w": np.zeros(2)}, 0.1, 0.0)


class TestTrainLoop:
    def test_log_covers_every_iteration(self):
        log = train(fresh_model(), tiny_dataset(), TrainConfig(iterations=5, seed=1))
        assert [row.iteration for row in log.rows] == [1, 2, 3, 4, 5]
        assert all(0.0 <= row.pair_accuracy <= 1.0 for row in log.rows)

    def test_loss_columns_sum_per_iteration(self):
        config = TrainConfig(iterations=4, seed=1, lam=0.5)
        log = train(fresh_model(), tiny_dataset(), config)
        for row in log.rows:
            assert row.loss == pytest.approx(
                row.loss_id1 + row.loss_id2 + 0.5 * row.loss_ver, rel=1e-12)

    def test_identical_seeds_give_bitwise_identical_checkpoints(self, tmp_path):
        config = TrainConfig(iterations=8, seed=5)
        runs = []
        for name in ("a", "b"):
            model = fresh_model(seed=2)
            train(model, tiny_dataset(), config)
            save_checkpoint(model, tmp_path / name)
            runs.append(model)
        assert all(runs[0].params[k].data.tobytes() == runs[1].params[k].data.tobytes()
                   for k in runs[0].params)
        files_a = sorted(p.name for p in (tmp_path / "a").iterdir())
        for name in files_a:
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()

    def test_seed_changes_the_trajectory(self):
        dataset = tiny_dataset()
        a = train(fresh_model(), dataset, TrainConfig(iterations=3, seed=1))
        b = train(fresh_model(), dataset, TrainConfig(iterations=3, seed=2))
        assert a.rows[-1].loss != b.rows[-1].loss

    def test_loss_halves_within_200_iterations(self):
        # regression bound frozen from the reference run (ratio ~1.5e-3)
        config = tiny_config(n_classes=5, seed=7)
        spec = SyntheticDatasetSpec(seed=7, n_classes=4, clips_per_class=20,
                                    clip_shape=config.input_shape)
        dataset = generate_synthetic_dataset(spec)
        log = train(build_model(config), dataset, TrainConfig(iterations=200, seed=7))
        assert log.final_loss() < 0.5 * log.initial_loss()

    def test_logged_losses_recompute_from_snapshots(self):
        model = fresh_model()
        dataset = tiny_dataset()
        config = TrainConfig(iterations=9, seed=4)
        log = train(model, dataset, config, snapshot_at=(1, 5, 9))
        weights = LossWeights(config.lam)
        for iteration in (1, 5, 9):
            params, batch = log.snapshots[iteration]
            probe = fresh_model()
            for name, values in params.items():
                probe.params[name].data[...] = values
            tape = GradientTape()
            totals = []
            for pair in batch:
                l1, l2, lv, _ = pair_losses(probe, pair, config, tape)
                totals.append(overall_loss(l1, l2, lv, weights, tape))
            row = log.rows[iteration - 1]
            assert mean_of(totals, tape).item() == row.loss

    def test_nan_aborts_with_the_iteration_number(self):
        model = fresh_model()
        model.params["fc6.weight"].data[0, 0] = np.nan
        with pytest.raises(NumericsError, match="iteration 1"):
            train(model, tiny_dataset(), TrainConfig(iterations=3, seed=1))

    def test_rejects_mismatched_clip_shape(self):
        spec = SyntheticDatasetSpec(seed=0, n_classes=2, clips_per_class=2,
                                    clip_shape=(1, 4, 8, 8))
        dataset = generate_synthetic_dataset(spec)
        with pytest.raises((ShapeError, ValueError)):
            train(fresh_model(), dataset, TrainConfig(iterations=1, seed=0))


class TestLambdaSeparation:
    def test_lambda_zero_leaves_the_verification_head_unchanged(self):
        model = fresh_model(seed=1)
        before = {name: model.params[name].data.copy()
                  for name in model.params if name.startswith("ver_head.")}
        assert before, "expected verification head parameters"
        train(model, tiny_dataset(), TrainConfig(iterations=6, seed=2, lam=0.0))
        for name, values in before.items():
            assert np.array_equal(model.params[name].data, values)

    def test_lambda_zero_backbone_gradients_match_a_detached_run(self):
        # at lambda 0 the verification path contributes exact zeros, so the
        # backbone gradient must be bitwise the sum of the two identification
        # branches alone
        dataset = tiny_dataset()
        config = TrainConfig(iterations=1, seed=3, lam=0.0)
        model = fresh_model(seed=4)

        from siamtad.data import sample_pairs
        batch = sample_pairs(dataset, 4, 0.5, np.random.default_rng(11))

        joint_tape = GradientTape()
        totals = []
        for pair in batch:
            l1, l2, lv, _ = pair_losses(model, pair, config, joint_tape)
            totals.append(overall_loss(l1, l2, lv, LossWeights(0.0), joint_tape))
        joint_tape.backward(mean_of(totals, joint_tape))

        from siamtad.losses import identification_loss
        from siamtad.network import class_distribution, forward_features
        from siamtad.ops import add
        detached_tape = GradientTape()
        totals = []
        for pair in batch:
            f1 = forward_features(model, pair.clip1, detached_tape)
            f2 = forward_features(model, pair.clip2, detached_tape)
            l1 = identification_loss(class_distribution(model, f1, detached_tape),
                                     pair.clip1.label, detached_tape)
            l2 = identification_loss(class_distribution(model, f2, detached_tape),
                                     pair.clip2.label, detached_tape)
            totals.append(add(l1, l2, detached_tape))
        detached_tape.backward(mean_of(totals, detached_tape))

        for name, param in model.params.items():
            if name.startswith("ver_head."):
                continue
            assert np.array_equal(joint_tape.grad(param), detached_tape.grad(param)), name

    def test_positive_lambda_moves_the_verification_head(self):
        model = fresh_model(seed=1)
        before = {name: model.params[name].data.copy()
                  for name in model.params if name.startswith("ver_head.")}
        train(model, tiny_dataset(), TrainConfig(iterations=6, seed=2, lam=1.0))
        assert any(not np.array_equal(model.params[name].data, values)
                   for name, values in before.items())


class TestContrastiveTraining:
    def test_contrastive_run_converges_and_logs(self):
        config = TrainConfig(iterations=30, seed=6, loss="contrastive")
        log = train(fresh_model(), tiny_dataset(), config)
        assert log.final_loss() < log.initial_loss()
        assert all(np.isfinite(row.loss) for row in log.rows)

    def test_contrastive_leaves_the_verification_head_out_of_the_graph(self):
        model = fresh_model(seed=1)
        before = {name: model.params[name].data.copy()
                  for name in model.params if name.startswith("ver_head.")}
        train(model, tiny_dataset(),
              TrainConfig(iterations=5, seed=2, loss="contrastive", lam=1.0))
        for name, values in before.items():
            assert np.array_equal(model.params[name].data, values)


class TestTrainLogFiles:
    def test_roundtrip_is_float_exact(self, tmp_path):
        log = train(fresh_model(), tiny_dataset(), TrainConfig(iterations=4, seed=1))
        save_train_log(log, tmp_path / "log.csv")
        loaded = load_train_log(tmp_path / "log.csv")
        assert [(r.iteration, r.loss_id1, r.loss_id2, r.loss_ver, r.loss,
                 r.pair_accuracy) for r in loaded.rows] == \
            [(r.iteration, r.loss_id1, r.loss_id2, r.loss_ver, r.loss,
              r.pair_accuracy) for r in log.rows]

    def test_header_names_the_loss_columns(self, tmp_path):
        log = train(fresh_model(), tiny_dataset(), TrainConfig(iterations=1, seed=1))
        save_train_log(log, tmp_path / "log.csv")
        header = (tmp_path / "log.csv").read_text().splitlines()[0]
        assert header == "iteration,L_I1,L_I2,L_V,L,pair_accuracy"

    def test_rejects_foreign_csv(self, tmp_path):
        (tmp_path / "other.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ValueError, match="training log"):
            load_train_log(tmp_path / "other.csv")
