import json

import numpy as np
import pytest

from retractor.errors import (
    InvalidParameterError,
    ShapeError,
    TrainingDivergedError,
)
from retractor.estimator import (
    DeformationModel,
    Sample,
    TrainConfig,
    boundary_grasp_indices,
    evaluate_mcd,
    forward,
    generate_dataset,
    input_gradient,
    load_model,
    mean_closest_distance,
    predict,
    read_dataset,
    sample_pull_direction,
    save_model,
    train,
    write_dataset,
    write_loss_curve,
)
from retractor.mesh import BoundaryProfile, build_tissue_mesh
from retractor.rbf import KernelLayout, fit_boundary_3d

M = 8
LAYOUT = KernelLayout(m=M)


def make_sample(rng, m=M):
    return Sample(
        w_x0=rng.normal(size=m),
        q=rng.normal(size=6),
        q_x0=float(rng.normal()),
        target_w=rng.normal(size=(m, 3)),
        target_fmax=float(abs(rng.normal())),
    )


def sample_from_vectors(x, y, m=M):
    return Sample(
        w_x0=x[:m], q=x[m : m + 6], q_x0=float(x[m + 6]),
        target_w=y[: 3 * m].reshape(m, 3), target_fmax=float(y[3 * m]),
    )


def synthetic_dataset(n, map_fn, seed=0, m=M):
    rng = np.random.default_rng(seed)
    xs = rng.normal(size=(n, m + 7))
    return [sample_from_vectors(x, map_fn(x), m) for x in xs]


class TestSample:
    def test_vector_lengths(self):
        s = make_sample(np.random.default_rng(0), m=15)
        assert s.input_vector().shape == (22,)
        assert s.target_vector().shape == (46,)

    def test_vector_layout(self):
        s = make_sample(np.random.default_rng(1))
        x = s.input_vector()
        assert np.array_equal(x[:M], s.w_x0)
        assert np.array_equal(x[M : M + 6], s.q)
        assert x[M + 6] == s.q_x0
        y = s.target_vector()
        assert np.array_equal(y[: 3 * M].reshape(M, 3), s.target_w)
        assert y[3 * M] == s.target_fmax

    def test_validation(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ShapeError):
            Sample(w_x0=np.zeros(M), q=np.zeros(5), q_x0=0.0,
                   target_w=np.zeros((M, 3)), target_fmax=0.0)
        with pytest.raises(ShapeError):
            Sample(w_x0=np.zeros(M), q=np.zeros(6), q_x0=0.0,
                   target_w=np.zeros((M + 1, 3)), target_fmax=0.0)
        bad = rng.normal(size=M)
        bad[2] = np.nan
        with pytest.raises(InvalidParameterError):
            Sample(w_x0=bad, q=np.zeros(6), q_x0=0.0,
                   target_w=np.zeros((M, 3)), target_fmax=0.0)


class TestPullSampling:
    def test_direction_constraints(self):
        rng = np.random.default_rng(3)
        for _ in range(500):
            d = sample_pull_direction(rng)
            assert np.linalg.norm(d) == pytest.approx(1.0)
            assert d[2] > 0.0
            assert d[1] >= 0.5

    def test_grasp_indices_interior_and_distinct(self):
        mesh = build_tissue_mesh(
            BoundaryProfile(amplitudes=np.zeros(3)), grid_dims=(12, 12, 2)
        )
        picks = boundary_grasp_indices(mesh, 3)
        assert len(set(picks.tolist())) == 3
        ends = {mesh.boundary_order[0], mesh.boundary_order[-1]}
        assert not (set(picks.tolist()) & ends)

    def test_too_many_grasps(self):
        mesh = build_tissue_mesh(
            BoundaryProfile(amplitudes=np.zeros(3)), grid_dims=(6, 6, 2)
        )
        with pytest.raises(InvalidParameterError):
            boundary_grasp_indices(mesh, 10)


class TestDatasetGeneration:
    @staticmethod
    def small_dataset(seed=11):
        return generate_dataset(
            LAYOUT, counts=(2, 2, 4), seed=seed, grid_dims=(12, 12, 2),
            pull_length=0.02,
        )

    def test_counts(self):
        samples, skipped = self.small_dataset()
        assert len(samples) + 4 * len(skipped) == 2 * 2 * 4
        assert skipped == []

    def test_step_zero_targets_equal_initial_fit(self):
        samples, _ = self.small_dataset()
        for pair in range(4):
            s0 = samples[pair * 4]
            assert s0.target_fmax == pytest.approx(0.0, abs=1e-9)
            assert np.allclose(s0.w_x0, s0.target_w[:, 0])
            assert np.array_equal(s0.q[3:], np.zeros(3))

    def test_pull_reaches_commanded_length(self):
        samples, _ = self.small_dataset()
        for pair in range(4):
            q0 = samples[pair * 4].q
            qT = samples[pair * 4 + 3].q
            move = qT[:3] - q0[:3]
            assert np.linalg.norm(move) == pytest.approx(0.02, rel=1e-9)
            assert move[2] > 0.0
            assert move[1] >= 0.5 * 0.02 * (1 - 1e-9)

    def test_deterministic(self):
        a, _ = self.small_dataset()
        b, _ = self.small_dataset()
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.input_vector(), sb.input_vector())
            assert np.array_equal(sa.target_vector(), sb.target_vector())
        c, _ = self.small_dataset(seed=12)
        assert not np.array_equal(a[1].target_vector(), c[1].target_vector())

    def test_file_roundtrip_and_bytes(self, tmp_path):
        samples, _ = self.small_dataset()
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_dataset(samples, LAYOUT, p1)
        write_dataset(samples, LAYOUT, p2)
        assert p1.read_bytes() == p2.read_bytes()
        back, layout = read_dataset(p1)
        assert layout.m == LAYOUT.m and layout.h == LAYOUT.h
        assert len(back) == len(samples)
        for sa, sb in zip(samples, back):
            assert np.array_equal(sa.input_vector(), sb.input_vector())
            assert np.array_equal(sa.target_vector(), sb.target_vector())

    def test_bad_schema_rejected(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text(json.dumps({"m": 8, "h": 0.3, "schema_version": 99}) + "\n")
        with pytest.raises(InvalidParameterError):
            read_dataset(p)


class TestForward:
    def test_dimensions(self):
        model = DeformationModel.initialize(15, seed=0)
        out = forward(model, np.zeros(22))
        assert out.shape == (46,)
        assert model.layer_sizes == [22, 64, 256, 512, 256, 46]

    def test_wrong_length(self):
        model = DeformationModel.initialize(15, seed=0)
        with pytest.raises(ShapeError):
            forward(model, np.zeros(21))

    def test_non_finite_input(self):
        model = DeformationModel.initialize(15, seed=0)
        x = np.zeros(22)
        x[3] = np.inf
        with pytest.raises(InvalidParameterError):
            forward(model, x)

    def test_zero_model_outputs_offset(self):
        model = DeformationModel.initialize(M, seed=0)
        for w in model.weights:
            w[:] = 0.0
        model.out_mean = np.arange(3 * M + 1, dtype=float)
        out = forward(model, np.random.default_rng(4).normal(size=M + 7))
        assert np.array_equal(out, model.out_mean)

    def test_batch_matches_single(self):
        model = DeformationModel.initialize(M, seed=1)
        rng = np.random.default_rng(5)
        x = rng.normal(size=M + 7)
        batch = forward(model, np.stack([x, x, 2 * x]))
        assert np.array_equal(batch[0], batch[1])
        # single-row and batched GEMMs may differ in the last ulp
        assert np.allclose(batch[0], forward(model, x), rtol=1e-12, atol=1e-12)

    def test_normalization_roundtrip(self):
        model = DeformationModel.initialize(M, seed=2)
        rng = np.random.default_rng(6)
        model.in_mean = rng.normal(size=M + 7)
        model.in_std = rng.uniform(0.5, 2.0, size=M + 7)
        x = rng.normal(size=M + 7)
        z = (x - model.in_mean) / model.in_std
        assert np.allclose(z * model.in_std + model.in_mean, x, atol=1e-12)


class TestPredict:
    def test_reshape_roundtrip(self):
        model = DeformationModel.initialize(M, seed=3)
        rng = np.random.default_rng(7)
        w_x0, q, q_x0 = rng.normal(size=M), rng.normal(size=6), 0.1
        baseline = (np.zeros(3), np.array([1.0, 0.0, 0.0]))
        params, fmax = predict(model, w_x0, q, q_x0, LAYOUT, baseline)
        flat = forward(model, np.concatenate([w_x0, q, [q_x0]]))
        assert params.weights.shape == (M, 3)
        assert np.array_equal(params.weights.reshape(-1), flat[: 3 * M])
        assert fmax >= 0.0

    def test_force_clamped_at_zero(self):
        model = DeformationModel.initialize(M, seed=3)
        for w in model.weights:
            w[:] = 0.0
        model.out_mean = np.zeros(3 * M + 1)
        model.out_mean[-1] = -5.0
        baseline = (np.zeros(3), np.array([1.0, 0.0, 0.0]))
        _, fmax = predict(model, np.zeros(M), np.zeros(6), 0.0, LAYOUT, baseline)
        assert fmax == 0.0


def min_abs_preactivation(model, x):
    z = (x - model.in_mean) / model.in_std
    a = z
    worst = np.inf
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        pre = w @ a + b
        if k != last:
            worst = min(worst, float(np.abs(pre).min()))
            a = np.where(pre >= 0, pre, 0.01 * pre)
        else:
            a = pre
    return worst


class TestInputGradient:
    def test_matches_finite_differences(self):
        model = DeformationModel.initialize(M, seed=4)
        rng = np.random.default_rng(8)
        model.in_std = rng.uniform(0.5, 2.0, size=M + 7)
        model.out_std = rng.uniform(0.5, 2.0, size=3 * M + 1)
        h = 1e-5
        checked = 0
        while checked < 20:
            x = rng.normal(size=M + 7)
            if min_abs_preactivation(model, x) < 1e-3:
                continue
            for idx in (0, 3, 3 * M):
                g = input_gradient(model, x, idx)
                fd = np.empty_like(g)
                for j in range(len(x)):
                    e = np.zeros_like(x)
                    e[j] = h
                    fd[j] = (forward(model, x + e)[idx] - forward(model, x - e)[idx]) / (2 * h)
                denom = max(np.linalg.norm(fd), 1e-12)
                assert np.linalg.norm(g - fd) / denom < 1e-4
            checked += 1

    def test_zero_model_zero_gradient(self):
        model = DeformationModel.initialize(M, seed=4)
        for w in model.weights:
            w[:] = 0.0
        g = input_gradient(model, np.ones(M + 7), 2)
        assert np.array_equal(g, np.zeros(M + 7))

    def test_gradient_scales_with_norm_stats(self):
        model = DeformationModel.initialize(M, seed=5)
        x = np.random.default_rng(9).normal(size=M + 7)
        g1 = input_gradient(model, x, 1)
        model.out_std = model.out_std.copy()
        model.out_std[1] *= 2.0
        g2 = input_gradient(model, x, 1)
        assert np.allclose(g2, 2.0 * g1, rtol=1e-12)

    def test_invalid_index(self):
        model = DeformationModel.initialize(M, seed=4)
        with pytest.raises(InvalidParameterError):
            input_gradient(model, np.zeros(M + 7), 3 * M + 1)
        with pytest.raises(InvalidParameterError):
            input_gradient(model, np.zeros(M + 7), -1)


class TestTrain:
    def test_constant_targets_learned_fast(self):
        # measured 9.1e-5 at 50 epochs on this setup; assert with 5x headroom
        const = np.arange(3 * M + 1, dtype=float)
        data = synthetic_dataset(960, lambda x: const, seed=10)
        cfg = TrainConfig(max_epochs=50, seed=0)
        model, history = train(data, cfg)
        assert history[-1].val_mse < 5e-4

    def test_linear_map_learned(self):
        # inputs on a 5-dim latent subspace, mirroring the structure of the
        # scripted-pull data (poses vary along rays, shapes repeat); the
        # linear target is exactly learnable and validation MSE in
        # normalized space is MSE relative to target variance.
        # measured 4.9e-4 at these settings; threshold leaves 2x headroom
        rng = np.random.default_rng(11)
        a = rng.normal(size=(3 * M + 1, M + 7)) * 0.3
        c = rng.normal(size=3 * M + 1)
        basis = rng.normal(size=(M + 7, 5))
        u = np.random.default_rng(12).normal(size=(3000, 5))
        data = [sample_from_vectors(x, a @ x + c) for x in u @ basis.T]
        cfg = TrainConfig(max_epochs=120, seed=1)
        model, history = train(data, cfg)
        assert history[-1].val_mse < 1e-3
        assert history[-1].train_mse <= history[0].train_mse

    def test_returns_best_validation_model(self):
        const = np.zeros(3 * M + 1)
        data = synthetic_dataset(400, lambda x: const, seed=13)
        cfg = TrainConfig(max_epochs=30, seed=2)
        model, history = train(data, cfg)
        best = min(r.val_mse for r in history)
        x = np.stack([s.input_vector() for s in data])
        y = np.stack([s.target_vector() for s in data])
        rng = np.random.default_rng(cfg.seed)
        order = rng.permutation(len(x))
        va = order[int(round(len(x) * cfg.split)):]
        # recompute in normalized space the same way train() does
        from retractor.estimator import _forward_norm

        zx = (x[va] - model.in_mean) / model.in_std
        zy = (y[va] - model.out_mean) / model.out_std
        val = float(np.mean((_forward_norm(model, zx) - zy) ** 2))
        assert val == pytest.approx(best, rel=1e-9)

    def test_divergence_raises(self):
        # adaptive-moment steps are bounded by the learning rate, so in
        # float64 the loss only leaves the finite range once the rate
        # itself exceeds the dynamic range headroom
        rng = np.random.default_rng(14)
        a = rng.normal(size=(3 * M + 1, M + 7))
        data = synthetic_dataset(400, lambda x: a @ x, seed=15)
        cfg = TrainConfig(learning_rate=1e100, max_epochs=5, seed=3)
        with pytest.raises(TrainingDivergedError):
            train(data, cfg)

    def test_small_dataset_rejected(self):
        data = synthetic_dataset(100, lambda x: np.zeros(3 * M + 1), seed=16)
        with pytest.raises(InvalidParameterError):
            train(data, TrainConfig())

    def test_training_is_deterministic(self):
        const = np.ones(3 * M + 1)
        data = synthetic_dataset(330, lambda x: const, seed=17)
        cfg = TrainConfig(max_epochs=5, seed=4)
        m1, h1 = train(data, cfg)
        m2, h2 = train(data, cfg)
        assert all(np.array_equal(w1, w2) for w1, w2 in zip(m1.weights, m2.weights))
        assert [r.val_mse for r in h1] == [r.val_mse for r in h2]

    def test_config_validation(self):
        with pytest.raises(InvalidParameterError):
            TrainConfig(batch_size=0)
        with pytest.raises(InvalidParameterError):
            TrainConfig(split=1.0)
        with pytest.raises(InvalidParameterError):
            TrainConfig(learning_rate=0.0)

    def test_loss_curve_file(self, tmp_path):
        const = np.zeros(3 * M + 1)
        data = synthetic_dataset(330, lambda x: const, seed=18)
        model, history = train(data, TrainConfig(max_epochs=3, seed=5))
        path = tmp_path / "loss.csv"
        write_loss_curve(history, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_mse,val_mse,lr"
        assert len(lines) == 4


class TestModelIO:
    def test_roundtrip_exact(self, tmp_path):
        model = DeformationModel.initialize(M, seed=6)
        rng = np.random.default_rng(19)
        model.in_mean = rng.normal(size=M + 7)
        model.in_std = rng.uniform(0.5, 2.0, size=M + 7)
        path = tmp_path / "model.json"
        save_model(model, path)
        back = load_model(path)
        assert back.layer_sizes == model.layer_sizes
        for w1, w2 in zip(model.weights, back.weights):
            assert np.array_equal(w1, w2)
        assert np.array_equal(back.in_mean, model.in_mean)
        x = rng.normal(size=M + 7)
        assert np.array_equal(forward(model, x), forward(back, x))

    def test_bad_schema(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text(json.dumps({"schema_version": 99}))
        with pytest.raises(InvalidParameterError):
            load_model(path)


class TestMcd:
    def test_hand_value(self):
        got = mean_closest_distance([[0, 0, 0], [1, 0, 0]], [[0, 0, 0]])
        assert got == pytest.approx(0.5)

    def test_identity_zero(self):
        pts = np.random.default_rng(20).normal(size=(40, 3))
        assert mean_closest_distance(pts, pts) == 0.0

    def test_superset_never_increases(self):
        rng = np.random.default_rng(21)
        p = rng.normal(size=(30, 3))
        q = rng.normal(size=(10, 3))
        extra = rng.normal(size=(15, 3))
        assert mean_closest_distance(p, np.vstack([q, extra])) <= mean_closest_distance(p, q)

    def test_evaluate_structure(self):
        model = DeformationModel.initialize(M, seed=7)
        table = evaluate_mcd(
            model, LAYOUT, trials=2, distances=(0.0025, 0.005), seed=22,
            grid_dims=(10, 10, 2), dense=100,
        )
        assert set(table.keys()) == {0.0025, 0.005}
        for stats in table.values():
            assert stats["mcd"].shape == (2,)
            assert np.all(stats["mcd"] >= 0)
            assert stats["p10"] <= stats["mean"] <= stats["p90"] + 1e-12
            assert np.isfinite(stats["mean"])
