import math

import numpy as np
import pytest

from dualstage import checkpoint, data, fusion, train
from dualstage import tensor as T
from dualstage.errors import CheckpointError, ConfigError, DataError, NumericsError, ShapeError, TrainError
from dualstage.gradcheck import grad_check
from dualstage.tensor import Tensor

from conftest import make_mini_model


def t64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


class TestBceWithLogits:
    def test_zero_logits_give_ln2_for_any_targets(self):
        for targets in ([[0, 1, 0]], [[1, 1, 1]], [[0, 0, 0]]):
            loss = train.bce_with_logits(t64(np.zeros((1, 3))), t64(targets))
            assert abs(float(loss.data) - math.log(2.0)) < 1e-15

    def test_extreme_logits_stay_finite_and_tiny(self):
        # correct confident prediction: per-element loss under 1e-20, no overflow
        loss_pos = train.bce_with_logits(t64([[50.0]]), t64([[1.0]]))
        loss_neg = train.bce_with_logits(t64([[-50.0]]), t64([[0.0]]))
        assert 0.0 <= float(loss_pos.data) < 1e-20
        assert 0.0 <= float(loss_neg.data) < 1e-20
        # confident and wrong: large but finite
        wrong = train.bce_with_logits(t64([[-50.0]]), t64([[1.0]]))
        assert math.isfinite(float(wrong.data))
        assert abs(float(wrong.data) - 50.0) < 1e-12

    def test_matches_naive_sigmoid_log_formula(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal((6, 5)) * 3
        y = rng.integers(0, 2, (6, 5)).astype(np.float64)
        got = float(train.bce_with_logits(t64(z), t64(y)).data)
        sig = 1.0 / (1.0 + np.exp(-z))
        naive = -(y * np.log(sig) + (1 - y) * np.log(1 - sig)).mean()
        assert abs(got - naive) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        z = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        y = t64(rng.integers(0, 2, (3, 4)))
        report = grad_check(lambda: train.bce_with_logits(z, y), [("z", z)], step=1e-5)
        assert report.max_scalar_rel_error < 1e-5

    def test_gradient_closed_form(self):
        from scipy.special import expit

        rng = np.random.default_rng(2)
        z = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        y = t64(rng.integers(0, 2, (2, 3)))
        with T.Tape() as tape:
            loss = train.bce_with_logits(z, y)
        T.backward(loss, tape)
        expected = (expit(z.data) - y.data) / z.data.size
        assert np.abs(z.grad - expected).max() < 1e-15

    def test_convex_in_each_logit(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            z0 = float(rng.standard_normal() * 4)
            y = t64([[float(rng.integers(0, 2))]])
            h = 1e-4

            def f(v):
                return float(train.bce_with_logits(t64([[v]]), y).data)

            second = (f(z0 + h) - 2 * f(z0) + f(z0 - h)) / (h * h)
            assert second >= -1e-9

    def test_rejects_bad_inputs(self):
        with pytest.raises(ShapeError):
            train.bce_with_logits(t64(np.zeros((2, 3))), t64(np.zeros((3, 2))))
        with pytest.raises(DataError, match="0 or 1"):
            train.bce_with_logits(t64(np.zeros((1, 2))), t64([[0.5, 1.0]]))
        with pytest.raises(NumericsError, match="non-finite"):
            train.bce_with_logits(t64([[np.inf, 0.0]]), t64([[1.0, 0.0]]))


class TestAdam:
    def make(self, values):
        p = Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)
        params = [("p", p)]
        return p, params, train.AdamState.for_params(params)

    def test_zero_gradient_leaves_params_unchanged(self):
        p, params, state = self.make([1.0, -2.0, 3.0])
        before = p.data.copy()
        train.adam_step(params, {"p": np.zeros(3)}, state, train.TrainConfig(precision="float64"))
        assert np.array_equal(p.data, before)
        assert state.t == 1

    def test_first_step_magnitude_is_learning_rate(self):
        cfg = train.TrainConfig(learning_rate=0.01, precision="float64")
        p, params, state = self.make([0.5, -0.25, 4.0])
        g = np.array([0.3, -2.0, 0.1])
        before = p.data.copy()
        train.adam_step(params, {"p": g}, state, cfg)
        step = before - p.data
        assert np.abs(np.abs(step) - cfg.learning_rate).max() < cfg.learning_rate * 1e-6
        assert np.array_equal(np.sign(step), np.sign(g))

    def test_ten_steps_match_scalar_oracle(self):
        # independent plain-float Adam on f(theta) = theta^2 from theta=1
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        theta, m, v = 1.0, 0.0, 0.0
        oracle = []
        for t in range(1, 11):
            g = 2.0 * theta
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
            oracle.append(theta)

        cfg = train.TrainConfig(learning_rate=0.1, precision="float64")
        p, params, state = self.make([1.0])
        trajectory = []
        for _ in range(10):
            train.adam_step(params, {"p": 2.0 * p.data}, state, cfg)
            trajectory.append(float(p.data[0]))
        assert np.abs(np.array(trajectory) - np.array(oracle)).max() < 1e-12

    def test_second_moment_nonnegative_and_t_increments(self):
        cfg = train.TrainConfig(precision="float64")
        p, params, state = self.make([1.0, 2.0])
        for step in range(1, 4):
            train.adam_step(params, {"p": np.random.default_rng(step).standard_normal(2)}, state, cfg)
            assert state.t == step
            assert (state.v["p"] >= 0).all()

    def test_state_advance_is_idempotent(self):
        # same params + same state + same grads -> bitwise same outcome
        cfg = train.TrainConfig(learning_rate=0.01, precision="float64")
        g = np.random.default_rng(9).standard_normal(4)

        def run():
            p = Tensor(np.array([1.0, -2.0, 0.5, 3.0]), requires_grad=True)
            params = [("p", p)]
            state = train.AdamState.for_params(params)
            state.m["p"][:] = 0.1
            state.v["p"][:] = 0.2
            state.t = 3
            train.adam_step(params, {"p": g.copy()}, state, cfg)
            return p.data.copy(), state.t, state.m["p"].copy(), state.v["p"].copy()

        a = run()
        b = run()
        assert a[1] == b[1] == 4
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_non_finite_gradient_aborts_with_name(self):
        p, params, state = self.make([1.0])
        with pytest.raises(TrainError, match="'p'"):
            train.adam_step(params, {"p": np.array([np.nan])}, state, train.TrainConfig())

    def test_frozen_params_skipped(self):
        p, params, state = self.make([1.0])
        p.requires_grad = False
        train.adam_step(params, {"p": np.ones(1)}, state, train.TrainConfig())
        assert p.data[0] == 1.0


class TestTrainLoop:
    def config(self, **kw):
        base = dict(epochs=2, batch_size=4, seed=7, precision="float64", learning_rate=1e-3)
        base.update(kw)
        return train.TrainConfig(**base)

    def test_zero_lr_keeps_parameters_bit_identical(self, mini_dataset):
        samples, vocab, preprocess, root = mini_dataset
        model = make_mini_model(vocab, seed=1, dtype=np.float64)
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        train.train(model, samples, self.config(learning_rate=0.0), preprocess, image_root=root)
        for n, p in model.named_parameters():
            assert np.array_equal(p.data, before[n]), n

    def test_same_seed_identical_loss_logs(self, mini_dataset):
        samples, vocab, preprocess, root = mini_dataset

        def run():
            model = make_mini_model(vocab, seed=2, dtype=np.float64)
            return train.train(model, samples, self.config(), preprocess, image_root=root).loss_log

        assert run() == run()

    def test_first_batch_loss_is_ln2_with_zero_classifier(self, mini_dataset):
        # zero-init classifier makes the first forward emit all-zero logits
        samples, vocab, preprocess, root = mini_dataset
        model = make_mini_model(vocab, seed=3, dtype=np.float64)
        result = train.train(
            model, samples, self.config(epochs=1, batch_size=len(samples)), preprocess, image_root=root
        )
        assert abs(result.loss_log[0][1] - math.log(2.0)) < 1e-15

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts_with_coordinates(self, mini_dataset):
        samples, vocab, preprocess, root = mini_dataset
        model = make_mini_model(vocab, seed=4, dtype=np.float64)
        model.proj_w.data[:] = np.inf  # poisons the logits on the first batch
        with pytest.raises(TrainError, match=r"epoch 1 batch 0"):
            train.train(model, samples, self.config(), preprocess, image_root=root)

    def test_precision_mismatch_rejected(self, mini_dataset):
        samples, vocab, preprocess, root = mini_dataset
        model = make_mini_model(vocab, seed=5, dtype=np.float32)
        with pytest.raises(ConfigError, match="precision"):
            train.train(model, samples, self.config(), preprocess, image_root=root)

    def test_empty_dataset_rejected(self, mini_dataset):
        _, vocab, preprocess, root = mini_dataset
        model = make_mini_model(vocab, seed=6, dtype=np.float64)
        with pytest.raises(DataError):
            train.train(model, [], self.config(), preprocess, image_root=root)


class TestCheckpoint:
    def forward_bits(self, model, images):
        return fusion.forward(images, model).data

    def test_roundtrip_forward_bit_identical(self, tmp_path, mini_dataset):
        samples, vocab, preprocess, root = mini_dataset
        model = make_mini_model(vocab, seed=8, dtype=np.float32)
        result = train.train(
            model, samples, train.TrainConfig(epochs=1, batch_size=4, seed=0), preprocess, image_root=root
        )
        path = str(tmp_path / "m.ckpt")
        checkpoint.save_checkpoint(path, model, result.state, epoch=1, seed=0, preprocess=preprocess)
        bundle = checkpoint.load_checkpoint(path)
        assert bundle.epoch == 1 and bundle.seed == 0 and bundle.state.t == result.state.t
        assert bundle.preprocess.target_size == preprocess.target_size
        images = next(iter(data.batches(samples, 4, 0, False, preprocess, image_root=root)))[0]
        assert np.array_equal(self.forward_bits(model, images), self.forward_bits(bundle.model, images))
        for name, p in model.named_parameters():
            assert np.array_equal(bundle.state.m[name], result.state.m[name])

    def test_save_load_save_byte_identical(self, tmp_path):
        model = make_mini_model(seed=9, dtype=np.float32)
        pp = data.PreprocessConfig(target_size=8)
        p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        checkpoint.save_checkpoint(p1, model, None, epoch=3, seed=11, preprocess=pp)
        b = checkpoint.load_checkpoint(p1)
        checkpoint.save_checkpoint(p2, b.model, None, epoch=b.epoch, seed=b.seed, preprocess=b.preprocess)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_corrupted_magic_rejected(self, tmp_path):
        model = make_mini_model(seed=10)
        path = str(tmp_path / "c.ckpt")
        checkpoint.save_checkpoint(path, model)
        blob = bytearray(open(path, "rb").read())
        blob[0] ^= 0xFF
        open(path, "wb").write(bytes(blob))
        with pytest.raises(CheckpointError, match="magic"):
            checkpoint.load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        model = make_mini_model(seed=11)
        path = str(tmp_path / "t.ckpt")
        checkpoint.save_checkpoint(path, model)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[: len(blob) - 64])
        with pytest.raises(CheckpointError, match="truncated"):
            checkpoint.load_checkpoint(path)

    def test_vocabulary_mismatch_prints_both(self, tmp_path):
        model = make_mini_model(vocabulary=("Edema", "Mass"), seed=12)
        path = str(tmp_path / "v.ckpt")
        checkpoint.save_checkpoint(path, model)
        with pytest.raises(CheckpointError) as err:
            checkpoint.load_checkpoint(path, expected_vocabulary=["Edema", "Hernia"])
        assert "Mass" in str(err.value) and "Hernia" in str(err.value)

    def test_config_hash_tamper_detected(self, tmp_path):
        model = make_mini_model(seed=13)
        path = str(tmp_path / "h.ckpt")
        checkpoint.save_checkpoint(path, model)
        blob = open(path, "rb").read()
        tampered = blob.replace(b'"epochs"', b'"epochz"', 1)  # no-op if absent
        tampered = tampered.replace(b'"image_size":8', b'"image_size":9', 1)
        assert tampered != blob
        open(path, "wb").write(tampered)
        with pytest.raises(CheckpointError, match="hash"):
            checkpoint.load_checkpoint(path)

    def test_resume_reproduces_uninterrupted_loss_log(self, tmp_path, mini_dataset):
        samples, vocab, preprocess, root = mini_dataset
        cfg = train.TrainConfig(epochs=4, batch_size=4, seed=5, precision="float64")

        full = train.train(
            make_mini_model(vocab, seed=14, dtype=np.float64), samples, cfg, preprocess, image_root=root
        ).loss_log

        half_cfg = train.TrainConfig(epochs=2, batch_size=4, seed=5, precision="float64")
        model = make_mini_model(vocab, seed=14, dtype=np.float64)
        half = train.train(model, samples, half_cfg, preprocess, image_root=root)
        path = str(tmp_path / "resume.ckpt")
        checkpoint.save_checkpoint(path, model, half.state, epoch=2, seed=5)

        bundle = checkpoint.load_checkpoint(path)
        resumed = train.train(
            bundle.model, samples,
            train.TrainConfig(epochs=4, batch_size=4, seed=bundle.seed, precision="float64"),
            preprocess, image_root=root, start_epoch=bundle.epoch, adam_state=bundle.state,
        ).loss_log

        assert half.loss_log == full[:2]
        assert resumed == full[2:]

    def test_loss_log_csv_roundtrip(self, tmp_path):
        log = [(1, 0.6931471805599453), (2, 0.25)]
        path = str(tmp_path / "loss_log.csv")
        train.write_loss_log(log, path)
        lines = open(path).read().splitlines()
        assert lines[0] == "epoch,mean_loss"
        parsed = [(int(l.split(",")[0]), float(l.split(",")[1])) for l in lines[1:]]
        assert parsed == log


class TestTensorFixture:
    def test_roundtrip(self, tmp_path):
        arr = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(np.float32)
        path = str(tmp_path / "x.dst")
        checkpoint.write_tensor_fixture(path, arr)
        back = checkpoint.read_tensor_fixture(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)

    def test_layout_is_the_documented_one(self, tmp_path):
        arr = np.arange(6, dtype=np.float32).reshape(2, 3)
        path = str(tmp_path / "y.dst")
        checkpoint.write_tensor_fixture(path, arr)
        raw = open(path, "rb").read()
        assert raw[:4] == b"DST1"
        assert raw[4] == 2
        import struct

        assert struct.unpack_from("<2I", raw, 5) == (2, 3)
        assert np.frombuffer(raw, dtype="<f4", offset=13).tolist() == arr.reshape(-1).tolist()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "z.dst"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            checkpoint.read_tensor_fixture(str(path))
