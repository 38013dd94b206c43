import math

import numpy as np
import pytest

from mhcaf import checkpoint, training
from mhcaf.model import MHCAFNet, ClassificationHead, head_forward
from mhcaf.nn import Parameter
from mhcaf.tensor import grad_check

from conftest import readout, toy_images, toy_run_config, uniform


def one_param(value, grad):
    p = Parameter(np.array([value], dtype=float))
    p.grad = np.array([grad], dtype=float)
    return p


class TestAdam:
    def test_first_step(self):
        p = one_param(0.0, 1.0)
        opt = training.Adam([("p", p)], lr=5e-4)
        opt.step()
        assert abs(-p.data[0] - 5e-4 / (1 + 1e-8)) < 1e-18
        assert abs(-p.data[0] - 4.99999995e-4) < 1e-15

    def test_zero_gradient_noop(self):
        p = one_param(1.5, 3.0)
        opt = training.Adam([("p", p)])
        opt.step()
        before = (p.data.copy(), opt.m["p"].copy(), opt.v["p"].copy())
        p.grad = np.zeros(1)
        opt.step()
        assert opt.t == 2
        assert np.array_equal(p.data, before[0]) and np.array_equal(opt.m["p"], before[1])

    def test_three_steps_on_square(self):
        p = one_param(1.0, 0.0)
        opt = training.Adam([("p", p)], lr=0.1)
        x, m, v = 1.0, 0.0, 0.0
        for t in range(1, 4):
            p.grad = 2.0 * p.data
            opt.step()
            g = 2.0 * x
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 0.1 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
            assert abs(p.data[0] - x) < 1e-15

    def test_missing_grad(self):
        p = Parameter(np.zeros(2))
        p.grad = None
        with pytest.raises(ValueError):
            training.Adam([("p", p)]).step()

    def test_state_round_trip(self):
        p = one_param(1.0, 0.5)
        opt = training.Adam([("p", p)])
        opt.step()
        other = training.Adam([("p", one_param(1.0, 0.0))])
        other.load_state(opt.state())
        assert other.t == 1 and np.array_equal(other.m["p"], opt.m["p"])


class TestPlateau:
    def run(self, history):
        s = training.PlateauScheduler(5e-4)
        return [s.step(m) for m in history]

    def test_seven_flat(self):
        lrs = self.run([0.5] + [0.5] * 7)
        assert lrs[-2] == 5e-4 and lrs[-1] == 2.5e-4

    def test_improvement_resets(self):
        s = training.PlateauScheduler(5e-4)
        for m in [0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.6]:
            s.step(m)
        assert s.lr == 5e-4 and s.counter == 0

    def test_fourteen_flat(self):
        lrs = self.run([0.5] + [0.4] * 14)
        want, lr, c = [], 5e-4, 0
        for i, _ in enumerate(lrs):
            if i > 0:
                c += 1
                if c == 7:
                    lr, c = lr / 2, 0
            want.append(lr)
        assert lrs == want and lrs[-1] == 1.25e-4


class TestEarlyStop:
    def test_best_at_three(self):
        es = training.EarlyStopping(15)
        hist = [0.1, 0.2, 0.3] + [0.3] * 20
        stopped = next(e for e, m in enumerate(hist, 1) if es.step(m, e))
        assert stopped == 18 and es.best_epoch == 3

    def test_monotone_never_stops(self):
        es = training.EarlyStopping(15)
        assert not any(es.step(0.01 * e, e) for e in range(1, 41))


class TestClassWeights:
    def test_balanced(self):
        assert np.array_equal(training.class_weights([50] * 78), np.ones(78))

    def test_two_classes(self):
        np.testing.assert_allclose(training.class_weights([10, 30]), [2.0, 2.0 / 3.0], rtol=0, atol=1e-15)

    def test_empty_class(self):
        with pytest.raises(ValueError, match="kha"):
            training.class_weights([3, 0], ["ka", "kha"])


def test_batch_indices_no_singleton():
    b = training.batch_indices(33, 32, np.random.default_rng(0))
    assert [len(x) for x in b] == [33]
    assert sorted(np.concatenate(b)) == list(range(33))


class TestHead:
    def test_zero_weights(self, rng):
        head = ClassificationHead(16, (8, 4), 3, rng, 0.3, 0.1)
        for name, p in head.named_parameters():
            if name.startswith("fc") and name.endswith(".w"):
                p.data[...] = 0.0
        head.fc3.b.data[...] = [0.1, -0.2, 0.3]
        out = head_forward(rng.normal(size=(2, 16)), head, training=False)
        np.testing.assert_allclose(out.data, np.tile([0.1, -0.2, 0.3], (2, 1)), rtol=0, atol=1e-15)

    def test_default_width(self):
        m = MHCAFNet()
        assert m.head.fc4.w.shape == (128, 78)
        assert [m.head.fc1.w.shape[1], m.head.fc2.w.shape[1], m.head.fc3.w.shape[1]] == [512, 256, 128]

    def test_grad_check(self, rng):
        head = ClassificationHead(8, (8, 4), 3, rng, 0.0, 0.1)
        for p in head.parameters():
            p.data += rng.normal(scale=0.5, size=p.shape)
        f = uniform(rng, 4, 8)
        assert grad_check(lambda: readout(head(f)), [f, *head.parameters()]) < 1e-4


def toy_train(tmp_path, name, epochs=2, seed=0):
    cfg = toy_run_config(max_epochs=epochs, seed=seed)
    x, y = toy_images()
    model = training.build_model(cfg, 3)
    res = training.train(model, x, y, x[::3], y[::3], cfg.train, tmp_path / name, cfg, ["a", "b", "c"])
    return model, res, cfg


class TestTrain:
    def test_deterministic_csv(self, tmp_path):
        toy_train(tmp_path, "r1")
        toy_train(tmp_path, "r2")
        a = (tmp_path / "r1" / "metrics.csv").read_bytes()
        assert a == (tmp_path / "r2" / "metrics.csv").read_bytes()
        assert len(a.splitlines()) == 3

    def test_loss_decreases(self, tmp_path):
        _, res, _ = toy_train(tmp_path, "r", epochs=6)
        losses = [h["train_loss"] for h in res.history]
        assert losses[-1] < losses[0]

    def test_checkpoint_round_trip(self, tmp_path):
        model, res, cfg = toy_train(tmp_path, "r")
        path = tmp_path / "r" / "best.ckpt"
        raw = path.read_bytes()
        ck = checkpoint.load(path)
        assert checkpoint.to_bytes(ck) == raw
        loaded, ck2, cfg2 = training.load_model(path)
        assert cfg2.to_flat() == cfg.to_flat() and ck2.classes == ["a", "b", "c"]
        x, _ = toy_images()
        np.testing.assert_array_equal(training.predict_logits(loaded, x), training.predict_logits(model, x))

    def test_bad_checkpoint(self):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.from_bytes(b"NOTACKPT" + b"\0" * 8)

    def test_nan_loss(self, tmp_path):
        cfg = toy_run_config()
        x, y = toy_images()
        model = training.build_model(cfg, 3)
        model.head.fc3.b.data[0] = np.nan
        with pytest.raises(training.NumericError):
            training.train(model, x, y, x, y, cfg.train)

    def test_initial_loss_near_log_c(self):
        cfg = toy_run_config(num_classes=78)
        model = training.build_model(cfg, 78)
        x = np.random.default_rng(0).integers(0, 256, size=(16, 16, 16, 3)).astype(np.uint8)
        y = np.arange(16) % 78
        logits = model(x.astype(float) / 255.0)
        loss = training.ops.softmax_cross_entropy(logits, y).item()
        assert abs(loss - math.log(78)) <= 0.2 * math.log(78)
