import math

import numpy as np
import pytest

from ctlab.segnet import (Adam, ParamSet, SGD, TrainConfig, TrainingDiverged, UNetConfig, backward, forward,
                          init_unet, loss, loss_and_grad, predict_mask, train)

SMALL = UNetConfig(depth=2, base_width=4, image_side=16)


def _batch(rng, n=2, side=16, cin=4, dtype=np.float64):
    x = rng.random((n, cin, side, side)).astype(dtype)
    les = (rng.random((n, side, side)) > 0.7).astype(np.uint8)
    return x, np.stack([les, 1 - les], axis=1)


def test_config_validation():
    UNetConfig(depth=3, image_side=320)
    with pytest.raises(ValueError, match="divisible"):
        UNetConfig(depth=4, image_side=100)
    with pytest.raises(ValueError):
        UNetConfig(depth=0, image_side=16)


def test_init_deterministic_and_shaped():
    a, b = init_unet(SMALL, 7), init_unet(SMALL, 7)
    assert a.equals(b)
    assert not a.equals(init_unet(SMALL, 8))
    assert a.tensors["enc0.conv0.w"].shape == (4, 4, 3, 3)
    assert a.tensors["mid.conv0.w"].shape == (16, 8, 3, 3)
    assert a.tensors["dec0.conv0.w"].shape == (4, 8, 3, 3)
    assert a.tensors["head.w"].shape == (2, 4, 1, 1)
    assert all((v == 0).all() for k, v in a.tensors.items() if k.endswith(".b"))
    assert a.all_finite()


def test_forward_range_and_shape(rng):
    p = init_unet(SMALL, 0)
    x, _ = _batch(rng, 3, dtype=np.float32)
    y = forward(p, x)
    assert y.shape == (3, 2, 16, 16)
    assert (y > 0).all() and (y < 1).all()


def test_forward_saturated_logits_stay_below_one(rng):
    p = init_unet(SMALL, 0)
    p.tensors["head.b"][:] = 100.0
    y = forward(p, _batch(rng, 1, dtype=np.float32)[0])
    assert (y < 1).all()
    assert predict_mask(p, _batch(rng, 1, dtype=np.float32)[0][0], threshold=1.0).sum() == 0


def test_zero_weights_give_half(rng):
    p = init_unet(SMALL, 0)
    for v in p.tensors.values():
        v[:] = 0
    y = forward(p, _batch(rng, 2, dtype=np.float32)[0])
    assert (y == 0.5).all()
    x = _batch(rng, 1, dtype=np.float32)[0][0]
    assert predict_mask(p, x, 0.5).all()
    assert not predict_mask(p, x, 1.0).any()
    assert predict_mask(p, x, 0.0).all()


def test_batch_order_equivariance(rng):
    p = init_unet(SMALL, 1)
    x, _ = _batch(rng, 4, dtype=np.float32)
    perm = np.array([2, 0, 3, 1])
    np.testing.assert_array_equal(forward(p, x)[perm], forward(p, x[perm]))


def test_forward_shape_mismatch(rng):
    p = init_unet(SMALL, 0)
    with pytest.raises(ValueError):
        forward(p, rng.random((1, 3, 16, 16)))


def _loss_oracle(pred, target, eps=1e-7):
    total, n = 0.0, 0
    for b in range(pred.shape[0]):
        for c in range(pred.shape[1]):
            for i in range(pred.shape[2]):
                for j in range(pred.shape[3]):
                    p = min(max(float(pred[b, c, i, j]), eps), 1 - eps)
                    t = float(target[b, c, i, j])
                    total += -(t * math.log(p) + (1 - t) * math.log(1 - p))
                    n += 1
    return total / n


def test_loss_examples(rng):
    _, t = _batch(rng, 1, side=4)
    assert loss(t.astype(float), t) == pytest.approx(-math.log(1 - 1e-7), rel=1e-6)
    assert loss(np.full(t.shape, 0.5), t) == pytest.approx(math.log(2), abs=1e-12)
    pred = rng.random(t.shape)
    assert loss(pred, t) == pytest.approx(_loss_oracle(pred, t), abs=1e-10)


def test_loss_rejects_non_one_hot():
    t = np.ones((1, 2, 2, 2))
    with pytest.raises(ValueError):
        loss(np.full(t.shape, 0.5), t)


def test_gradient_matches_finite_differences(rng):
    p = init_unet(SMALL, 3, dtype=np.float64)
    # zero biases put ReLU inputs exactly on the kink where the pooled signal is 0
    for k in p.tensors:
        if k.endswith(".b"):
            p.tensors[k] += rng.normal(0, 0.05, p.tensors[k].shape)
    x, t = _batch(rng, 2)
    g = backward(p, x, t)
    assert list(g.tensors) == list(p.tensors)
    names = list(p.tensors)
    h = 1e-5
    for _ in range(20):
        k = names[rng.integers(len(names))]
        idx = tuple(int(rng.integers(s)) for s in p.tensors[k].shape)
        q = p.copy()
        q.tensors[k][idx] += h
        up = loss(forward(q, x), t)
        q.tensors[k][idx] -= 2 * h
        down = loss(forward(q, x), t)
        num = (up - down) / (2 * h)
        ana = g.tensors[k][idx]
        assert abs(ana - num) <= 1e-3 * max(abs(ana), abs(num), 1e-8), (k, idx, ana, num)


def test_gradient_vanishes_when_saturated_on_target(rng):
    p = init_unet(SMALL, 0, dtype=np.float64)
    x, _ = _batch(rng, 1)
    for k, v in p.tensors.items():
        if k.startswith("head"):
            v[:] = 0
    p.tensors["head.b"][:] = [-40.0, 40.0]       # predicts "no lesion" with certainty
    t = np.stack([np.zeros((1, 16, 16)), np.ones((1, 16, 16))], axis=1).astype(np.uint8)
    g = backward(p, x, t)
    assert max(np.abs(v).max() for v in g.tensors.values()) < 1e-12


def test_gradient_survives_confident_wrong_prediction(rng):
    p = init_unet(SMALL, 0, dtype=np.float64)
    x, _ = _batch(rng, 1)
    p.tensors["head.w"][:] = 0
    p.tensors["head.b"][:] = [-40.0, 40.0]
    t = np.stack([np.ones((1, 16, 16)), np.zeros((1, 16, 16))], axis=1).astype(np.uint8)
    g = backward(p, x, t)
    # d loss / d bias is mean(s - t) per channel: -1/2 and +1/2
    np.testing.assert_allclose(g.tensors["head.b"], [-0.5, 0.5], atol=1e-12)


def test_duplicated_batch_has_same_gradient(rng):
    p = init_unet(SMALL, 2, dtype=np.float64)
    x, t = _batch(rng, 1)
    g1 = backward(p, x, t)
    g2 = backward(p, np.concatenate([x, x]), np.concatenate([t, t]))
    for k in g1.tensors:
        np.testing.assert_allclose(g2.tensors[k], g1.tensors[k], rtol=0, atol=1e-10)


def test_zero_learning_rate_step_is_identity(rng):
    p = init_unet(SMALL, 0)
    x, t = _batch(rng, 2, dtype=np.float32)
    g = backward(p, x, t)
    for opt in (Adam(0.0), SGD(0.0)):
        q = p.copy()
        opt.step(q, g)
        assert q.equals(p)


def test_paramset_save_load(tmp_path):
    p = init_unet(SMALL, 4)
    p.save(tmp_path / "ck")
    q = ParamSet.load(tmp_path / "ck")
    assert q.equals(p) and q.init_seed == 4
    raw = (tmp_path / "ck.bin").read_bytes()
    assert len(raw) == 4 * p.num_params()
    (tmp_path / "ck.bin").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        ParamSet.load(tmp_path / "ck")


def _separable_set(rng, n, side=32):
    """Lesion pixels are bright in every channel; everything else is dark."""
    les = np.zeros((n, side, side), dtype=np.uint8)
    for i in range(n):
        r, c = rng.integers(4, side - 12, size=2)
        les[i, r:r + 8, c:c + 8] = 1
    x = np.repeat(les[:, None].astype(np.float32), 4, axis=1) * 0.8 + 0.1
    x[:, 3] = 1.0
    return x, np.stack([les, 1 - les], axis=1)


def test_training_loss_decreases(rng):
    data = _separable_set(rng, 20)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=5, max_epochs=3, patience=3, seed=0)
    _, trace = train(init_unet(UNetConfig(depth=2, base_width=4, image_side=32), 0), data, data, cfg)
    assert len(trace.train_loss) == 3
    assert trace.train_loss[0] > trace.train_loss[1] > trace.train_loss[2]


def test_training_deterministic_and_early_stop_contract(rng):
    data = _separable_set(rng, 10)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=4, max_epochs=6, patience=1, seed=3)
    start = init_unet(UNetConfig(depth=2, base_width=4, image_side=32), 0)
    p1, t1 = train(start, data, data, cfg)
    p2, t2 = train(start, data, data, cfg)
    assert t1.same_as(t2) and p1.equals(p2)
    assert t1.stopped_epoch <= cfg.max_epochs
    assert t1.stop_reason in ("early_stop", "max_epochs")
    assert t1.val_loss[t1.best_epoch - 1] == min(t1.val_loss)
    from ctlab.segnet import eval_loss
    assert eval_loss(p1, *data) == pytest.approx(min(t1.val_loss), rel=1e-6)


def test_train_rejects_empty(rng):
    data = _separable_set(rng, 2)
    with pytest.raises(ValueError):
        train(init_unet(UNetConfig(depth=2, base_width=4, image_side=32), 0), data, (data[0][:0], data[1][:0]))


def test_train_reports_divergence(rng):
    data = _separable_set(rng, 4)
    p = init_unet(UNetConfig(depth=2, base_width=4, image_side=32), 0)
    p.tensors["head.w"][:] = np.nan
    with pytest.raises(TrainingDiverged) as err:
        train(p, data, data, TrainConfig(max_epochs=2))
    assert err.value.epoch == 1


def test_lung_mode_configuration(rng):
    cfg = UNetConfig(input_channels=3, output_channels=2, depth=2, base_width=4, image_side=16)
    p = init_unet(cfg, 0, dtype=np.float64)
    x = rng.random((2, 3, 16, 16))
    lung = (rng.random((2, 16, 16)) > 0.5).astype(np.uint8)
    t = np.stack([lung, 1 - lung], axis=1)
    value, g = loss_and_grad(p, x, t)
    assert value > 0 and g.tensors["enc0.conv0.w"].shape == (4, 3, 3, 3)
    assert predict_mask(p, x).shape == (2, 16, 16)
