import numpy as np
import numpy.testing as npt
import pytest

from intertwined.utils.architectures import build_model
from intertwined.utils.errors import ConfigurationError, DataError, TrainingDivergenceError
from intertwined.utils.params import ParamStore
from intertwined.utils.tensor import Graph, Tensor, backward
from intertwined.utils.training import (
    RMSProp,
    SGD,
    EpochStats,
    TrainRecord,
    accuracy_from_scores,
    cross_entropy,
    evaluate,
    evaluate_accuracy,
    fit,
    make_optimizer,
    rmsprop_step,
    sgd_step,
)


def single_param(value, grad=None):
    params = ParamStore()
    param = params.add("theta", np.array([value]))
    if grad is not None:
        param.grad = np.array([grad])
    return params


def test_cross_entropy_uniform_and_perfect():
    logits = Tensor(np.zeros(6), requires_grad=True)
    with Graph() as graph:
        loss = cross_entropy(logits, 0)
        backward(loss, graph)
    assert loss.item() == pytest.approx(np.log(6.0), abs=1e-12)
    expected = np.full(6, 1.0 / 6.0)
    expected[0] -= 1.0
    npt.assert_allclose(logits.grad, expected, atol=1e-12)

    confident = Tensor(np.array([60.0, 0.0, 0.0, 0.0, 0.0, 0.0]))
    assert cross_entropy(confident, 0).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_batch_mean():
    logits = Tensor(np.zeros((4, 6)), requires_grad=True)
    with Graph() as graph:
        backward(cross_entropy(logits, np.array([0, 1, 2, 3])), graph)
    npt.assert_allclose(logits.grad.sum(axis=1), np.zeros(4), atol=1e-12)
    assert logits.grad[0, 0] == pytest.approx((1.0 / 6.0 - 1.0) / 4.0)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(DataError):
        cross_entropy(Tensor(np.zeros((2, 6))), np.array([0, 6]))
    with pytest.raises(DataError):
        cross_entropy(Tensor(np.zeros((2, 6))), np.array([0.0, 1.0]))


def test_sgd_step():
    params = sgd_step(single_param(1.0, 2.0), lr=0.1)
    npt.assert_allclose(params["theta"].data, [0.8])
    assert params["theta"].grad is None
    unchanged = sgd_step(single_param(1.0, 0.0), lr=0.1)
    npt.assert_array_equal(unchanged["theta"].data, [1.0])


def test_rmsprop_first_step():
    params = rmsprop_step(single_param(0.0, 1.0), lr=0.001, rho=0.9, epsilon=1e-7)
    npt.assert_allclose(params.state["theta"]["square_avg"], [0.1])
    npt.assert_allclose(params["theta"].data, [-0.001 / (np.sqrt(0.1) + 1e-7)], rtol=1e-12)
    assert params["theta"].data[0] == pytest.approx(-0.0031623, abs=1e-7)


def test_rmsprop_zero_gradient_decays_average():
    params = rmsprop_step(single_param(0.5, 1.0))
    before = params["theta"].data.copy()
    rmsprop_step(params)
    npt.assert_array_equal(params["theta"].data, before)
    npt.assert_allclose(params.state["theta"]["square_avg"], [0.09])


def test_rmsprop_step_size_is_scale_free():
    for grad in (0.01, 100.0):
        params = single_param(0.0)
        previous = 0.0
        for _ in range(200):
            params["theta"].grad = np.array([grad])
            rmsprop_step(params, lr=0.001)
            step = previous - params["theta"].data[0]
            previous = params["theta"].data[0]
        assert step == pytest.approx(0.001, rel=1e-3)


def test_rmsprop_rejects_bad_rho():
    with pytest.raises(ConfigurationError):
        rmsprop_step(single_param(0.0, 1.0), rho=1.0)


def test_non_finite_gradient_raises():
    with pytest.raises(TrainingDivergenceError) as info:
        sgd_step(single_param(1.0, np.nan), lr=0.1, epoch=3, batch=2)
    assert info.value.parameter == "theta"
    assert info.value.epoch == 3


def test_make_optimizer():
    assert isinstance(make_optimizer("sgd"), SGD)
    optimizer = make_optimizer("rmsprop", 0.01)
    assert isinstance(optimizer, RMSProp) and optimizer.lr == 0.01
    assert make_optimizer("sgd").lr == 0.001
    with pytest.raises(ConfigurationError):
        make_optimizer("adam")


def test_accuracy_examples():
    labels = np.repeat(np.arange(6), 3)
    perfect = np.eye(6)[labels]
    assert accuracy_from_scores(perfect, labels) == 1.0
    constant = np.ones((18, 6))
    assert accuracy_from_scores(constant, labels) == pytest.approx(1.0 / 6.0)
    scores = np.random.default_rng(0).normal(size=(18, 6))
    assert accuracy_from_scores(scores, labels) == accuracy_from_scores(np.exp(scores) * 3.0, labels)


def test_zero_epochs_is_a_no_op(small_config, small_dataset):
    model = build_model(small_config, seed=0, input_shape=(4, 32))
    before = model.params.snapshot()
    record = fit(model, small_dataset, small_dataset, epochs=0)
    assert record.epochs == []
    assert record.best_epoch is None
    for name, values in before.items():
        npt.assert_array_equal(model.params[name].data, values)


def test_zero_learning_rate_keeps_parameters(small_config, small_dataset):
    model = build_model(small_config, seed=0, input_shape=(4, 32))
    before = model.params.snapshot()
    record = fit(model, small_dataset, small_dataset, epochs=2, batch_size=8, lr=0.0)
    assert len(record.epochs) == 2
    for name, values in before.items():
        npt.assert_array_equal(model.params[name].data, values)


def test_fit_is_deterministic(small_config, small_dataset):
    records = []
    for _ in range(2):
        model = build_model(small_config, seed=4, input_shape=(4, 32))
        records.append(fit(model, small_dataset, small_dataset, epochs=3, batch_size=8, seed=9))
    assert records[0].to_lines() == records[1].to_lines()
    assert records[0].best_epoch in (1, 2, 3)


def test_fit_restores_best_epoch(small_config, small_dataset):
    model = build_model(small_config, seed=1, input_shape=(4, 32))
    record = fit(model, small_dataset, small_dataset, epochs=3, batch_size=10, seed=2, lr=0.01)
    loss, accuracy = evaluate(model, small_dataset)
    assert loss == pytest.approx(record.best_val_loss, rel=1e-9)
    assert accuracy == pytest.approx(record.best_val_accuracy)
    assert evaluate_accuracy(model, small_dataset) == pytest.approx(accuracy)


def test_fit_rejects_bad_arguments(small_config, small_dataset):
    model = build_model(small_config, seed=0, input_shape=(4, 32))
    with pytest.raises(ConfigurationError):
        fit(model, small_dataset, small_dataset, epochs=-1)
    with pytest.raises(ConfigurationError):
        fit(model, small_dataset, small_dataset, batch_size=0)


def test_train_record_roundtrip(tmp_path):
    record = TrainRecord(seed=1, config_hash="abc123", batch_size=64, lr=0.001, minimizer="rmsprop")
    assert record.add_epoch(EpochStats(1, 1.7, 1.6, 0.3))
    assert not record.add_epoch(EpochStats(2, 1.5, 1.65, 0.35))
    assert record.add_epoch(EpochStats(3, 1.2, 1.1, 0.6))
    path = record.write(tmp_path / "train_record.jsonl")
    restored = TrainRecord.read(path)
    assert restored.to_lines() == record.to_lines()
    assert restored.best_epoch == 3

    curve = record.write_loss_curve(tmp_path / "loss_curve.csv")
    lines = curve.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_accuracy"
    assert len(lines) == 4
