import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

import intertwined
from intertwined.utils.architectures import HyperConfig, plan_shapes
from intertwined.utils.errors import ConfigurationError, DataError, SpaceDegenerateError
from intertwined.utils.space import SearchSpace
from intertwined.utils.sweep import (
    SweepResult,
    SweepSpec,
    TrialResult,
    best_runs,
    grid_configs,
    run_sweep,
    sample_config,
    sensitivity_curves,
    sensitivity_summary,
    trial_seed,
)


def tiny_space():
    """Intertwined space whose every config fits 4×32 trials."""
    return SearchSpace().restrict(
        "intertwined",
        module_count=(2,),
        tdfc_units=(4,),
        sdc_kernels=(2,),
        sdc_kernel_sizes=(3,),
        pool_size=(2,),
        lstm_units=(4,),
        lstm_depth=(1,),
        fc_units=(0,),
        minimizer=("rmsprop",),
    )


def hand_built_result():
    trials = [
        TrialResult(0, "a", {"minimizer": "sgd"}, 1, "ok", 1.0, 0.4, 2, 3, val_losses=[1.5, 1.0, 1.2]),
        TrialResult(1, "b", {"minimizer": "sgd"}, 2, "ok", 2.0, 0.3, 1, 3, val_losses=[2.0, 2.4, 2.6]),
        TrialResult(2, "c", {"minimizer": "sgd"}, 3, "ok", 3.0, 0.2, 3, 3, val_losses=[3.4, 3.2, 3.0]),
        TrialResult(3, "d", {"minimizer": "rmsprop"}, 4, "ok", 0.5, 0.7, 3, 3, val_losses=[0.9, 0.7, 0.5]),
        TrialResult(4, "e", {"minimizer": "rmsprop"}, 5, "ok", 0.7, 0.6, 2, 3, val_losses=[0.8, 0.7, 0.75]),
        TrialResult(5, "f", {"minimizer": "rmsprop"}, 6, "failed", error="RuntimeError: boom"),
    ]
    return SweepResult("intertwined", 0, 6, trials)


@pytest.mark.parametrize("family", ["intertwined", "cascade", "parallel"])
def test_sampled_configs_stay_in_space(family):
    space = SearchSpace()
    rng = np.random.default_rng(0)
    for _ in range(50):
        config = sample_config(space, family, rng)
        assert config.family == family
        config.validate(space)
        plan_shapes(config)


def test_sampling_is_deterministic():
    space = SearchSpace()
    first = [sample_config(space, "intertwined", np.random.default_rng(42)) for _ in range(3)]
    second = [sample_config(space, "intertwined", np.random.default_rng(42)) for _ in range(3)]
    assert [c.config_hash() for c in first] == [c.config_hash() for c in second]


def test_pool_type_is_drawn_uniformly():
    space = SearchSpace()
    rng = np.random.default_rng(5)
    draws = [sample_config(space, "intertwined", rng).pool_type for _ in range(10000)]
    assert abs(draws.count("max") / len(draws) - 0.5) <= 0.02


def test_degenerate_space_raises():
    space = SearchSpace().restrict("intertwined", module_count=(4,), sdc_kernel_sizes=(5,), pool_size=(4,))
    with pytest.raises(SpaceDegenerateError):
        sample_config(space, "intertwined", np.random.default_rng(0))


def test_restrict_rejects_unknown_and_empty_sets():
    with pytest.raises(ConfigurationError):
        SearchSpace().restrict("cascade", module_count=(2,))
    with pytest.raises(ConfigurationError):
        SearchSpace().restrict("cascade", conv_size=())


def test_grid_collapses_unused_widths():
    space = SearchSpace().restrict(
        "cascade",
        conv_kernels=(2,),
        conv_size=(2,),
        conv_stride=(1,),
        conv_layers=(1,),
        lstm_layers=(0,),
        lstm_units=(10, 50, 100),
        fc_layers=(0,),
        fc_units=(10, 50),
        minimizer=("sgd",),
    )
    configs = list(grid_configs(space, "cascade"))
    assert len(configs) == 1
    assert configs[0].lstm_units == [0] and configs[0].fc_units == [0]


def test_grid_enumerates_baseline_space():
    space = SearchSpace().restrict(
        "parallel",
        conv_kernels=(2,),
        conv_size=(2,),
        conv_stride=(1,),
        conv_layers=(1,),
        lstm_layers=(1,),
        lstm_units=(10, 50),
        fc_layers=(0, 1),
        fc_units=(10,),
        minimizer=("sgd",),
    )
    configs = list(grid_configs(space, "parallel"))
    assert len(configs) == 4
    assert len({c.config_hash() for c in configs}) == 4
    with pytest.raises(ConfigurationError):
        next(grid_configs(SearchSpace(), "intertwined"))


def test_trial_seed_streams():
    assert trial_seed(0, 1) == trial_seed(0, 1)
    assert trial_seed(0, 1) != trial_seed(0, 2)
    assert trial_seed(0, 1) != trial_seed(1, 1)
    assert isinstance(trial_seed(3, 0), int)


def test_run_sweep_writes_results(tmp_path, small_dataset):
    results = tmp_path / "sweep.jsonl"
    result = run_sweep(tiny_space(), "intertwined", 2, small_dataset, seed=1, epochs=1, batch_size=8, jobs=1,
                       results_path=results)
    assert [t.index for t in result.trials] == [0, 1]
    assert all(t.ok for t in result.trials)
    assert result.best is not None
    assert all(len(t.val_losses) == 1 for t in result.trials)

    lines = [json.loads(line) for line in results.read_text().splitlines()]
    assert [line["type"] for line in lines] == ["trial", "trial", "summary"]
    assert lines[-1]["completed"] == 2
    assert lines[-1]["best_index"] == result.best.index

    restored = SweepResult.read(results)
    assert restored.summary() == result.summary()
    assert [t.val_losses for t in restored.trials] == [t.val_losses for t in result.trials]


def test_run_sweep_does_not_depend_on_jobs(small_dataset):
    serial = run_sweep(tiny_space(), "intertwined", 3, small_dataset, seed=4, epochs=1, batch_size=8, jobs=1)
    threaded = run_sweep(tiny_space(), "intertwined", 3, small_dataset, seed=4, epochs=1, batch_size=8, jobs=2)
    assert [t.config_hash for t in serial.trials] == [t.config_hash for t in threaded.trials]
    assert [t.best_val_loss for t in serial.trials] == [t.best_val_loss for t in threaded.trials]


def test_failing_trial_is_recorded(monkeypatch, tmp_path, small_dataset):
    def explode(*args, **kwargs):
        raise RuntimeError("boom")

    monkeypatch.setattr("intertwined.utils.sweep.fit", explode)
    results = tmp_path / "sweep.jsonl"
    result = run_sweep(tiny_space(), "intertwined", 2, small_dataset, seed=0, epochs=1, jobs=1,
                       results_path=results)
    assert result.best is None
    assert result.summary()["failed"] == 2
    assert all(t.error == "RuntimeError: boom" for t in result.trials)
    assert SweepResult.read(results).summary()["completed"] == 0


def test_run_sweep_rejects_empty_budget(small_dataset):
    with pytest.raises(ConfigurationError):
        run_sweep(tiny_space(), "intertwined", 0, small_dataset, seed=0)


def test_interrupted_results_are_reported(tmp_path):
    path = tmp_path / "sweep.jsonl"
    path.write_text(TrialResult(0, "a", {}, 1, "ok", 1.0, 0.5, 1, 1).to_line() + "\n")
    with pytest.raises(DataError):
        SweepResult.read(path)


def test_best_runs_order():
    result = hand_built_result()
    assert [t.index for t in best_runs(result, 3)] == [3, 4, 0]
    assert result.best.index == 3


def test_sensitivity_summary():
    frame = sensitivity_summary(hand_built_result(), "minimizer")
    assert frame.loc["sgd", "runs"] == 3
    assert frame.loc["sgd", "median"] == pytest.approx(2.0)
    assert frame.loc["sgd", "std"] == pytest.approx(np.sqrt(2.0 / 3.0))
    assert frame.loc["rmsprop", "median"] == pytest.approx(0.6)

    top = sensitivity_summary(hand_built_result(), "minimizer", top=2)
    assert list(top.index) == ["rmsprop"]

    with pytest.raises(ConfigurationError):
        sensitivity_summary(hand_built_result(), "momentum")
    with pytest.raises(DataError):
        sensitivity_summary(SweepResult("cascade", 0, 1), "minimizer")


def test_sweep_spec_load(tmp_path):
    path = tmp_path / "sweep.json"
    path.write_text(json.dumps({
        "family": "cascade",
        "budget": 4,
        "manifest": "raw/manifest.json",
        "space": {"conv_size": [2]},
    }))
    spec = SweepSpec.load(path)
    assert spec.manifest == str(tmp_path / "raw" / "manifest.json")
    assert spec.search_space().choices("cascade", "conv_size") == (2,)
    assert spec.search_space().choices("cascade", "conv_stride") == (1, 2)

    path.write_text(json.dumps({"family": "cascade", "budget": 4, "momentum": 0.9}))
    with pytest.raises(ConfigurationError):
        SweepSpec.load(path)
    with pytest.raises(ConfigurationError):
        SweepSpec.load(tmp_path / "absent.json")


def test_sampled_config_is_valid_hyperconfig():
    config = sample_config(tiny_space(), "intertwined", np.random.default_rng(0), (4, 32))
    assert HyperConfig.from_dict(config.to_dict()) == config


def test_sensitivity_curves():
    curves = sensitivity_curves(hand_built_result(), "minimizer")
    assert curves.loc[("sgd", 1), "runs"] == 3
    assert curves.loc[("sgd", 1), "median"] == pytest.approx(2.0)
    assert curves.loc[("sgd", 3), "median"] == pytest.approx(2.6)
    assert curves.loc[("rmsprop", 1), "median"] == pytest.approx(0.85)
    assert curves.loc[("rmsprop", 1), "std"] == pytest.approx(0.05)
    assert len(curves) == 6

    top = sensitivity_curves(hand_built_result(), "minimizer", top=2)
    assert set(top.index.get_level_values("minimizer")) == {"rmsprop"}
    assert list(top.xs("rmsprop")["median"]) == pytest.approx([0.85, 0.7, 0.625])

    bare = SweepResult("cascade", 0, 1, [TrialResult(0, "a", {"minimizer": "sgd"}, 1, "ok", 1.0, 0.4, 1, 1)])
    with pytest.raises(DataError):
        sensitivity_curves(bare, "minimizer")
    with pytest.raises(ConfigurationError):
        sensitivity_curves(hand_built_result(), "momentum")


def test_sweep_spec_requires_budget(tmp_path):
    path = tmp_path / "sweep.json"
    path.write_text(json.dumps({"family": "cascade"}))
    with pytest.raises(ConfigurationError):
        SweepSpec.load(path)


def test_worker_count_falls_back_to_setting(monkeypatch, tmp_path, small_dataset):
    path = tmp_path / "sweep.json"
    path.write_text(json.dumps({"family": "intertwined", "budget": 1}))
    assert SweepSpec.load(path).jobs is None

    workers = []

    class RecordingExecutor(ThreadPoolExecutor):
        def __init__(self, max_workers=None):
            workers.append(max_workers)
            super().__init__(max_workers=max_workers)

    monkeypatch.setattr("intertwined.utils.sweep.ThreadPoolExecutor", RecordingExecutor)
    monkeypatch.setitem(intertwined.config, "JOBS", 3)
    run_sweep(tiny_space(), "intertwined", 1, small_dataset, seed=0, epochs=1, batch_size=8,
              jobs=SweepSpec.load(path).jobs)
    assert workers == [3]
