"""Training-loop tests on micro schedules.

Full-scale curriculum behavior is covered by the acceptance suite; these
tests pin the mechanics: plateau arithmetic, optimizer behavior, stage
sequencing, mask resampling, determinism, divergence recovery, and the
freezing contract of fine-tuning.
"""

import numpy as np
import pytest

import gridvolt.autodiff as ad
import gridvolt.dataset as ds
import gridvolt.network as net
import gridvolt.simulation as sim
import gridvolt.training as tr
from gridvolt.seeding import rng


@pytest.fixture(scope="module")
def day_dataset():
    spec = sim.generate_substation(31, "tiny", n_feeders=3)
    scen = sim.ScenarioConfig(horizon_minutes=1440, der_penetration=20)
    return ds.build_dataset(spec, scen)  # 96 snapshots


def micro_config(**overrides):
    base = dict(seed=1, steps_per_epoch=12, max_warmup_epochs=3,
                ramp_epochs=2, levels=(80, 40, 5), plateau_window=2,
                finetune_epochs=4, val_max_snapshots=8)
    base.update(overrides)
    return tr.TrainConfig(**base)


# -- plateau ------------------------------------------------------------------


def test_plateau_spec_arithmetic():
    losses = [0.10, 0.0999, 0.0999, 0.0999, 0.0999, 0.0999]
    assert tr.plateau(losses, window=5, eps=1e-3)


def test_plateau_false_while_dropping():
    losses = [1.0, 0.8, 0.6, 0.4, 0.2, 0.1]
    assert not tr.plateau(losses, window=5, eps=1e-3)


def test_plateau_true_when_constant():
    assert tr.plateau([0.5] * 10, window=10, eps=1e-3)


def test_plateau_needs_full_window():
    assert not tr.plateau([0.5, 0.5], window=5, eps=1e-3)


# -- optimizer ----------------------------------------------------------------


def test_adam_minimizes_a_quadratic():
    x = ad.Tensor(np.array([10.0]), requires_grad=True, name="x")
    opt = tr.Adam([x], lr=0.3)
    for _ in range(300):
        opt.zero_grad()
        with ad.Tape():
            loss = ad.total_sum(ad.mul(ad.sub(x, 3.0), ad.sub(x, 3.0)))
            ad.backward(loss)
        opt.step()
    assert x.values[0] == pytest.approx(3.0, abs=1e-3)


def test_adam_rejects_frozen_tensors():
    x = ad.Tensor(np.ones(2), requires_grad=False, name="frozen")
    with pytest.raises(ValueError, match="frozen"):
        tr.Adam([x], lr=0.1)


def test_adam_skips_tensors_without_gradient():
    x = ad.Tensor(np.array([5.0]), requires_grad=True)
    opt = tr.Adam([x], lr=0.5)
    opt.step()  # no grad accumulated yet
    assert x.values[0] == 5.0


# -- config -------------------------------------------------------------------


def test_config_defaults_touch_seventeen_levels():
    cfg = tr.TrainConfig()
    assert len(cfg.levels) == 17
    assert cfg.levels[:3] == (80, 75, 70)
    assert cfg.levels[-2:] == (5, 1)


def test_config_validation():
    with pytest.raises(ValueError, match="level"):
        tr.TrainConfig(levels=())
    with pytest.raises(ValueError, match="levels must lie"):
        tr.TrainConfig(levels=(80, 0))
    with pytest.raises(ValueError, match="val_fraction"):
        tr.TrainConfig(val_fraction=1.5)
    with pytest.raises(ValueError, match="plateau window"):
        tr.TrainConfig(plateau_window=0)
    with pytest.raises(ValueError, match="finetune_fraction"):
        tr.TrainConfig(finetune_fraction=0.0)


# -- the loop -----------------------------------------------------------------


@pytest.fixture(scope="module")
def micro_run(day_dataset):
    return tr.train(day_dataset, micro_config())


def test_training_is_deterministic(day_dataset, micro_run):
    again = tr.train(day_dataset, micro_config())
    first = [(r.train_total, r.val_sup, r.val_rmse) for r in micro_run.history]
    second = [(r.train_total, r.val_sup, r.val_rmse) for r in again.history]
    assert first == second
    for name, t in micro_run.params.tensors.items():
        np.testing.assert_array_equal(t.values, again.params.tensors[name].values)


def test_stage_sequence_and_physics_schedule(micro_run):
    history = micro_run.history
    stages = [r.stage for r in history]
    assert stages[0] == "warmup"
    first_ramp = stages.index("ramp")
    first_cur = stages.index("curriculum")
    assert first_ramp < first_cur
    assert all(s == "warmup" for s in stages[:first_ramp])
    warm = [r for r in history if r.stage == "warmup"]
    assert all(r.lam_phys == 0.0 for r in warm)
    assert all(r.p_obs == 80.0 for r in warm)
    ramp = [r for r in history if r.stage == "ramp"]
    lams = [r.lam_phys for r in ramp]
    assert lams == sorted(lams) and lams[-1] == pytest.approx(0.1)
    cur = [r for r in history if r.stage == "curriculum"]
    assert [r.p_obs for r in cur] == [80, 40, 5]
    assert all(r.lam_phys == pytest.approx(0.1) for r in cur)


def test_validation_error_improves_over_warmup(micro_run):
    warm = [r for r in micro_run.history if r.stage == "warmup"]
    assert warm[-1].val_sup < warm[0].val_sup


def test_epoch_masks_are_resampled_and_union_grows():
    m0 = net.sample_observed_mask(93, 20, rng(1, "mask", "curriculum", 5))
    m1 = net.sample_observed_mask(93, 20, rng(1, "mask", "curriculum", 6))
    assert not np.array_equal(m0, m1)
    assert (m0 | m1).sum() > m0.sum()


def test_empty_and_undersized_datasets_rejected(day_dataset):
    with pytest.raises(ValueError, match="no datasets"):
        tr.train([], micro_config())
    tiny = day_dataset.subset(2)
    with pytest.raises(ValueError, match="validation split"):
        tr.train(tiny, micro_config(val_fraction=0.9))


def test_divergence_aborts_and_restores_last_good(day_dataset, monkeypatch):
    calls = {"n": 0}
    real = tr.batch_loss

    def poisoned(params, batch, weights):
        calls["n"] += 1
        if calls["n"] > 15:  # partway through the second epoch
            raise ad.NonFiniteError("loss blew up")
        return real(params, batch, weights)

    monkeypatch.setattr(tr, "batch_loss", poisoned)
    result = tr.train(day_dataset, micro_config())
    assert result.aborted
    assert len(result.history) == 1  # only the first epoch completed
    for t in result.params.tensors.values():
        assert np.all(np.isfinite(t.values))


def test_history_csv_roundtrip(micro_run, tmp_path):
    path = tmp_path / "history.csv"
    tr.history_to_csv(micro_run.history, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == ",".join(tr.HISTORY_COLUMNS)
    assert len(lines) == len(micro_run.history) + 1
    assert lines[1].startswith("0,warmup,80")


# -- fine-tuning --------------------------------------------------------------


@pytest.fixture(scope="module")
def target_dataset():
    spec = sim.generate_substation(77, "tiny", n_feeders=3)
    scen = sim.ScenarioConfig(horizon_minutes=1440, der_penetration=20)
    return ds.build_dataset(spec, scen)


def test_finetune_freezes_backbone_bitwise(micro_run, target_dataset,
                                           day_dataset):
    params = _clone(micro_run.params)
    before = {n: params.tensors[n].values.copy()
              for n in params.backbone_names()}
    head_before = {n: params.tensors[n].values.copy()
                   for n in params.head_names() if n != "eta"}
    result = tr.finetune(params, target_dataset, micro_config(),
                         n_pretrain=day_dataset.n_snapshots)
    assert not result.aborted
    assert len(result.history) == 4
    assert all(r.stage == "finetune" for r in result.history)
    for name, vals in before.items():
        np.testing.assert_array_equal(result.params.tensors[name].values,
                                      vals)
    moved = [n for n, vals in head_before.items()
             if not np.array_equal(result.params.tensors[n].values, vals)]
    assert moved  # the head actually trained


def test_finetune_creates_gates_for_target_feeders(micro_run, target_dataset):
    params = _clone(micro_run.params)
    result = tr.finetune(params, target_dataset, micro_config())
    assert set(result.params.feeder_rows) == set(
        int(f) for f in target_dataset.feeder_ids)
    assert result.params.tensors["eta"].shape == (3, 1)


def test_finetune_truncates_to_pretraining_fraction(micro_run, target_dataset,
                                                    monkeypatch):
    seen = {}
    real = ds.SnapshotDataset.subset

    def spy(self, n_first):
        seen["n"] = n_first
        return real(self, n_first)

    monkeypatch.setattr(ds.SnapshotDataset, "subset", spy)
    params = _clone(micro_run.params)
    tr.finetune(params, target_dataset, micro_config(), n_pretrain=96)
    assert seen["n"] == 24  # round(0.25 * 96)


def _clone(params):
    import gridvolt.model as gm
    fresh = {n: ad.Tensor(t.values.copy(), requires_grad=True, name=n)
             for n, t in params.tensors.items()}
    return gm.ModelParams(params.config, fresh, dict(params.feeder_rows))
