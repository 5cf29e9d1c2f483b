"""Curriculum training and head-only transfer fine-tuning.

The schedule has three stages per substation. A warm-up trains with
supervision only at 80% observability until validation loss plateaus.
The physics weight then ramps linearly to its target over a fixed number
of epochs. Finally observability descends through
{80, 75, ..., 5, 1}%, resampling the sensor placement every epoch so the
model sees many mask realizations at each level.

Each optimization step processes one full substation snapshot; an epoch
is a seeded sample of snapshots from the training split. Validation uses
the last snapshots of the series as a contiguous time block, so no
15-minute neighbor of a training snapshot leaks into validation.

Fine-tuning freezes the backbone (input projection, prior coefficients,
all but the last encoder layer), re-creates per-feeder gates for the
target substation, truncates the target dataset to a fraction of the
pretraining volume, and trains the head at a reduced learning rate.

If any step produces a non-finite value, training aborts and returns the
parameters saved after the last completed epoch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import network as net
from .dataset import SnapshotDataset
from .evaluation import rmse as _rmse
from .losses import LossWeights, batch_loss, physics_ramp
from .model import (ModelConfig, ModelParams, build_batch, forward,
                    item_from_view)
from .seeding import rng as _rng

CURRICULUM_LEVELS = (80, 75, 70, 65, 60, 55, 50, 45, 40, 35, 30, 25, 20, 15,
                     10, 5, 1)


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    levels: tuple = CURRICULUM_LEVELS
    warmup_p_obs: float = 80.0
    lr_warmup: float = 1e-3
    lr_curriculum: float = 3e-4
    lr_finetune: float = 1e-4
    plateau_window: int = 10
    plateau_eps: float = 1e-3
    max_warmup_epochs: int = 40
    ramp_epochs: int = 20
    epochs_per_level: int = 1
    steps_per_epoch: int = 150
    lam_sup: float = 1.0
    lam_max: float = 0.1
    lam_reg: float = 1e-5
    val_fraction: float = 0.1
    val_max_snapshots: int = 32
    finetune_fraction: float = 0.25
    finetune_epochs: int = 24
    # Observability levels probed to pick the returned weights. The descent
    # specialises the live weights toward whatever level it is currently on,
    # so the last epoch is rarely the best model overall; the checkpoint is
    # the snapshot with the lowest mean validation RMSE across these probes.
    # The probes span the deployment range; 1% is excluded because weights
    # specialised to a near-blind grid anti-correlate with every other level.
    select_levels: tuple = (5.0, 10.0, 20.0, 40.0, 60.0, 80.0)

    def __post_init__(self):
        if not self.levels:
            raise ValueError("curriculum needs at least one level")
        if any(not 0 < p < 100 for p in self.levels):
            raise ValueError("observability levels must lie in (0, 100)")
        if any(not 0 < p < 100 for p in self.select_levels):
            raise ValueError("selection levels must lie in (0, 100)")
        if self.plateau_window < 1:
            raise ValueError("plateau window must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if not 0 < self.finetune_fraction <= 1:
            raise ValueError("finetune_fraction must lie in (0, 1]")
        if min(self.lam_sup, self.lam_max, self.lam_reg) < 0:
            raise ValueError("loss weights must be non-negative")
        if min(self.lr_warmup, self.lr_curriculum, self.lr_finetune) <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    p_obs: float
    lam_phys: float
    lr: float
    train_total: float
    train_sup: float
    train_phys: float
    val_sup: float
    val_rmse: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochRecord]
    aborted: bool = False
    selected_epochs: tuple = ()


HISTORY_COLUMNS = ("epoch", "stage", "p_obs", "lam_phys", "lr", "train_total",
                   "train_sup", "train_phys", "val_sup", "val_rmse")


def history_to_csv(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for r in history:
            writer.writerow([r.epoch, r.stage, f"{r.p_obs:g}",
                             f"{r.lam_phys:.6g}", f"{r.lr:.6g}",
                             f"{r.train_total:.8f}", f"{r.train_sup:.8f}",
                             f"{r.train_phys:.8f}", f"{r.val_sup:.8f}",
                             f"{r.val_rmse:.8f}"])


def plateau(losses, window: int, eps: float) -> bool:
    """True when the last ``window`` losses improved by less than ``eps``
    in relative terms."""
    if len(losses) < window:
        return False
    recent = losses[-window:]
    first = max(recent[0], 1e-12)
    return (recent[0] - recent[-1]) / first < eps


class Adam:
    """Adaptive-moment optimizer over an explicit trainable tensor list."""

    def __init__(self, tensors, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.tensors = [t for t in tensors]
        for t in self.tensors:
            if not t.requires_grad:
                raise ValueError(
                    f"frozen tensor {t.name!r} handed to the optimizer")
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(t.values) for t in self.tensors]
        self.v = [np.zeros_like(t.values) for t in self.tensors]
        self.t = 0

    def zero_grad(self) -> None:
        for t in self.tensors:
            t.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for i, t in enumerate(self.tensors):
            if t.grad is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * t.grad
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * t.grad ** 2
            step = self.lr * (self.m[i] / b1c) / (np.sqrt(self.v[i] / b2c)
                                                  + self.eps)
            t.values = t.values - step


# -- data plumbing ------------------------------------------------------------


def _split_views(dataset: SnapshotDataset, config: TrainConfig):
    n = dataset.n_snapshots
    if n == 0:
        raise ValueError("dataset has no snapshots")
    n_val = max(1, int(round(n * config.val_fraction)))
    if n_val >= n:
        raise ValueError("dataset too small for the validation split")
    train_views = [dataset.snapshot(i) for i in range(n - n_val)]
    val_idx = np.linspace(n - n_val, n - 1,
                          min(n_val, config.val_max_snapshots)).astype(int)
    val_views = [dataset.snapshot(int(i)) for i in np.unique(val_idx)]
    return train_views, val_views


def _val_batch(val_views, p_obs, seed, feeder_rows):
    n_nodes = len(val_views[0].v_true)
    mask = net.sample_observed_mask(n_nodes, p_obs,
                                    _rng(seed, "val-mask", p_obs),
                                    hub_indices=net.hub_rows(
                                        val_views[0].node_features))
    items = [item_from_view(v, mask) for v in val_views]
    return build_batch(items, feeder_rows), mask


def _val_metrics(params, batch) -> tuple[float, float]:
    with ad.no_grad():
        v_hat = forward(params, batch).values
    hidden = ~batch.observed
    err = v_hat - batch.v_true
    sup = float(np.mean(np.abs(err[hidden])))
    return sup, _rmse(v_hat, batch.v_true, hidden)


# -- the loop -------------------------------------------------------------------


class _Trainer:
    def __init__(self, params, train_views, val_views, config):
        self.params = params
        self.train_views = train_views
        self.val_views = val_views
        self.config = config
        self.history: list[EpochRecord] = []
        self.epoch = 0
        self.last_good = self._snapshot_tensors()
        self.aborted = False
        self.selected_epoch = -1
        self._best_score = np.inf
        self._best_tensors = None
        self._probes = [_val_batch(val_views, p, config.seed,
                                   params.feeder_rows)[0]
                        for p in config.select_levels]

    def _snapshot_tensors(self):
        return {k: t.values.copy() for k, t in self.params.tensors.items()}

    def _restore_last_good(self):
        for k, t in self.params.tensors.items():
            if k in self.last_good:
                t.values = self.last_good[k].copy()

    def _consider_select(self) -> None:
        score = float(np.mean([_val_metrics(self.params, b)[1]
                               for b in self._probes]))
        if score < self._best_score:
            self._best_score = score
            self._best_tensors = self._snapshot_tensors()
            self.selected_epoch = self.epoch - 1

    def _restore_selected(self) -> None:
        if self._best_tensors is not None:
            for k, t in self.params.tensors.items():
                t.values = self._best_tensors[k].copy()

    def run_epoch(self, stage: str, p_obs: float, lam_phys: float,
                  optimizer: Adam, val_batch) -> EpochRecord:
        cfg = self.config
        weights = LossWeights.with_physics(lam_phys, lam_sup=cfg.lam_sup,
                                           lam_reg=cfg.lam_reg)
        n_nodes = len(self.train_views[0].v_true)
        mask = net.sample_observed_mask(
            n_nodes, p_obs, _rng(cfg.seed, "mask", stage, self.epoch),
            hub_indices=net.hub_rows(self.train_views[0].node_features))
        order_gen = _rng(cfg.seed, "order", stage, self.epoch)
        order = order_gen.permutation(len(self.train_views))
        order = order[:min(cfg.steps_per_epoch, len(order))]
        totals = np.zeros(3)
        for idx in order:
            item = item_from_view(self.train_views[idx], mask)
            batch = build_batch([item], self.params.feeder_rows)
            optimizer.zero_grad()
            with ad.Tape():
                loss, parts = batch_loss(self.params, batch, weights)
                ad.backward(loss)
            optimizer.step()
            totals += (parts["total"], parts["supervised"], parts["physics"])
        totals /= max(len(order), 1)
        val_sup, val_rmse = _val_metrics(self.params, val_batch)
        record = EpochRecord(
            epoch=self.epoch, stage=stage, p_obs=p_obs, lam_phys=lam_phys,
            lr=optimizer.lr, train_total=totals[0], train_sup=totals[1],
            train_phys=totals[2], val_sup=val_sup, val_rmse=val_rmse)
        self.history.append(record)
        self.epoch += 1
        self.last_good = self._snapshot_tensors()
        return record

    def train_substation(self) -> None:
        cfg = self.config
        trainable = self.params.trainable(
            [n for n in self.params.tensors
             if self.params.tensors[n].requires_grad])
        optimizer = Adam(trainable, lr=cfg.lr_warmup)
        val_batch, _ = _val_batch(self.val_views, cfg.warmup_p_obs, cfg.seed,
                                  self.params.feeder_rows)
        try:
            # stage 1: supervision only, high observability, until plateau
            stage_losses: list[float] = []
            for _ in range(cfg.max_warmup_epochs):
                rec = self.run_epoch("warmup", cfg.warmup_p_obs, 0.0,
                                     optimizer, val_batch)
                stage_losses.append(rec.val_sup)
                if plateau(stage_losses, cfg.plateau_window, cfg.plateau_eps):
                    break
            # stage 2: physics weight ramps in
            optimizer.lr = cfg.lr_curriculum
            for e in range(1, cfg.ramp_epochs + 1):
                lam = physics_ramp(e, cfg.ramp_epochs, cfg.lam_max)
                self.run_epoch("ramp", cfg.warmup_p_obs, lam, optimizer,
                               val_batch)
                self._consider_select()
            # stage 3: observability descends
            for level in cfg.levels:
                level_batch, _ = _val_batch(self.val_views, level, cfg.seed,
                                            self.params.feeder_rows)
                for _ in range(cfg.epochs_per_level):
                    self.run_epoch("curriculum", level, cfg.lam_max,
                                   optimizer, level_batch)
                    self._consider_select()
            self._restore_selected()
        except ad.NonFiniteError:
            self._restore_last_good()
            self.aborted = True

    def finetune_substation(self) -> None:
        cfg = self.config
        head = [self.params.tensors[n] for n in self.params.head_names()]
        optimizer = Adam(head, lr=cfg.lr_finetune)
        levels = tuple(cfg.levels)
        val_batch, _ = _val_batch(self.val_views, 40.0, cfg.seed,
                                  self.params.feeder_rows)
        try:
            for e in range(cfg.finetune_epochs):
                level = levels[e % len(levels)]
                self.run_epoch("finetune", level, cfg.lam_max, optimizer,
                               val_batch)
                self._consider_select()
            self._restore_selected()
        except ad.NonFiniteError:
            self._restore_last_good()
            self.aborted = True


def train(datasets, config: TrainConfig,
          model_config: ModelConfig | None = None) -> TrainResult:
    """Run the full curriculum over one or more substation datasets.

    Datasets are visited sequentially in the given order with parameters
    carried over; per-feeder gates exist for every feeder seen in any of
    them.
    """
    if isinstance(datasets, SnapshotDataset):
        datasets = [datasets]
    if not datasets:
        raise ValueError("no datasets given")
    feeders = sorted({f for d in datasets for f in d.feeder_ids})
    params = ModelParams.create(model_config or ModelConfig(), feeders,
                                seed=config.seed)
    history: list[EpochRecord] = []
    aborted = False
    selected: list[int] = []
    for dataset in datasets:
        train_views, val_views = _split_views(dataset, config)
        trainer = _Trainer(params, train_views, val_views, config)
        trainer.epoch = len(history)
        trainer.train_substation()
        history.extend(trainer.history)
        selected.append(trainer.selected_epoch)
        if trainer.aborted:
            aborted = True
            break
    return TrainResult(params=params, history=history, aborted=aborted,
                       selected_epochs=tuple(selected))


def finetune(params: ModelParams, dataset: SnapshotDataset,
             config: TrainConfig,
             n_pretrain: int | None = None) -> TrainResult:
    """Adapt a pretrained model to a new substation, training the head only.

    ``n_pretrain`` is the snapshot count of the pretraining dataset; the
    target dataset is truncated to ``finetune_fraction`` of it (defaulting
    to the target's own size when not given). The backbone is frozen in
    place: its tensors are excluded from the optimizer and marked
    non-differentiable, so their values and gradients stay untouched.
    """
    reference = n_pretrain if n_pretrain is not None else dataset.n_snapshots
    n_keep = int(round(config.finetune_fraction * reference))
    n_keep = min(max(n_keep, 8), dataset.n_snapshots)
    truncated = dataset.subset(n_keep)

    for name in params.backbone_names():
        params.tensors[name].requires_grad = False
    params.replace_eta(list(truncated.feeder_ids))

    train_views, val_views = _split_views(truncated, config)
    trainer = _Trainer(params, train_views, val_views, config)
    trainer.finetune_substation()
    return TrainResult(params=params, history=trainer.history,
                       aborted=trainer.aborted,
                       selected_epochs=(trainer.selected_epoch,))
