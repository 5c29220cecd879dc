"""Training loops: multi-task classifier pretraining and denoiser training.

Both loops step Adam once per file (batch size 1) and draw all randomness
from per-epoch streams derived from (seed, epoch), so a run can be resumed
at any epoch boundary and continue bit-for-bit.  Classifier pretraining
alternates strictly between tasks within an epoch; denoiser training
presents whole files in a fresh random order each epoch.

The feature-loss variant keeps the loss network frozen and balances its
per-layer terms once: the weights start at 1, the term magnitudes are
averaged over the calibration epoch, and from the next epoch on the weights
are fixed at the inverse relative magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import denoiser as dn
from . import featnet as fn
from . import ndgrad as ng
from .audio import read_wav
from .corpus import CROP_MIN_LEN, random_crop

LOSS_KINDS = ("feature", "l1", "l2")


@dataclass
class TrainConfig:
    epochs: int
    learning_rate: float = 1e-4
    seed: int = 0
    loss_kind: str = "feature"
    feature_depth: int = 6          # loss layers M
    calibration_epoch: int = 10
    checkpoint_every: int = 0       # 0 = final checkpoint only

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if not 1 <= self.feature_depth <= 14:
            raise ValueError("feature_depth must be in 1..14")
        if self.calibration_epoch < 1:
            raise ValueError("calibration_epoch must be >= 1")


def _load(source) -> np.ndarray:
    """Accept a path or an in-memory array as audio source."""
    if isinstance(source, np.ndarray):
        return source.astype(np.float32, copy=False)
    return read_wav(source).samples.astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# iteration scheduling


def epoch_schedule(sizes, rng: np.random.Generator) -> list[tuple[int, int]]:
    """(task, file index) pairs for one epoch of strictly alternating tasks.

    Every file of the largest task appears exactly once; smaller tasks are
    padded to that size by uniformly random re-draws (whole extra passes
    first, then a without-replacement remainder, so no file is drawn a third
    time before every file was drawn twice).  Length is n_tasks * max(sizes).
    With a single task the schedule is just that task's permutation.
    """
    sizes = [int(s) for s in sizes]
    if not sizes:
        raise ValueError("no tasks to schedule")
    if any(s < 1 for s in sizes):
        raise ValueError(f"every task needs at least one file, got sizes {sizes}")
    target = max(sizes)
    per_task = []
    for n in sizes:
        order = rng.permutation(n)
        deficit = target - n
        extras = []
        while deficit >= n:
            extras.append(rng.permutation(n))
            deficit -= n
        if deficit > 0:
            extras.append(rng.choice(n, size=deficit, replace=False))
        if extras:
            order = rng.permutation(np.concatenate([order, *extras]))
        per_task.append(order)
    schedule = []
    for i in range(target):
        for t in range(len(sizes)):
            schedule.append((t, int(per_task[t][i])))
    return schedule


# ---------------------------------------------------------------------------
# classifier pretraining


@dataclass
class ClassifierFile:
    source: object                  # path or np.ndarray
    labels: np.ndarray              # {0,1} vector of length n_classes


@dataclass
class ClassifierTask:
    spec: fn.TaskSpec
    files: list[ClassifierFile]


@dataclass
class EpochTaskStats:
    epoch: int
    task: str
    mean_loss: float
    accuracy: float


def _accuracy(logits: np.ndarray, target: np.ndarray, mode: str) -> float:
    z = logits.reshape(-1)
    if mode == "softmax":
        return float(np.argmax(z) == np.argmax(target))
    probs = 1.0 / (1.0 + np.exp(-z))
    return float(np.mean((probs > 0.5) == (target > 0.5)))


def train_classifier(tasks: list[ClassifierTask], cfg: TrainConfig,
                     net_config: fn.FeatureNetConfig = fn.FeatureNetConfig(),
                     params: fn.FeatureNetParams | None = None,
                     opt: ng.Adam | None = None,
                     start_epoch: int = 1,
                     on_epoch=None) -> tuple[fn.FeatureNetParams, list[EpochTaskStats]]:
    """Joint multi-task training of the feature network, one Adam step per
    file, random crops of minimal duration 2^15 samples as augmentation.

    Pass ``params``/``opt``/``start_epoch`` to resume from a checkpoint; the
    continuation consumes the same random streams the uninterrupted run
    would.  ``on_epoch(epoch, params, opt)`` fires after each epoch.
    """
    if not tasks:
        raise ValueError("need at least one task")
    for task in tasks:
        if not task.files:
            raise ValueError(f"task {task.spec.name!r} has no files")
        for f in task.files:
            if len(f.labels) != task.spec.n_classes:
                raise ValueError(
                    f"task {task.spec.name!r}: label vector of size "
                    f"{len(f.labels)} vs {task.spec.n_classes} classes")
    if params is None:
        params = fn.featnet_init([t.spec for t in tasks],
                                 ng.derive_rng(cfg.seed, 0), net_config)
    if opt is None:
        opt = ng.Adam(params.trainable(), lr=cfg.learning_rate,
                      names=[n for n, _ in params.named_parameters()])

    log: list[EpochTaskStats] = []
    for epoch in range(start_epoch, cfg.epochs + 1):
        rng = ng.derive_rng(cfg.seed, 1, epoch)
        schedule = epoch_schedule([len(t.files) for t in tasks], rng)
        sums = np.zeros(len(tasks))
        hits = np.zeros(len(tasks))
        counts = np.zeros(len(tasks))
        for ti, fi in schedule:
            task = tasks[ti]
            file = task.files[fi]
            wav = _load(file.source)
            crop = random_crop(wav, CROP_MIN_LEN, rng)
            logits = fn.task_logits(crop, params, ti, mode="train")
            loss = ng.classify_loss(logits, file.labels, task.spec.mode)
            val = float(loss.data)
            if not np.isfinite(val):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, task {task.spec.name!r}, "
                    f"file {fi}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums[ti] += val
            hits[ti] += _accuracy(logits.data, file.labels, task.spec.mode)
            counts[ti] += 1
        for ti, task in enumerate(tasks):
            log.append(EpochTaskStats(epoch, task.spec.name,
                                      sums[ti] / counts[ti],
                                      hits[ti] / counts[ti]))
        if on_epoch is not None:
            on_epoch(epoch, params, opt)
    return params, log


# ---------------------------------------------------------------------------
# denoiser training


@dataclass
class DenoisePair:
    id: str
    noisy: object                   # path or np.ndarray
    clean: object


@dataclass
class IterationRow:
    epoch: int
    iteration: int
    loss: float
    terms: tuple[float, ...] = ()


@dataclass
class DenoiserTrainResult:
    params: dn.DenoiserParams
    weights: fn.LossWeights | None
    rows: list[IterationRow]
    events: list[str]


def train_denoiser(pairs: list[DenoisePair], cfg: TrainConfig,
                   featnet_params: fn.FeatureNetParams | None = None,
                   net_config: dn.DenoiserConfig = dn.DenoiserConfig(),
                   params: dn.DenoiserParams | None = None,
                   opt: ng.Adam | None = None,
                   weights: fn.LossWeights | None = None,
                   start_epoch: int = 1,
                   log_path=None,
                   on_epoch=None) -> DenoiserTrainResult:
    """Train the denoiser on (noisy, clean) pairs, whole files, one Adam step
    per file.

    With the feature loss, the loss network stays frozen (its parameters are
    never touched) and the per-layer weights are calibrated once from the
    term magnitudes averaged over ``cfg.calibration_epoch``; before that the
    weights are all 1.  ``log_path`` appends one CSV row per iteration.
    """
    if not pairs:
        raise ValueError("no training pairs")
    if len({p.id for p in pairs}) != len(pairs):
        raise ValueError("pair ids must be unique")
    feature = cfg.loss_kind == "feature"
    if feature:
        if featnet_params is None:
            raise ValueError("feature loss requires a pretrained loss network")
        if cfg.feature_depth > featnet_params.config.n_layers:
            raise ValueError(
                f"feature_depth {cfg.feature_depth} exceeds loss network depth "
                f"{featnet_params.config.n_layers}")
        for st in featnet_params.bn[:cfg.feature_depth]:
            if not st.initialized:
                raise ValueError("loss network has no running statistics; "
                                 "train it (or load a trained checkpoint) first")
    if params is None:
        params = dn.denoiser_init(ng.derive_rng(cfg.seed, 0), net_config)
    if opt is None:
        opt = ng.Adam(params.trainable(), lr=cfg.learning_rate,
                      names=[n for n, _ in params.named_parameters()])
    if weights is None:
        weights = fn.LossWeights.ones(cfg.feature_depth) if feature else None

    log_fh = None
    if log_path is not None:
        new = not Path(log_path).exists()
        log_fh = open(log_path, "a")
        if new:
            cols = ["epoch", "iteration", "loss"]
            if feature:
                cols += [f"term_{m + 1}" for m in range(cfg.feature_depth)]
            log_fh.write(",".join(cols) + "\n")

    rows: list[IterationRow] = []
    events: list[str] = []
    clean_feats: dict[str, list[ng.Tensor]] = {}  # frozen net => reusable
    try:
        for epoch in range(start_epoch, cfg.epochs + 1):
            rng = ng.derive_rng(cfg.seed, 1, epoch)
            order = rng.permutation(len(pairs))
            calibrating = feature and not weights.calibrated \
                and epoch == cfg.calibration_epoch
            term_totals = np.zeros(cfg.feature_depth, dtype=np.float64)
            for it, idx in enumerate(order, start=1):
                pair = pairs[int(idx)]
                x = _load(pair.noisy)
                s = _load(pair.clean)
                if len(x) != len(s):
                    raise ValueError(
                        f"pair {pair.id!r}: noisy length {len(x)} != clean "
                        f"length {len(s)}")
                y = dn.denoiser_forward(x, params, mode="train")
                target = s.reshape(-1, 1)
                term_vals: tuple[float, ...] = ()
                if feature:
                    if pair.id not in clean_feats:
                        clean_feats[pair.id] = fn.feature_forward(
                            target, featnet_params, cfg.feature_depth,
                            mode="frozen")
                    fy = fn.feature_forward(y, featnet_params,
                                            cfg.feature_depth, mode="frozen")
                    terms = [ng.l1_loss(a, b)
                             for a, b in zip(clean_feats[pair.id], fy)]
                    loss = ng.weighted_sum(terms, weights.lambdas)
                    term_vals = tuple(float(t.data) for t in terms)
                elif cfg.loss_kind == "l1":
                    loss = ng.l1_loss(y, ng.as_tensor(target))
                else:
                    loss = ng.l2_loss(y, ng.as_tensor(target))
                val = float(loss.data)
                if not np.isfinite(val):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch} on pair {pair.id!r}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                if calibrating:
                    term_totals += np.asarray(term_vals, dtype=np.float64)
                row = IterationRow(epoch, it, val, term_vals)
                rows.append(row)
                if log_fh is not None:
                    cells = [str(epoch), str(it), repr(val)]
                    cells += [repr(t) for t in row.terms]
                    log_fh.write(",".join(cells) + "\n")
            if calibrating:
                weights = fn.calibrate_lambda(term_totals / len(pairs))
                events.append("lambda_calibrated epoch=%d values=%s"
                              % (epoch, np.array2string(weights.lambdas,
                                                        precision=6)))
            if on_epoch is not None:
                on_epoch(epoch, params, opt, weights)
    finally:
        if log_fh is not None:
            log_fh.close()
    return DenoiserTrainResult(params, weights, rows, events)
