"""Sequential training over tasks, the NMSE matrix, forgetting and memory metrics.

One training step on a mini-batch ``(X, H)``:

    task   = NMSE(H, f_theta(X))
    reg    = EWC or SI penalty (0 for naive)
    theta <- theta - eta * (grad task + grad reg)
    SI only: omega_tilde += (grad task)**2 * eta

At the end of each task EWC computes the Fisher diagonal on the task's
training set and appends ``(theta, F)`` to its bank; SI folds the accumulated
work into ``omega`` and re-anchors.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .channel import CLEAN, build_task_dataset, with_input_noise
from .predictors import (
    dataset_nmse,
    flatten_grads,
    flatten_params,
    nmse_loss,
    predict,
    predictor_for,
    unflatten_params,
)
from .regularizers import (
    EwcBank,
    SiState,
    compute_fisher_diag,
    ewc_consolidate,
    ewc_penalty,
    ewc_penalty_grad,
    ewc_register_task,
    si_accumulate,
    si_end_task,
    si_penalty,
    si_penalty_grad,
)

log = logging.getLogger(__name__)

REGIMENS = ("naive", "ewc", "si")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or parameter."""

    def __init__(self, message, step=None, task_loss=None, reg_loss=None):
        super().__init__(message)
        self.step = step
        self.task_loss = task_loss
        self.reg_loss = reg_loss


@dataclass
class TrainConfig:
    regimen: str = "naive"
    backbone: str = "gru"
    hidden_size: int = 32
    epochs: int = 30
    batch_size: int = 32
    eta: float = 1e-2
    alpha: float = 0.5
    beta: float = 0.5
    xi: float = 1e-4
    seed: int = 0
    snr_db_train: float | None = None  # None: use each scenario's own value
    consolidate: bool = False

    def __post_init__(self):
        if self.regimen not in REGIMENS:
            raise ValueError(f"regimen must be one of {REGIMENS}, got {self.regimen!r}")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.epochs < 1 or self.batch_size < 1 or self.hidden_size < 1:
            raise ValueError("epochs, batch_size and hidden_size must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if not self.xi > 0:
            raise ValueError("xi must be > 0")


def make_regimen_state(cfg, p):
    if cfg.regimen == "ewc":
        return EwcBank(p.n_params, cfg.alpha)
    if cfg.regimen == "si":
        return SiState.start(flatten_params(p), cfg.beta, cfg.xi)
    return None


def _reg_terms(state, theta):
    if isinstance(state, EwcBank):
        if not state.entries:
            return 0.0, None
        return ewc_penalty(theta, state), ewc_penalty_grad(theta, state)
    if isinstance(state, SiState):
        return si_penalty(theta, state), si_penalty_grad(theta, state)
    return 0.0, None


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # dicts: epoch, task_loss, reg_loss, grad_norm
    steps: int = 0
    grads: list | None = None  # per-step task gradients when requested


def _order_rng(seed, task_index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), 7, int(task_index)]))


def _sgd_epochs(p, ds, state, cfg, task_index, rng, out):
    n = len(ds)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            theta = flatten_params(p)
            p.zero_grad()
            try:
                with tc.Tape() as tape:
                    loss = nmse_loss(ds.H[idx], predict(p, ds.X[idx]))
                tape.backward(loss)
            except tc.NonFiniteError as exc:
                raise DivergenceError(f"task {task_index} step {step}: {exc}", step=step) from exc
            task_loss = loss.item()
            g_task = flatten_grads(p)
            reg_loss, g_reg = _reg_terms(state, theta)
            g = g_task if g_reg is None else g_task + g_reg
            new_theta = theta - cfg.eta * g
            if not (math.isfinite(task_loss + reg_loss) and np.isfinite(new_theta).all()):
                raise DivergenceError(
                    f"task {task_index} step {step}: non-finite update "
                    f"(task loss {task_loss}, reg loss {reg_loss})",
                    step=step,
                    task_loss=task_loss,
                    reg_loss=reg_loss,
                )
            unflatten_params(p, new_theta)
            if isinstance(state, SiState):
                si_accumulate(state, g_task, cfg.eta)
            if out.grads is not None:
                out.grads.append(g_task)
            sums += (task_loss, reg_loss, float(np.sqrt(g @ g)))
            batches += 1
            step += 1
        task_l, reg_l, gnorm = sums / batches
        out.epochs.append({"epoch": epoch, "task_loss": task_l, "reg_loss": reg_l, "grad_norm": gnorm})
        log.debug("task %d epoch %d: task %.4g reg %.4g |g| %.4g", task_index, epoch, task_l, reg_l, gnorm)
    out.steps = step


def train_task(p, ds, state, cfg, task_index=0, record_grads=False):
    """Train ``p`` in place on one task, then run the regimen's end-of-task hook."""
    expected = {"naive": type(None), "ewc": EwcBank, "si": SiState}[cfg.regimen]
    if not isinstance(state, expected):
        raise TypeError(f"regimen {cfg.regimen!r} needs {expected.__name__}, got {type(state).__name__}")
    n = len(ds)
    if n == 0:
        raise ValueError("empty training set")
    rng = _order_rng(cfg.seed, task_index)
    out = TrainLog(grads=[] if record_grads else None)
    with np.errstate(over="ignore", invalid="ignore"):  # overflow surfaces as DivergenceError
        _sgd_epochs(p, ds, state, cfg, task_index, rng, out)
    p.zero_grad()

    if isinstance(state, EwcBank):
        ewc_register_task(state, flatten_params(p), compute_fisher_diag(p, ds))
        if cfg.consolidate:
            state.entries = ewc_consolidate(state).entries
    elif isinstance(state, SiState):
        si_end_task(state, flatten_params(p))
    return out


# task sequences --------------------------------------------------------------


@dataclass
class TaskSplit:
    train: object  # TaskDataset, noisy inputs
    heldout: object  # TaskDataset, noisy inputs, disjoint seed


def derive_seed(*parts):
    return int(np.random.SeedSequence([int(x) for x in parts]).generate_state(1)[0])


def make_task_sequence(scenarios, n_train=512, n_heldout=500, window=8, seed=0, snr_db=None):
    """Train/held-out splits per scenario; inputs carry AWGN at the training SNR."""
    splits = []
    for k, sc in enumerate(scenarios):
        snr = sc.snr_db_train if snr_db is None else snr_db
        train = build_task_dataset(sc, n_train, window, derive_seed(seed, k, 0))
        held = build_task_dataset(sc, n_heldout, window, derive_seed(seed, k, 1))
        splits.append(
            TaskSplit(
                with_input_noise(train, snr, derive_seed(seed, k, 2)),
                with_input_noise(held, snr, derive_seed(seed, k, 3)),
            )
        )
    return splits


@dataclass
class EvalMatrix:
    """``values[after, eval]``: NMSE on task ``eval`` after training task ``after``.

    Entries above the diagonal are NaN. Task indices are 0-based here.
    """

    values: np.ndarray

    @classmethod
    def empty(cls, k):
        return cls(np.full((k, k), np.nan))

    @property
    def n_tasks(self):
        return self.values.shape[0]

    def nmse(self, eval_task, after_task):
        return float(self.values[after_task, eval_task])

    @property
    def db(self):
        return 10.0 * np.log10(self.values)

    def records(self):
        """``(eval_task, after_task, nmse)`` for the lower triangle, after-major."""
        k = self.n_tasks
        return [(j, a, float(self.values[a, j])) for a in range(k) for j in range(a + 1)]


@dataclass
class SequenceResult:
    matrix: EvalMatrix
    state: object
    predictor: object
    logs: list


def run_sequence(tasks, cfg, heldout=None, predictor=None, on_task_end=None):
    """Train on ``tasks`` in order and fill the lower-triangular NMSE matrix.

    ``tasks`` is a list of TaskSplit, or of TaskDataset with ``heldout`` given
    separately. ``on_task_end(k, predictor, state)`` runs after each task.
    """
    if tasks and isinstance(tasks[0], TaskSplit):
        heldout = [t.heldout for t in tasks]
        tasks = [t.train for t in tasks]
    if heldout is None or len(heldout) != len(tasks):
        raise ValueError("one held-out set per task is required")
    if not tasks:
        raise ValueError("no tasks")
    p = predictor
    if p is None:
        p = predictor_for(tasks[0].scenario, cfg.backbone, cfg.hidden_size, tasks[0].window, cfg.seed)
    state = make_regimen_state(cfg, p)
    m = EvalMatrix.empty(len(tasks))
    logs = []
    for k, ds in enumerate(tasks):
        logs.append(train_task(p, ds, state, cfg, task_index=k))
        for j in range(k + 1):
            m.values[k, j] = dataset_nmse(p, heldout[j])
        if on_task_end is not None:
            on_task_end(k, p, state)
    return SequenceResult(m, state, p, logs)


@dataclass
class Forgetting:
    absolute: np.ndarray  # per past task
    relative: np.ndarray
    db: np.ndarray

    @property
    def mean_absolute(self):
        return float(np.mean(self.absolute))

    @property
    def mean_relative(self):
        return float(np.mean(self.relative))

    @property
    def mean_db(self):
        return float(np.mean(self.db))


def forgetting_metrics(m):
    """Increase of each past task's NMSE between its own training and the end.

    Negative values (backward transfer) are kept as they are.
    """
    k = m.n_tasks
    if k < 2:
        raise ValueError("forgetting needs at least two tasks")
    v = m.values
    own = np.array([v[j, j] for j in range(k - 1)])
    final = v[k - 1, : k - 1]
    absolute = final - own
    return Forgetting(absolute, absolute / own, 10.0 * np.log10(final) - 10.0 * np.log10(own))


def evaluate_nmse_vs_snr(p, scenario, snr_list, n_eval=1000, seed=0, window=8):
    """``[(snr_db, nmse_db)]`` with noisy inputs and clean targets.

    One noise draw is reused and rescaled across the SNR points.
    """
    if not snr_list:
        raise ValueError("snr_list is empty")
    if n_eval < 100:
        raise ValueError("n_eval must be >= 100")
    clean = build_task_dataset(scenario, n_eval, window, derive_seed(seed, 99, 0))
    noise_seed = derive_seed(seed, 99, 1)
    curve = []
    for snr in snr_list:
        ds = clean if snr == CLEAN else with_input_noise(clean, snr, noise_seed)
        curve.append((float(snr), 10.0 * math.log10(dataset_nmse(p, ds))))
    return curve


def memory_accounting(state, n_params):
    """Floats held by the model and by the regimen.

    ``transient`` counts the EWC Fisher pass buffers (accumulator and one
    per-sample gradient); they are released after the pass.
    """
    if state is None:
        extra, transient = 0, 0
    elif isinstance(state, EwcBank):
        extra, transient = state.stored_floats(), 2 * n_params
    elif isinstance(state, SiState):
        extra, transient = state.stored_floats(), 0
    else:
        raise TypeError(f"unknown regimen state {type(state).__name__}")
    return {"model": int(n_params), "regimen_extra": int(extra), "transient": int(transient)}


def final_new_task_nmse(m):
    k = m.n_tasks - 1
    return m.nmse(k, k)


__all__ = [
    "REGIMENS",
    "DivergenceError",
    "EvalMatrix",
    "Forgetting",
    "SequenceResult",
    "TaskSplit",
    "TrainConfig",
    "TrainLog",
    "derive_seed",
    "evaluate_nmse_vs_snr",
    "final_new_task_nmse",
    "forgetting_metrics",
    "make_regimen_state",
    "make_task_sequence",
    "memory_accounting",
    "run_sequence",
    "train_task",
]
