"""EWC and SI regularizers over the flat parameter vector.

Both penalties are weighted squared distances to anchor vectors:

* EWC keeps one ``(theta_star, fisher)`` pair per finished task and charges
  ``alpha/2 * sum_j sum_i F[j,i] (theta_i - theta_star[j,i])**2``.
* SI keeps a single consolidated importance ``omega`` around ``theta_ref``
  and charges ``beta/2 * sum_i omega_i (theta_i - theta_ref_i)**2``. During a
  task it accumulates ``omega_tilde += grad**2 * eta`` from the task-loss
  gradient; at the task end that work is divided by the squared
  displacement plus ``xi`` and folded into ``omega``.

Penalties accept a plain array (returns a float) or a 1-D Tensor (returns a
taped scalar), so they can sit inside a recorded loss or be evaluated alone.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as tc
from .channel import read_blob, write_blob
from .predictors import flatten_grads, nmse_loss, predict


def _vec(v, n, what):
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if n is not None and v.size != n:
        raise ValueError(f"{what} has length {v.size}, expected {n}")
    return v


def _penalty(theta, anchors, weights, coef):
    if isinstance(theta, tc.Tensor):
        return tc.quad_penalty(theta, anchors, weights, coef)
    value, _ = kernels.active.quad_penalty(np.asarray(theta, dtype=np.float64), anchors, weights, float(coef))
    return value


# EWC -----------------------------------------------------------------------


@dataclass
class EwcBank:
    n_params: int
    alpha: float = 0.5
    entries: list = field(default_factory=list)  # [(theta_star, fisher)]

    def __len__(self):
        return len(self.entries)

    def stacked(self):
        anchors = np.stack([a for a, _ in self.entries])
        weights = np.stack([f for _, f in self.entries])
        return anchors, weights

    def stored_floats(self):
        return sum(a.size + f.size for a, f in self.entries)


def compute_fisher_diag(p, ds):
    """Mean over samples of the squared per-sample NMSE gradient (batch size 1)."""
    if len(ds) == 0:
        raise ValueError("cannot compute Fisher information on an empty dataset")
    fisher = np.zeros(p.n_params)
    for i in range(len(ds)):
        p.zero_grad()
        with tc.Tape() as tape:
            loss = nmse_loss(ds.H[i : i + 1], predict(p, ds.X[i : i + 1]))
        tape.backward(loss)
        g = flatten_grads(p)
        fisher += g * g
    p.zero_grad()
    return fisher / len(ds)


def ewc_penalty(theta, bank):
    if not isinstance(theta, tc.Tensor):
        theta = np.asarray(theta, dtype=np.float64)
    if not bank.entries:
        return tc.mul(tc.tsum(theta), 0.0) if isinstance(theta, tc.Tensor) else 0.0
    n = theta.shape[0]
    if n != bank.n_params:
        raise ValueError(f"theta has length {n}, bank holds M = {bank.n_params}")
    anchors, weights = bank.stacked()
    return _penalty(theta, anchors, weights, bank.alpha)


def ewc_penalty_grad(theta, bank):
    theta = _vec(theta, bank.n_params, "theta")
    if not bank.entries:
        return np.zeros_like(theta)
    anchors, weights = bank.stacked()
    return kernels.active.quad_penalty(theta, anchors, weights, float(bank.alpha))[1]


def ewc_register_task(bank, theta_star, fisher):
    theta_star = _vec(theta_star, bank.n_params, "theta_star").copy()
    fisher = _vec(fisher, bank.n_params, "fisher").copy()
    if np.any(fisher < 0):
        raise ValueError("Fisher diagonal has negative entries")
    bank.entries.append((theta_star, fisher))


def ewc_consolidate(bank):
    """Collapse the bank to one entry: last anchor, summed Fisher."""
    if len(bank.entries) <= 1:
        return EwcBank(bank.n_params, bank.alpha, [(a.copy(), f.copy()) for a, f in bank.entries])
    fisher = np.sum([f for _, f in bank.entries], axis=0)
    return EwcBank(bank.n_params, bank.alpha, [(bank.entries[-1][0].copy(), fisher)])


# SI ------------------------------------------------------------------------


@dataclass
class SiState:
    omega: np.ndarray
    omega_tilde: np.ndarray
    theta_ref: np.ndarray
    beta: float = 0.5
    xi: float = 1e-4

    @classmethod
    def start(cls, theta, beta=0.5, xi=1e-4):
        """Fresh state anchored at ``theta`` with zero importance."""
        if not xi > 0:
            raise ValueError("xi must be > 0")
        theta = _vec(theta, None, "theta").copy()
        return cls(np.zeros_like(theta), np.zeros_like(theta), theta, float(beta), float(xi))

    @property
    def n_params(self):
        return self.theta_ref.size

    def stored_floats(self):
        return self.omega.size + self.omega_tilde.size + self.theta_ref.size


def si_accumulate(state, task_grad, eta):
    """``omega_tilde += task_grad**2 * eta`` (gradient of the task loss alone)."""
    if not eta > 0:
        raise ValueError("eta must be > 0")
    g = _vec(task_grad, state.n_params, "task_grad")
    state.omega_tilde += (g * g) * eta


def si_end_task(state, theta):
    """Fold the accumulated work into ``omega`` and re-anchor at ``theta``."""
    theta = _vec(theta, state.n_params, "theta")
    delta = theta - state.theta_ref
    state.omega += state.omega_tilde / (delta * delta + state.xi)
    state.omega_tilde[:] = 0.0
    state.theta_ref = theta.copy()


def si_penalty(theta, state):
    if not isinstance(theta, tc.Tensor):
        theta = np.asarray(theta, dtype=np.float64)
    n = theta.shape[0]
    if n != state.n_params:
        raise ValueError(f"theta has length {n}, SI state holds M = {state.n_params}")
    return _penalty(theta, state.theta_ref[None, :], state.omega[None, :], state.beta)


def si_penalty_grad(theta, state):
    theta = _vec(theta, state.n_params, "theta")
    return kernels.active.quad_penalty(theta, state.theta_ref[None, :], state.omega[None, :], state.beta)[1]


# serialization ---------------------------------------------------------------
#
#   line 1: b"CLCHAN-REGIMEN 1\n"
#   line 2: JSON header
#       ewc: {kind: "ewc", n_params, alpha, n_entries}
#            payload: per entry theta_star then fisher
#       si:  {kind: "si", n_params, beta, xi}
#            payload: omega, omega_tilde, theta_ref
#   all vectors little-endian float64 of length n_params

REGIMEN_MAGIC = "CLCHAN-REGIMEN 1"


def save_regimen_state(state, path):
    if isinstance(state, EwcBank):
        header = {"kind": "ewc", "n_params": state.n_params, "alpha": state.alpha, "n_entries": len(state)}
        arrays = [v for entry in state.entries for v in entry]
    elif isinstance(state, SiState):
        header = {"kind": "si", "n_params": state.n_params, "beta": state.beta, "xi": state.xi}
        arrays = [state.omega, state.omega_tilde, state.theta_ref]
    else:
        raise TypeError(f"no serialization for {type(state).__name__}")
    write_blob(path, REGIMEN_MAGIC, header, arrays)


def load_regimen_state(path):
    header, payload = read_blob(path, REGIMEN_MAGIC)
    n = header["n_params"]
    if header["kind"] == "ewc":
        k = header["n_entries"]
        if payload.size != 2 * n * k:
            raise ValueError(f"{path}: expected {2 * n * k} values, found {payload.size}")
        vecs = payload.reshape(2 * k, n) if k else payload.reshape(0, n)
        entries = [(vecs[2 * j].copy(), vecs[2 * j + 1].copy()) for j in range(k)]
        return EwcBank(n, header["alpha"], entries)
    if header["kind"] == "si":
        if payload.size != 3 * n:
            raise ValueError(f"{path}: expected {3 * n} values, found {payload.size}")
        omega, omega_tilde, theta_ref = (v.copy() for v in payload.reshape(3, n))
        return SiState(omega, omega_tilde, theta_ref, header["beta"], header["xi"])
    raise ValueError(f"{path}: unknown regimen kind {header['kind']!r}")
