"""Synthetic time-varying MIMO channels and continual-learning task datasets.

Each antenna pair carries an independent Jakes-style sum of sinusoids

    h(t) = P**-0.5 * sum_p a_p * exp(j * (2*pi*f_D*cos(phi_p)*t + psi_p))

with uniform ray angles ``phi_p`` and phases ``psi_p`` and log-normal ray
amplitudes normalised to ``E[a_p**2] == 1``. The antenna array is then
mixed with an exponential Kronecker correlation ``R[i, j] = rho**|i-j|`` on
both ends, which keeps unit per-element power. Averaged over rays the lag
correlation is ``J0(2*pi*f_D*lag)``.

Real/imag parts are kept on a leading size-2 axis wherever channels are
stored as real arrays.
"""

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

CLEAN = math.inf  # SNR sentinel: no noise added

# stream ids keep the RNG streams of different consumers disjoint
STREAM_SEQUENCE = 0
STREAM_DATASET = 1
STREAM_NOISE = 2


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    f_d: float
    sample_interval: float = 1e-3
    n_paths: int = 8
    n_tx: int = 2
    n_rx: int = 2
    spatial_corr: float = 0.0
    path_gain_spread: float = 3.0
    snr_db_train: float = 20.0

    def __post_init__(self):
        if not self.f_d >= 0:
            raise ValueError(f"f_d must be >= 0, got {self.f_d}")
        if not self.sample_interval > 0:
            raise ValueError(f"sample_interval must be > 0, got {self.sample_interval}")
        if self.n_paths < 1:
            raise ValueError(f"n_paths must be >= 1, got {self.n_paths}")
        if self.n_tx < 1 or self.n_rx < 1:
            raise ValueError("antenna counts must be >= 1")
        if not 0 <= self.spatial_corr < 1:
            raise ValueError(f"spatial_corr must be in [0, 1), got {self.spatial_corr}")
        if self.path_gain_spread < 0:
            raise ValueError("path_gain_spread must be >= 0")

    @property
    def frame_size(self):
        """Length of one flattened real frame, ``2 * n_tx * n_rx``."""
        return 2 * self.n_tx * self.n_rx

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


PRESETS = {
    "umi-compact": ScenarioConfig("umi-compact", f_d=30.0, n_paths=6, spatial_corr=0.3),
    "umi-dense": ScenarioConfig("umi-dense", f_d=100.0, n_paths=12, spatial_corr=0.6),
    "umi-standard": ScenarioConfig("umi-standard", f_d=60.0, n_paths=9, spatial_corr=0.45),
}


def preset(name, **overrides):
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown scenario preset {name!r} (known: {sorted(PRESETS)})") from None
    return cfg.replace(**overrides) if overrides else cfg


def _rng(seed, stream):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream)]))


# temporal correlation --------------------------------------------------------

_SERIES_LIMIT = 8.0


def _j0_series(x):
    # sum_k (-(x/2)^2)^k / (k!)^2
    q = -0.25 * x * x
    term = 1.0
    total = 1.0
    k = 0
    while True:
        k += 1
        term *= q / (k * k)
        total += term
        if abs(term) < 1e-17 and k > 2:
            return total


def _j0_asymptotic(x):
    # Hankel expansion; magnitudes c_k = prod_{m<=k} (2m-1)^2 / (k! (8x)^k),
    # summed until the terms stop shrinking.
    p = 1.0
    q = 0.0
    c = 1.0
    k = 0
    while True:
        k += 1
        nxt = c * (2 * k - 1) ** 2 / (k * 8.0 * x)
        if nxt >= c or nxt < 1e-18:
            break
        c = nxt
        sign = -1.0 if (k // 2 + k % 2) % 2 else 1.0
        if k % 2:
            q += sign * c
        else:
            p += sign * c
    w = x - 0.25 * math.pi
    return math.sqrt(2.0 / (math.pi * x)) * (p * math.cos(w) - q * math.sin(w))


def bessel_j0(x):
    """Zeroth-order Bessel function of the first kind (abs error < 1e-8)."""
    x = abs(float(x))
    return _j0_series(x) if x < _SERIES_LIMIT else _j0_asymptotic(x)


def temporal_correlation(f_d, dt):
    """Channel correlation ``J0(2 pi f_D dt)`` between snapshots ``dt`` seconds apart."""
    if f_d < 0 or dt < 0:
        raise ValueError("f_d and dt must be non-negative")
    return bessel_j0(2.0 * math.pi * f_d * dt)


# generation ----------------------------------------------------------------


def _corr_factor(n, rho):
    if rho == 0 or n == 1:
        return np.eye(n)
    idx = np.arange(n)
    return np.linalg.cholesky(rho ** np.abs(idx[:, None] - idx[None, :]))


def _generate(cfg, n_seq, n_steps, rng):
    """``n_seq`` independent complex sequences, shape ``[n_seq, n_steps, n_tx, n_rx]``."""
    n_pairs = cfg.n_tx * cfg.n_rx
    rows = n_seq * n_pairs
    P = cfg.n_paths
    phi = rng.uniform(0.0, 2.0 * math.pi, size=(rows, P))
    psi = rng.uniform(0.0, 2.0 * math.pi, size=(rows, P))
    log_gain = rng.normal(0.0, cfg.path_gain_spread, size=(rows, P))
    # E[10**(g/10)] for g ~ N(0, s^2) dB is exp((s ln10 / 10)^2 / 2)
    mean_power = math.exp(0.5 * (cfg.path_gain_spread * math.log(10.0) / 10.0) ** 2)
    amp = 10.0 ** (log_gain / 20.0) / math.sqrt(P * mean_power)
    omega = 2.0 * math.pi * cfg.f_d * np.cos(phi)
    t = np.arange(n_steps) * cfg.sample_interval
    re, im = kernels.active.sos_synthesize(omega, psi, amp, t)
    g = (re + 1j * im).reshape(n_seq, cfg.n_tx, cfg.n_rx, n_steps).transpose(0, 3, 1, 2)
    if cfg.spatial_corr > 0:
        a = _corr_factor(cfg.n_tx, cfg.spatial_corr)
        b = _corr_factor(cfg.n_rx, cfg.spatial_corr)
        g = np.einsum("ik,sjkl,ml->sjim", a, g, b)
    return np.ascontiguousarray(g)


def generate_channel_sequence(cfg, n_steps, seed):
    """One complex channel sequence ``[n_steps, n_tx, n_rx]``; deterministic in ``(cfg, seed)``."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    return _generate(cfg, 1, n_steps, _rng(seed, STREAM_SEQUENCE))[0]


def generate_realizations(cfg, n_seq, n_steps, seed):
    """Many independent sequences at once, ``[n_seq, n_steps, n_tx, n_rx]``."""
    if n_seq < 1 or n_steps < 1:
        raise ValueError("n_seq and n_steps must be >= 1")
    return _generate(cfg, n_seq, n_steps, _rng(seed, STREAM_SEQUENCE))


def to_real(h):
    """Move the complex values onto a leading (real, imag) axis."""
    return np.stack([h.real, h.imag])


def channel_gains(h):
    """Broadside beamforming gain ``|1^T H 1|^2 / (n_tx n_rx)`` of complex ``[..., n_tx, n_rx]``.

    Unit-norm all-ones weights on both ends; the mean gain is
    ``sum(R_tx) * sum(R_rx) / (n_tx n_rx)``, so it tracks the spatial correlation
    as well as the ray statistics.
    """
    n = h.shape[-2] * h.shape[-1]
    return np.abs(h.sum(axis=(-2, -1))) ** 2 / n


# datasets ------------------------------------------------------------------


@dataclass(frozen=True)
class ChannelSample:
    X: np.ndarray  # [2, T, n_tx, n_rx]
    H: np.ndarray  # [2, n_tx, n_rx]


@dataclass
class TaskDataset:
    """Windows of one scenario, stored batched.

    ``X`` is ``[N, 2, T, n_tx, n_rx]`` and ``H`` is ``[N, 2, n_tx, n_rx]``.
    """

    scenario: ScenarioConfig
    X: np.ndarray
    H: np.ndarray
    seed: int
    snr_db: float = CLEAN  # noise level already applied to X
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.X.ndim != 5 or self.H.ndim != 4 or self.X.shape[0] != self.H.shape[0]:
            raise ValueError(f"inconsistent dataset shapes X{self.X.shape} H{self.H.shape}")
        if self.X.shape[0] == 0:
            raise ValueError("dataset is empty")

    def __len__(self):
        return self.X.shape[0]

    @property
    def window(self):
        return self.X.shape[2]

    @property
    def samples(self):
        return [ChannelSample(x, h) for x, h in zip(self.X, self.H)]

    def subset(self, idx):
        return dataclasses.replace(self, X=self.X[idx], H=self.H[idx])


def build_task_dataset(cfg, n_samples, T=8, seed=0):
    """``n_samples`` windows, each from its own sequence: X = steps [0, T), H = step T."""
    if n_samples < 1 or T < 1:
        raise ValueError("n_samples and T must be >= 1")
    seq = _generate(cfg, n_samples, T + 1, _rng(seed, STREAM_DATASET))
    X = np.ascontiguousarray(to_real(seq[:, :T]).transpose(1, 0, 2, 3, 4))
    H = np.ascontiguousarray(to_real(seq[:, T]).transpose(1, 0, 2, 3))
    return TaskDataset(scenario=cfg, X=X, H=H, seed=int(seed))


def add_awgn(x, snr_db, seed):
    """Add white Gaussian noise at ``snr_db`` relative to the mean power of ``x``.

    ``snr_db = CLEAN`` (+inf) returns an unchanged copy.
    """
    x = np.asarray(x, dtype=np.float64)
    if math.isinf(snr_db) and snr_db > 0:
        return x.copy()
    power = float(np.mean(x * x))
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    return x + sigma * _rng(seed, STREAM_NOISE).standard_normal(x.shape)


def with_input_noise(ds, snr_db, seed):
    """Copy of ``ds`` with noisy inputs and clean targets."""
    return dataclasses.replace(ds, X=add_awgn(ds.X, snr_db, seed), snr_db=float(snr_db))


# file format ---------------------------------------------------------------
#
#   line 1: b"CLCHAN-DATASET 1\n"
#   line 2: UTF-8 JSON header + b"\n" with keys
#           scenario (all ScenarioConfig fields), seed, snr_db (null = clean),
#           n_samples, window, x_shape, h_shape, dtype ("<f8"), order ("C")
#   payload: X then H, little-endian float64, row-major

DATASET_MAGIC = "CLCHAN-DATASET 1"


def write_blob(path, magic, header, arrays):
    with open(path, "wb") as fh:
        fh.write(magic.encode() + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes(order="C"))


def read_blob(path, magic):
    with open(path, "rb") as fh:
        got = fh.readline().decode().rstrip("\n")
        if got != magic:
            raise ValueError(f"{path}: expected {magic!r} file, found {got!r}")
        header = json.loads(fh.readline().decode())
        payload = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    return header, payload


def save_dataset(ds, path):
    header = {
        "scenario": ds.scenario.to_dict(),
        "seed": ds.seed,
        "snr_db": None if math.isinf(ds.snr_db) else ds.snr_db,
        "n_samples": len(ds),
        "window": ds.window,
        "x_shape": list(ds.X.shape),
        "h_shape": list(ds.H.shape),
        "dtype": "<f8",
        "order": "C",
    }
    write_blob(path, DATASET_MAGIC, header, [ds.X, ds.H])


def load_dataset(path):
    header, payload = read_blob(path, DATASET_MAGIC)
    xs, hs = tuple(header["x_shape"]), tuple(header["h_shape"])
    nx, nh = int(np.prod(xs)), int(np.prod(hs))
    if payload.size != nx + nh:
        raise ValueError(f"{path}: payload has {payload.size} values, header implies {nx + nh}")
    snr = header["snr_db"]
    return TaskDataset(
        scenario=ScenarioConfig.from_dict(header["scenario"]),
        X=payload[:nx].reshape(xs),
        H=payload[nx:].reshape(hs),
        seed=int(header["seed"]),
        snr_db=CLEAN if snr is None else float(snr),
    )
