"""TimeGuard: deterministic per-sample response delays.

Each sample's delay is seeded by a keyed hash of its bytes, so repeating a
query reproduces the same response time and averaging cannot wash the delay
out.  ``max_delay`` is the blunt variant that answers every query at the
final exit's time.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .attacks import AttackModel, run_inference_attack
from .nn import MultiExitModel
from .timing import TimingModel, mean_noise, steal_from_times

logger = logging.getLogger(__name__)

MODES = ("gaussian_delay", "max_delay")
SECRET_ENV = "MEXAUDIT_TIMEGUARD_SECRET"
CROSSING_EPS = 0.01


class SecretMissingError(RuntimeError):
    pass


def hkdf(ikm: bytes, salt: bytes, info: bytes = b"", length: int = 32) -> bytes:
    """HKDF-SHA256 extract-and-expand."""
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=salt or None, info=info).derive(ikm)


def sample_digest(x) -> bytes:
    """SHA-512 of the row-major little-endian float64 bytes of ``x``."""
    arr = np.ascontiguousarray(np.asarray(x, dtype="<f8"))
    return hashlib.sha512(arr.tobytes()).digest()


@dataclass(frozen=True)
class TimeGuardConfig:
    sigma: float = 0.0
    secret: bytes = field(default=b"", repr=False)
    mode: str = "gaussian_delay"
    hash_fn: str = "sha512"

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError("sigma must be finite and non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.hash_fn != "sha512":
            raise ValueError("only sha512 is supported")
        if self.mode == "gaussian_delay" and len(self.secret) != 32:
            raise ValueError("the secret seed must be 32 bytes")

    @classmethod
    def from_env(cls, sigma: float, mode: str = "gaussian_delay", env_var: str = SECRET_ENV):
        """Read the secret as 64 hex characters from ``env_var``."""
        raw = os.environ.get(env_var)
        if raw is None:
            raise SecretMissingError(f"set {env_var} to a 64-character hex secret")
        try:
            secret = bytes.fromhex(raw.strip())
        except ValueError:
            raise SecretMissingError(f"{env_var} is not valid hex") from None
        return cls(sigma, secret, mode)

    def with_sigma(self, sigma: float) -> "TimeGuardConfig":
        return TimeGuardConfig(sigma, self.secret, self.mode, self.hash_fn)

    def to_dict(self) -> dict:
        # the secret is deliberately left out
        return {"sigma": self.sigma, "mode": self.mode, "hash_fn": self.hash_fn}


def secret_from_seed(seed: int) -> bytes:
    """Reproducible stand-in secret for experiments; never for deployment."""
    return np.random.SeedSequence(seed).generate_state(8, dtype=np.uint32).tobytes()


@dataclass
class DelayedPrediction:
    prediction: np.ndarray
    exit_index: int
    delay_time: float


def unit_draw(x, secret: bytes) -> float:
    """Standard-normal draw determined by (sample bytes, secret)."""
    key = hkdf(sample_digest(x), secret, info=b"timeguard-delay")
    return float(np.random.default_rng(int.from_bytes(key, "little")).standard_normal())


def timeguard_delays(x, model: MultiExitModel, timing: TimingModel, config: TimeGuardConfig):
    """Batch form: (probabilities, taken exits, delayed times t')."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    probs, _, exits = model.predict_early(x)
    t = timing.clean_times[exits]
    if config.mode == "max_delay":
        return probs, exits, np.full(len(exits), timing.clean_times[-1])
    if config.sigma == 0:
        return probs, exits, t.copy()
    u = np.array([unit_draw(row, config.secret) for row in x])
    # I = t + sigma*u, t' = t + |t - I|
    return probs, exits, t + config.sigma * np.abs(u)


def timeguard_delay(x, model: MultiExitModel, timing: TimingModel, config: TimeGuardConfig) -> DelayedPrediction:
    probs, exits, t = timeguard_delays(x, model, timing, config)
    return DelayedPrediction(probs[0], int(exits[0]), float(t[0]))


def max_delay(x, model: MultiExitModel, timing: TimingModel) -> DelayedPrediction:
    return timeguard_delay(x, model, timing, TimeGuardConfig(mode="max_delay"))


# trade-off sweep --------------------------------------------------------------


@dataclass
class SweepRow:
    sigma: float
    hybrid_asr: float
    original_asr: float
    mean_time: float
    steal_accuracy: float
    n_clusters: int


@dataclass
class SweepResult:
    rows: list[SweepRow]
    crossing_sigma: float | None
    max_delay_time: float

    def crossing_row(self) -> SweepRow | None:
        for r in self.rows:
            if r.sigma == self.crossing_sigma:
                return r
        return None


@dataclass
class AttackSuite:
    """A pair of shadow-trained attacks and the target's evaluation set."""
    original: AttackModel
    hybrid: AttackModel
    members: tuple
    nonmembers: tuple


def _observe(x, model, timing, config, n_queries, rng):
    _, exits, delayed = timeguard_delays(x, model, timing, config)
    return delayed + mean_noise(timing, len(exits), n_queries, rng), exits, delayed


def tradeoff_sweep(model: MultiExitModel, suite: AttackSuite, sigma_list, timing: TimingModel,
                   config: TimeGuardConfig, n_queries: int = 1, seed: int = 0,
                   eps: float = CROSSING_EPS) -> SweepResult:
    """Adversary 2 against TimeGuard at each sigma.

    Times of the target's members and non-members are observed through the
    defense (plus any channel noise in ``timing``), clustered into exits, and
    fed to the hybrid attack.  The crossing is the smallest sigma at which the
    hybrid attack is no better than the original one (within ``eps``).
    """
    sigma_list = list(sigma_list)
    if not sigma_list:
        raise ValueError("empty sigma list")
    original = run_inference_attack(suite.original, model, suite.members, suite.nonmembers)
    n_mem = len(suite.members[1])
    x = np.vstack([suite.members[0], suite.nonmembers[0]])
    rows = []
    for sigma in sigma_list:
        rng = np.random.default_rng([seed, int(round(sigma * 1000))])
        times, exits, delayed = _observe(x, model, timing, config.with_sigma(sigma), n_queries, rng)
        steal = steal_from_times(times, exits, n_queries, max_clusters=10**6)
        pred = steal.predicted_exit
        hybrid = run_inference_attack(suite.hybrid, model, suite.members, suite.nonmembers,
                                      "timing", (pred[:n_mem], pred[n_mem:]))
        rows.append(SweepRow(float(sigma), hybrid, original, float(delayed.mean()),
                             steal.accuracy, steal.n_exits))
    crossing = next((r.sigma for r in rows if r.hybrid_asr <= r.original_asr + eps), None)
    return SweepResult(rows, crossing, float(timing.clean_times[-1]))
