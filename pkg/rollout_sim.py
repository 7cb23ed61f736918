"""Monte-Carlo simulation of closed-loop linear systems and the finite-horizon cost/Gramian estimates built on it."""
import enum
import logging
from dataclasses import InitVar, dataclass
from typing import Optional, Sequence

import numpy as np

from exceptions import ArgumentError, DivergenceError, MetaLqrError
from lqr_core import LqrTask, require_stable

logger = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1e150
MAX_SEED = 2 ** 64
# Rollouts simulated together; bounds the (batch, horizon, d) noise block kept in memory
ROLLOUT_CHUNK_SIZE = 256


class StreamPurpose(enum.IntEnum):
    SPHERE = 1
    ROLLOUT = 2
    INNER_ESTIMATE = 3
    TASK_BATCH = 4
    TASK_GENERATION = 5
    VERIFICATION = 6


@dataclass(frozen=True)
class RngStream:
    """
    A reproducible random stream identified by an experiment seed and a key such as
      (task_index, iteration, perturbation_index, purpose).

    Generators are counter-based (Philox) and keyed through a SeedSequence spawn key, so two streams with the
      same seed and key always produce the same samples whatever order they are consumed in.
    """
    seed: int
    stream_key: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.seed) < MAX_SEED:
            raise ArgumentError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        key = tuple(int(part) for part in self.stream_key)
        if any(part < 0 for part in key):
            raise ArgumentError(f"stream key entries must be nonnegative, got {key}")
        object.__setattr__(self, 'seed', int(self.seed))
        object.__setattr__(self, 'stream_key', key)

    @classmethod
    def for_purpose(cls, seed: int, task_index: int, iteration: int, perturbation_index: int,
                    purpose: StreamPurpose) -> 'RngStream':
        return cls(seed, (task_index, iteration, perturbation_index, int(purpose)))

    def derive(self, *parts: int) -> 'RngStream':
        return RngStream(self.seed, self.stream_key + tuple(int(part) for part in parts))

    def generator(self) -> np.random.Generator:
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.stream_key)
        return np.random.Generator(np.random.Philox(sequence))


@dataclass(frozen=True, eq=False)
class RolloutResult:
    empirical_cost: float
    empirical_gramian: np.ndarray
    horizon: int
    stage_cost_matrix: InitVar[Optional[np.ndarray]] = None

    def __post_init__(self, stage_cost_matrix):
        if self.horizon < 1:
            raise ArgumentError(f"horizon must be at least 1, got {self.horizon}")
        if stage_cost_matrix is not None:
            gramian_cost = float(np.sum(self.empirical_gramian * stage_cost_matrix))
            if abs(gramian_cost - self.empirical_cost) > 1e-10 * max(1.0, abs(self.empirical_cost)):
                raise MetaLqrError(f"empirical cost {self.empirical_cost!r} disagrees with its Gramian "
                                   f"{gramian_cost!r}")


def _as_gain_batch(task: LqrTask, gains, count: int) -> np.ndarray:
    gains = np.asarray(gains, dtype=float)
    shape = (task.control_dim, task.state_dim)
    if gains.shape == shape:
        gains = np.broadcast_to(gains, (count,) + shape)
    if gains.shape != (count,) + shape:
        raise ArgumentError(f"expected {count} gains of shape {shape}, got array of shape {gains.shape}")
    if not np.all(np.isfinite(gains)):
        raise ArgumentError("gains contain non-finite entries")
    return gains


def _simulate_chunk(task: LqrTask, gains: np.ndarray, horizon: int, streams: Sequence[RngStream],
                    offset: int) -> list[RolloutResult]:
    d = task.state_dim
    closed = task.A[None, :, :] - task.B[None, :, :] @ gains
    stage = task.Q[None, :, :] + np.transpose(gains, (0, 2, 1)) @ task.R[None, :, :] @ gains

    states = np.empty((len(streams), d))
    noise = np.empty((len(streams), horizon, d))
    for row, stream in enumerate(streams):
        generator = stream.generator()
        states[row] = task.initial_factor @ generator.standard_normal(d)
        noise[row] = generator.standard_normal((horizon, d)) @ task.noise_factor.T

    gramian = np.zeros((len(streams), d, d))
    cost = np.zeros(len(streams))
    for t in range(horizon):
        # Row-wise products keep every rollout independent of the batch it is simulated in
        states = np.sum(closed * states[:, None, :], axis=2) + noise[:, t, :]
        norms = np.sqrt(np.sum(states * states, axis=1))
        diverged = ~(norms <= DIVERGENCE_THRESHOLD)
        if np.any(diverged):
            row = int(np.argmax(diverged))
            raise DivergenceError(f"rollout diverged at step {t + 1}", step=t + 1, perturbation_index=offset + row)
        outer = states[:, :, None] * states[:, None, :]
        gramian += outer
        cost += np.sum(outer * stage, axis=(1, 2))

    gramian /= horizon
    cost /= horizon
    return [RolloutResult(float(cost[row]), gramian[row], horizon, stage[row]) for row in range(len(streams))]


def rollout_batch(task: LqrTask, gains, horizon: int, streams: Sequence[RngStream]) -> list[RolloutResult]:
    """
    Simulate one rollout per stream; gains is either a single k x d gain or one gain per stream.

    :raises DivergenceError: if a state norm exceeds DIVERGENCE_THRESHOLD, with the index of the rollout
      in perturbation_index
    """
    if horizon < 1:
        raise ArgumentError(f"horizon must be at least 1, got {horizon}")
    streams = list(streams)
    gains = _as_gain_batch(task, gains, len(streams))
    results = []
    for start in range(0, len(streams), ROLLOUT_CHUNK_SIZE):
        stop = start + ROLLOUT_CHUNK_SIZE
        results.extend(_simulate_chunk(task, gains[start:stop], horizon, streams[start:stop], start))
    return results


def rollout(task: LqrTask, K, horizon: int, rng: RngStream) -> RolloutResult:
    """
    Simulate x_{t+1} = (A - BK) x_t + w_t for horizon steps from x_0 ~ N(0, Sigma0) with w_t ~ N(0, Psi).

    The returned cost and Gramian average over the states x_1 .. x_horizon; x_0 is not included.
    K does not have to be stabilizing.

    :raises DivergenceError: if any state norm exceeds DIVERGENCE_THRESHOLD, with the step index
    """
    K = task.check_gain(K)
    return rollout_batch(task, K, horizon, [rng])[0]


def expected_finite_horizon(task: LqrTask, K, horizon: int) -> tuple[float, np.ndarray]:
    """Exact expectations of a rollout's empirical cost and Gramian, by covariance propagation."""
    if horizon < 1:
        raise ArgumentError(f"horizon must be at least 1, got {horizon}")
    K = task.check_gain(K)
    closed = require_stable(task, K)
    covariance = task.Sigma0.copy()
    gramian = np.zeros_like(covariance)
    for _ in range(horizon):
        covariance = closed @ covariance @ closed.T + task.Psi
        gramian += covariance
    gramian /= horizon
    return float(np.trace(task.stage_cost_matrix(K) @ gramian)), gramian


def expected_finite_horizon_cost(task: LqrTask, K, horizon: int) -> float:
    """
    (1/l) sum_{t=1..l} Tr((Q + K^T R K) S_t) with S_0 = Sigma0 and S_{t+1} = (A - BK) S_t (A - BK)^T + Psi.

    :raises InstabilityError: if K is not stabilizing
    """
    return expected_finite_horizon(task, K, horizon)[0]
