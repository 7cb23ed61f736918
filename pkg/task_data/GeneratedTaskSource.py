import logging
from dataclasses import asdict
from typing import Optional

import numpy as np

from config import TaskGenSpec
from exceptions import ConvergenceError, GenerationError, InstabilityError
from linalg import min_eigenvalue, spectral_radius, symmetrize
from lqr_core import LqrTask, TaskSet, exact_meta_gradient, optimal_policy
from rollout_sim import RngStream, StreamPurpose
from task_data.AbstractTaskSource import AbstractTaskSource

logger = logging.getLogger(__name__)


class GeneratedTaskSource(AbstractTaskSource):
    DEFAULT_FILE_NAME = "task_data/data/generated_tasks.json"
    MAX_ATTEMPTS = 100
    # Q, R and Psi with a smallest eigenvalue below REPAIR_THRESHOLD are shifted up to PD_MARGIN
    PD_MARGIN = 0.1
    REPAIR_THRESHOLD = 0.05

    @classmethod
    def rescale_dynamics(cls, A: np.ndarray, spectral_target: float) -> np.ndarray:
        radius = spectral_radius(A)
        if radius >= spectral_target:
            return A * (spectral_target / radius)
        return A

    @classmethod
    def repair_positive_definite(cls, X: np.ndarray) -> np.ndarray:
        X = symmetrize(X)
        smallest = min_eigenvalue(X)
        if smallest < cls.REPAIR_THRESHOLD:
            X = X + (abs(smallest) + cls.PD_MARGIN) * np.eye(X.shape[0])
        return X

    @classmethod
    def repair_task(cls, A, B, Q, R, Psi, spectral_target: float) -> LqrTask:
        return LqrTask(
            A=cls.rescale_dynamics(A, spectral_target),
            B=B,
            Q=cls.repair_positive_definite(Q),
            R=cls.repair_positive_definite(R),
            Psi=cls.repair_positive_definite(Psi),
            Sigma0=np.eye(A.shape[0]),
        )

    @classmethod
    def draw_task_set(cls, spec: TaskGenSpec, generator: np.random.Generator) -> TaskSet:
        """A center system drawn uniformly, then num_tasks systems drawn entrywise Gaussian around it."""
        d, k = spec.d, spec.k
        shapes = {'A': (d, d), 'B': (d, k), 'Q': (d, d), 'R': (k, k), 'Psi': (d, d)}
        center = {name: generator.uniform(spec.center_entry_low, spec.center_entry_high, size=shape)
                  for name, shape in shapes.items()}
        center = cls.repair_task(**center, spectral_target=spec.spectral_target)

        tasks = []
        for _ in range(spec.num_tasks):
            drawn = {name: getattr(center, name) + spec.perturbation_std * generator.standard_normal(shape)
                     for name, shape in shapes.items()}
            tasks.append(cls.repair_task(**drawn, spectral_target=spec.spectral_target))
        return TaskSet.uniform(tasks)

    @classmethod
    def is_admissible(cls, tasks: TaskSet, adaptation_rate: float) -> bool:
        """K = 0 is MAML-stabilizing, so the meta-gradient is defined there, and every task has a DARE solution."""
        try:
            exact_meta_gradient(tasks, np.zeros((tasks.control_dim, tasks.state_dim)), adaptation_rate)
            for task in tasks:
                optimal_policy(task)
        except (InstabilityError, ConvergenceError) as error:
            logger.info("Rejected generated task set: %s", error)
            return False
        return True

    @classmethod
    def generate_tasks(cls, spec: TaskGenSpec, adaptation_rate: float = 0.0) -> TaskSet:
        """
        Generate a task collection around a random center system

        Attempt a draws from RngStream(spec.seed, (TASK_GENERATION, a)), so the result only depends on spec
          and adaptation_rate

        :param spec: TaskGenSpec
        :param adaptation_rate: the adaptation rate the zero gain must be MAML-stabilizing for

        :return: a TaskSet with uniform weights

        :raises GenerationError: if no admissible task set was drawn in MAX_ATTEMPTS attempts
        """
        for attempt in range(cls.MAX_ATTEMPTS):
            generator = RngStream(spec.seed, (int(StreamPurpose.TASK_GENERATION), attempt)).generator()
            tasks = cls.draw_task_set(spec, generator)
            if cls.is_admissible(tasks, adaptation_rate):
                if attempt:
                    logger.warning("Task set accepted after %d regenerations", attempt)
                return tasks
        raise GenerationError(f"no admissible task set in {cls.MAX_ATTEMPTS} attempts, "
                              f"try a smaller perturbation_std than {spec.perturbation_std}", cls.MAX_ATTEMPTS)

    @classmethod
    def source_descriptor(cls, spec: TaskGenSpec, adaptation_rate: float = 0.0) -> dict:
        return {'source': cls.__name__, 'taskgen': asdict(spec), 'adaptation_rate': adaptation_rate,
                'format_version': cls.FORMAT_VERSION}

    @classmethod
    def cold_load_data(cls, spec: TaskGenSpec, store_in_hot_load: bool, file_name: Optional[str] = None,
                       adaptation_rate: float = 0.0) -> TaskSet:
        tasks = cls.generate_tasks(spec, adaptation_rate)
        if store_in_hot_load:
            cls.update_hot_load(tasks, cls.source_descriptor(spec, adaptation_rate), file_name)
        return tasks
