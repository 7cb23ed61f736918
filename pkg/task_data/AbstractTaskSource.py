import abc
import hashlib
import json
import logging
from abc import ABC
from pathlib import Path
from typing import Any, Optional

import numpy as np

from exceptions import ArgumentError
from lqr_core import LqrTask, TaskSet

logger = logging.getLogger(__name__)

MATRIX_NAMES = ('A', 'B', 'Q', 'R', 'Psi', 'Sigma0')


class AbstractTaskSource(ABC):
    DEFAULT_FILE_NAME = None
    FORMAT_VERSION = 1

    @classmethod
    def matrix_to_dict(cls, matrix: np.ndarray) -> dict:
        # Floats are written in shortest round-trip form, so loading gives back the same bits
        return {'rows': int(matrix.shape[0]), 'cols': int(matrix.shape[1]),
                'entries': [float(value) for value in matrix.reshape(-1)]}

    @classmethod
    def matrix_from_dict(cls, raw: dict, name: str) -> np.ndarray:
        try:
            rows, cols, entries = int(raw['rows']), int(raw['cols']), raw['entries']
        except (KeyError, TypeError, ValueError):
            raise ArgumentError(f"matrix {name} needs integer 'rows', 'cols' and a list of 'entries'")
        if not isinstance(entries, list):
            raise ArgumentError(f"matrix {name} needs a list of 'entries'")
        if rows < 1 or cols < 1 or len(entries) != rows * cols:
            raise ArgumentError(f"matrix {name} has {len(entries)} entries, expected {rows} x {cols}")
        try:
            return np.array(entries, dtype=float).reshape(rows, cols)
        except (TypeError, ValueError):
            raise ArgumentError(f"matrix {name} must hold {rows * cols} numbers")

    @classmethod
    def task_set_to_dict(cls, tasks: TaskSet, source: Optional[dict] = None) -> dict:
        """
        The file representation of a TaskSet: explicit dimensions and row-major matrix entries per task

        :param tasks: TaskSet to convert
        :param source: optional description of where the tasks came from, stored alongside them
        """
        return {
            'format_version': cls.FORMAT_VERSION,
            'state_dim': tasks.state_dim,
            'control_dim': tasks.control_dim,
            'weights': [float(weight) for weight in tasks.weights],
            'tasks': [{name: cls.matrix_to_dict(getattr(task, name)) for name in MATRIX_NAMES} for task in tasks],
            'source': source,
        }

    @classmethod
    def task_set_from_dict(cls, raw: dict) -> TaskSet:
        """
        Inverse of task_set_to_dict

        :raises ArgumentError: if the structure is malformed or a task violates LqrTask's invariants
        """
        if not isinstance(raw, dict) or not isinstance(raw.get('tasks'), list):
            raise ArgumentError("a task file must be an object with a 'tasks' list")
        if raw.get('format_version', cls.FORMAT_VERSION) != cls.FORMAT_VERSION:
            raise ArgumentError(f"unsupported task file format version {raw.get('format_version')}")
        tasks = []
        for index, task in enumerate(raw['tasks']):
            if not isinstance(task, dict):
                raise ArgumentError(f"task {index} must be an object of matrices")
            missing = [name for name in MATRIX_NAMES if name not in task]
            if missing:
                raise ArgumentError(f"task {index} misses the matrices {missing}")
            try:
                tasks.append(LqrTask(**{name: cls.matrix_from_dict(task[name], f"{name} of task {index}")
                                        for name in MATRIX_NAMES}))
            except ArgumentError as error:
                raise ArgumentError(f"task {index} is invalid: {error}") from error
        task_set = TaskSet(tuple(tasks), raw.get('weights'))
        if (raw.get('state_dim', task_set.state_dim), raw.get('control_dim', task_set.control_dim)) \
                != (task_set.state_dim, task_set.control_dim):
            raise ArgumentError("declared dimensions do not match the stored matrices")
        return task_set

    @classmethod
    def save_task_set(cls, tasks: TaskSet, file_name, source: Optional[dict] = None):
        Path(file_name).write_text(json.dumps(cls.task_set_to_dict(tasks, source), indent=2) + '\n',
                                   encoding='utf-8')

    @classmethod
    def load_task_set(cls, file_name) -> TaskSet:
        """
        :raises FileNotFoundError: if file_name does not exist
        :raises ArgumentError: if the file is not a valid task file
        """
        text = Path(file_name).read_text(encoding='utf-8')
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as error:
            raise ArgumentError(f"{file_name} is not valid JSON: {error}")
        try:
            return cls.task_set_from_dict(raw)
        except ArgumentError as error:
            raise ArgumentError(f"{file_name}: {error}") from error

    @classmethod
    def cache_key(cls, descriptor: dict) -> str:
        return hashlib.sha256(json.dumps(descriptor, sort_keys=True).encode('utf-8')).hexdigest()

    @classmethod
    def update_hot_load(cls, tasks: TaskSet, descriptor: dict, file_name: Optional[str] = None):
        """
        update_hot_load will store tasks under their descriptor in the file_name cache, keeping other entries
        :param tasks: TaskSet to store
        :param descriptor: dict describing how the tasks were obtained, see source_descriptor
        :param file_name: cache file, DEFAULT_FILE_NAME when None
        """
        if file_name is None and cls.DEFAULT_FILE_NAME is not None:
            file_name = cls.DEFAULT_FILE_NAME
        if file_name is None:
            return

        try:
            cache = json.loads(Path(file_name).read_text(encoding='utf-8'))
        except FileNotFoundError:
            cache = {'entries': {}}
        except json.JSONDecodeError:
            logger.warning("Task cache %s is corrupt and is rebuilt", file_name)
            cache = {'entries': {}}

        cache.setdefault('entries', {})[cls.cache_key(descriptor)] = cls.task_set_to_dict(tasks, descriptor)
        Path(file_name).write_text(json.dumps(cache, indent=2) + '\n', encoding='utf-8')

    @classmethod
    @abc.abstractmethod
    def source_descriptor(cls, spec: Any, **kwargs) -> dict:
        """
        source_descriptor returns a JSON-serialisable dict identifying the task set spec produces, two specs
          with equal descriptors produce identical task sets

        :param spec: whatever the concrete source generates or loads tasks from
        """
        pass

    @classmethod
    @abc.abstractmethod
    def cold_load_data(cls, spec: Any, store_in_hot_load: bool, file_name: Optional[str] = None,
                       **kwargs) -> TaskSet:
        """
        Produce the task set for spec from scratch
        :param spec: whatever the concrete source generates or loads tasks from
        :param store_in_hot_load: bool, specifying if the created TaskSet should be stored in the hot_load
        :param file_name: hot_load cache file, DEFAULT_FILE_NAME when None
        :return: the TaskSet described by spec
        """
        pass

    @classmethod
    def hot_load_data(cls, spec: Any, allow_cold_load: bool, file_name: Optional[str] = None,
                      **kwargs) -> TaskSet:
        """
        Load the task set for spec from the hot_load cache

        :param spec: whatever the concrete source generates or loads tasks from
        :param allow_cold_load: boolean specifying if the cold_load is allowed to be used
        :param file_name: string specifying the cache file, DEFAULT_FILE_NAME when None
        :param kwargs: passed on to source_descriptor and cold_load_data

        :return: the TaskSet described by spec

        :raises ArgumentError: if the tasks are not cached and no cold_load is allowed
        """
        if file_name is None:
            file_name = cls.DEFAULT_FILE_NAME
        key = cls.cache_key(cls.source_descriptor(spec, **kwargs))

        try:
            if file_name is None:
                raise FileNotFoundError()
            cache = json.loads(Path(file_name).read_text(encoding='utf-8'))
        except (FileNotFoundError, json.JSONDecodeError):
            cache = {}

        # Happy flow, the tasks are cached, return them
        entry = cache.get('entries', {}).get(key)
        if entry is not None:
            logger.debug("Task set %s hot loaded from %s", key[:12], file_name)
            return cls.task_set_from_dict(entry)

        # Unhappy flow, nothing cached for this spec, check if we can cold_load
        if allow_cold_load:
            return cls.cold_load_data(spec, store_in_hot_load=file_name is not None, file_name=file_name, **kwargs)
        raise ArgumentError("Task set that you requested has not been cold_loaded.")
