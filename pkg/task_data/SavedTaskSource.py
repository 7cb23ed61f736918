import hashlib
import logging
from pathlib import Path
from typing import Optional

from lqr_core import TaskSet
from task_data.AbstractTaskSource import AbstractTaskSource

logger = logging.getLogger(__name__)


class SavedTaskSource(AbstractTaskSource):
    """Task sets read from a task file, written by gen-tasks or by hand."""
    DEFAULT_FILE_NAME = None

    @classmethod
    def source_descriptor(cls, spec, **kwargs) -> dict:
        # Keyed by content, so an edited file is never served from a stale cache entry
        content = Path(spec).read_bytes()
        return {'source': cls.__name__, 'sha256': hashlib.sha256(content).hexdigest(),
                'format_version': cls.FORMAT_VERSION}

    @classmethod
    def cold_load_data(cls, spec, store_in_hot_load: bool, file_name: Optional[str] = None, **kwargs) -> TaskSet:
        """
        :param spec: path of the task file

        :raises FileNotFoundError: if the task file does not exist
        :raises ArgumentError: if the task file is malformed or holds an invalid task
        """
        tasks = cls.load_task_set(spec)
        logger.info("Loaded %d tasks (d=%d, k=%d) from %s", len(tasks), tasks.state_dim, tasks.control_dim, spec)
        if store_in_hot_load:
            cls.update_hot_load(tasks, cls.source_descriptor(spec), file_name)
        return tasks
