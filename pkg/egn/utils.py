"""
Some utilities.
"""
import contextlib
import os
from typing import Iterator

from .errors import ConfigError, MissingArtifactError, RunLockedError

__all__ = ("get_worker_count", "run_lock", "require_artifact", "output_path")


def get_worker_count() -> int:
    """
    Return the number of worker processes for parallel evaluation, taken from
    `EGN_THREADS`. One means everything runs in-process.
    """
    if "EGN_THREADS" in os.environ:
        value = os.environ["EGN_THREADS"]
        try:
            count = int(value)
        except ValueError:
            raise ConfigError([f"EGN_THREADS must be an integer, got {value!r}."])
        if count < 1:
            raise ConfigError([f"EGN_THREADS must be >= 1, got {count!r}."])
        return count
    else:
        return 1


def output_path(output_dir: str, *parts: str) -> str:
    """
    Join `parts` below `output_dir`, refusing anything that would escape it.
    """
    root = os.path.abspath(output_dir)
    path = os.path.abspath(os.path.join(root, *parts))
    if os.path.commonpath([root, path]) != root:
        raise ConfigError([f"Path {os.path.join(*parts)!r} leaves the output directory."])
    return path


def require_artifact(path: str, command: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifactError(path, command)
    return path


@contextlib.contextmanager
def run_lock(output_dir: str) -> Iterator[str]:
    """
    Own `output_dir` for the duration of the block through an exclusively
    created `.lock` file.
    """
    os.makedirs(output_dir, exist_ok=True)
    lock = os.path.join(output_dir, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(
            f"{output_dir!r} is in use by another command (remove {lock!r} if it is stale)."
        )
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield lock
    finally:
        os.remove(lock)
