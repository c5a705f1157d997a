import logging
import os
from contextlib import contextmanager
from typing import Iterator, Optional, TextIO

from errors import OutputDirectoryBusy

logger = logging.getLogger(__name__)

LOCK_FILENAME = ".lock"


class OutputDirLock:
    """Advisory lock on an output directory, held for the duration of a run."""

    def __init__(self, output_dir: str):
        self.output_dir = output_dir
        self.path = os.path.join(output_dir, LOCK_FILENAME)
        self._fh: Optional[TextIO] = None

    def acquire(self) -> bool:
        os.makedirs(self.output_dir, exist_ok=True)

        fh = open(self.path, "a+")
        try:
            if os.name == "posix":
                import fcntl

                fcntl.flock(fh.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
            elif os.name == "nt":
                import msvcrt

                msvcrt.locking(fh.fileno(), msvcrt.LK_NBLCK, 1)
        except OSError:
            fh.close()
            return False

        self._fh = fh
        return True

    def release(self) -> None:
        if not self._fh:
            return

        try:
            if os.name == "posix":
                import fcntl

                fcntl.flock(self._fh.fileno(), fcntl.LOCK_UN)
            elif os.name == "nt":
                import msvcrt

                msvcrt.locking(self._fh.fileno(), msvcrt.LK_UNLCK, 1)
        finally:
            self._fh.close()
            self._fh = None
            try:
                os.unlink(self.path)
            except OSError:
                pass


@contextmanager
def locked_output_dir(output_dir: str) -> Iterator[str]:
    """Hold the output directory lock or raise OutputDirectoryBusy."""
    lock = OutputDirLock(output_dir)
    if not lock.acquire():
        raise OutputDirectoryBusy(f"another run is writing to {output_dir}")
    logger.debug(f"Locked output directory {output_dir}")
    try:
        yield output_dir
    finally:
        lock.release()
