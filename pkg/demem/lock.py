"""Single-owner lock on a run directory."""

import logging
import os
from pathlib import Path

logger = logging.getLogger(__name__)

LOCK_NAME = ".demem.lock"


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class OutputDirLock:
    """Pid file that lets one process own an output directory.

    Usable as a context manager; raises OSError when another live process
    holds the lock.
    """

    def __init__(self, directory: Path):
        """Initialize lock.

        Args:
            directory: Run directory to own
        """
        self.path = Path(directory) / LOCK_NAME
        self.is_held = False

    def holder(self) -> int | None:
        """Pid recorded in the lock file, or None."""
        try:
            return int(self.path.read_text().strip())
        except (OSError, ValueError):
            return None

    def acquire(self) -> None:
        """Take the lock, replacing a stale one left by a dead process."""
        self.path.parent.mkdir(parents=True, exist_ok=True)
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
            except FileExistsError:
                pid = self.holder()
                if pid is not None and pid != os.getpid() and _pid_alive(pid):
                    raise OSError(f"{self.path.parent} is in use by process {pid}") from None
                logger.warning(f"Replacing stale lock {self.path} (pid {pid})")
                self.path.unlink(missing_ok=True)
                continue
            with os.fdopen(fd, "w") as f:
                f.write(f"{os.getpid()}\n")
            self.is_held = True
            logger.debug(f"Acquired {self.path}")
            return
        raise OSError(f"Could not acquire {self.path}")

    def release(self) -> None:
        if not self.is_held:
            return
        try:
            self.path.unlink()
        except OSError:
            logger.debug(f"Could not remove lock {self.path}")
        self.is_held = False

    def __enter__(self) -> "OutputDirLock":
        self.acquire()
        return self

    def __exit__(self, *exc) -> None:
        self.release()
