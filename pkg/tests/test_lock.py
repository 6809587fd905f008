"""Tests for the run directory lock."""

import os

import pytest

from demem import lock
from demem.lock import LOCK_NAME, OutputDirLock


class TestOutputDirLock:
    """Test cases for single-owner run directories."""

    def test_acquire_and_release(self, tmp_path):
        """Test that the lock file records our pid and is removed on release."""
        dir_lock = OutputDirLock(tmp_path / "run")

        with dir_lock:
            assert dir_lock.is_held
            assert dir_lock.holder() == os.getpid()

        assert not (tmp_path / "run" / LOCK_NAME).exists()
        assert not dir_lock.is_held

    def test_live_holder(self, tmp_path):
        """Test that a directory owned by another live process is refused."""
        (tmp_path / LOCK_NAME).write_text(f"{os.getppid()}\n")

        with pytest.raises(OSError, match="in use by process"):
            OutputDirLock(tmp_path).acquire()

    def test_stale_lock_replaced(self, tmp_path, monkeypatch, caplog):
        """Test that a lock left by a dead process is taken over."""
        (tmp_path / LOCK_NAME).write_text("999999\n")
        monkeypatch.setattr(lock, "_pid_alive", lambda pid: False)

        with OutputDirLock(tmp_path) as dir_lock:
            assert dir_lock.holder() == os.getpid()
        assert "stale lock" in caplog.text

    def test_garbage_lock_replaced(self, tmp_path):
        """Test that an unreadable lock file counts as stale."""
        (tmp_path / LOCK_NAME).write_text("not a pid")

        with OutputDirLock(tmp_path) as dir_lock:
            assert dir_lock.holder() == os.getpid()

    def test_release_without_acquire(self, tmp_path):
        """Test that releasing an unheld lock does nothing."""
        (tmp_path / LOCK_NAME).write_text("1\n")

        OutputDirLock(tmp_path).release()

        assert (tmp_path / LOCK_NAME).exists()
