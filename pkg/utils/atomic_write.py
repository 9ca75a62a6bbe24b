import os
import tempfile
from contextlib import contextmanager

from utils.errors import VolumeIOError


def _current_umask():
    # mkstemp creates 0600 files; outputs get the mode a plain open() would give
    mask = os.umask(0)
    os.umask(mask)
    return mask


def check_output_path(path):
    """Fail early unless ``path`` can be created; returns its directory."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        raise VolumeIOError(f"{path}: output directory does not exist")
    if not os.access(directory, os.W_OK):
        raise VolumeIOError(f"{path}: output directory is not writable")
    if os.path.isdir(path):
        raise VolumeIOError(f"{path}: is a directory")
    return directory


@contextmanager
def atomic_output(path, suffix=""):
    """Yield a temporary path next to ``path``; move it into place only if the block succeeds.

    The temporary file is removed on any failure, so an interrupted or failed
    write never leaves a partial output behind.
    """
    path = os.fspath(path)
    directory = check_output_path(path)
    try:
        fd, tmp_path = tempfile.mkstemp(prefix=".tmp-", suffix=suffix, dir=directory)
    except OSError as exc:
        raise VolumeIOError(f"{path}: cannot write ({exc.strerror or exc})") from exc
    os.close(fd)
    try:
        yield tmp_path
        os.chmod(tmp_path, 0o666 & ~_current_umask())
        os.replace(tmp_path, path)
    except OSError as exc:
        raise VolumeIOError(f"{path}: write failed ({exc.strerror or exc})") from exc
    finally:
        if os.path.exists(tmp_path):
            try:
                os.unlink(tmp_path)
            except OSError:
                pass


def write_text(path, text):
    """Atomically replace ``path`` with ``text``."""
    with atomic_output(path, suffix=".part") as tmp_path:
        with open(tmp_path, "w", newline="") as f:
            f.write(text)


def write_bytes(path, payload):
    with atomic_output(path, suffix=".part") as tmp_path:
        with open(tmp_path, "wb") as f:
            f.write(payload)
