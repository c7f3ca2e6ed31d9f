"""
Logging for ttaforge runs.

Every message goes to ``<user cache>/logs/out.log`` at DEBUG and to stderr at the console level (INFO unless
``TTAFORGE_LOG_LEVEL`` says otherwise). Per-batch step reports are logged as one JSON object per line with
``logStructured``. Long loops report progress through ``showProgress``; a CLI subscribes a tqdm bar with
``subscribeProgress`` and without a subscriber the progress calls do nothing.
"""
import faulthandler
import inspect
import itertools
import json
import logging
import os
import sys
import threading
import time
import traceback
from typing import Any, Mapping

from tqdm import tqdm

from ttaforge import paths

DEBUG = logging.DEBUG
INFO = logging.INFO
WARNING = logging.WARNING
ERROR = logging.ERROR
CRITICAL = logging.CRITICAL

levels = {DEBUG: "DEBUG", INFO: "INFO", WARNING: "WARNING", ERROR: "ERROR", CRITICAL: "CRITICAL"}

LEVEL_ENV = "TTAFORGE_LOG_LEVEL"

logging.basicConfig(filename=os.path.join(paths.log_dir, "out.log"), level=logging.DEBUG)

# Chatty third-party loggers (PNG chunk dumps, scheduler heartbeats)
for modname in ("PIL.PngImagePlugin", "PIL.Image", "distributed", "tornado", "asyncio", "fsspec"):
    logging.getLogger(modname).setLevel(logging.ERROR)

console = logging.StreamHandler()
console.setLevel(os.environ.get(LEVEL_ENV, "INFO").upper())

# Anything with ``total``, ``n``, ``refresh()`` and ``close()``; normally a tqdm bar
progressbar = None

_worker_numbers = itertools.count(1)
_worker_ids = {}
_worker_lock = threading.Lock()


def _thread_tag() -> str:
    if threading.current_thread() is threading.main_thread():
        return "M"
    ident = threading.get_ident()
    with _worker_lock:
        if ident not in _worker_ids:
            _worker_ids[ident] = next(_worker_numbers)
    return str(_worker_ids[ident])


def _caller(depth: int = 2) -> str:
    return inspect.stack()[depth][3]


def subscribeProgress(total: int, desc: str = None):
    """Attach a fresh tqdm bar counting images; replaces any previous subscriber."""
    global progressbar
    unsubscribeProgress()
    progressbar = tqdm(total=total, desc=desc, unit="img", leave=False, disable=None)
    return progressbar


def unsubscribeProgress():
    global progressbar
    hideProgress()
    progressbar = None


def showProgress(value: int, minval: int = 0, maxval: int = 100):
    """
    Move the subscribed progress bar to ``value`` within ``[minval, maxval]``.

    Parameters
    ----------
    value   : int
        Images processed so far, in the same units as the bounds.
    minval  : int
        Value shown as an empty bar (default: 0)
    maxval  : int
        Value shown as a full bar (default: 100)
    """
    if progressbar is None:
        return
    progressbar.total = maxval - minval
    progressbar.n = value - minval
    progressbar.refresh()


def hideProgress():
    if progressbar is not None:
        progressbar.close()


def logMessage(*args: Any, level: int = INFO, loggername: str = None, timestamp: str = None):
    """
    Log one line ``"{timestamp} - {loggername} - {levelname} - {thread} - {text}"``.

    Parameters
    ----------
    args            : Any
        Joined with spaces the way print() joins its arguments.
    level           : int
        One of msg.DEBUG, msg.INFO, msg.WARNING, msg.ERROR, msg.CRITICAL. Unknown values are logged as CRITICAL.
    loggername      : str
        Logger to post into. Defaults to the calling function's name.
    timestamp       : str
        Defaults to ``time.asctime()``.
    """
    text = " ".join(str(arg) for arg in args)
    loggername = loggername or _caller()
    level = level if level in levels else CRITICAL

    logger = logging.getLogger(loggername)
    logger.setLevel(DEBUG)
    if console not in logger.handlers:
        logger.addHandler(console)

    stamp = timestamp if timestamp is not None else time.asctime()
    logger.log(level, f"{stamp} - {loggername} - {levels[level]} - {_thread_tag()} - {text}")


def logStructured(record: Mapping[str, Any], level: int = INFO, loggername: str = None):
    """Log ``record`` as compact JSON with sorted keys so step logs diff cleanly between runs."""
    logMessage(json.dumps(record, sort_keys=True, separators=(",", ":")), level=level, loggername=loggername or _caller())


def logError(exception: Exception, value=None, tb=None, **kwargs):
    """
    Log an exception and its traceback at ERROR. Installed as ``sys.excepthook``, so it also accepts the
    ``(type, value, traceback)`` triple.
    """
    value = value or exception
    tb = tb or getattr(value, "__traceback__", None)
    exc_type = exception if isinstance(exception, type) else type(exception)
    kwargs["level"] = ERROR
    kwargs.setdefault("loggername", _caller())

    logMessage("\n", "The following error was handled safely by ttaforge. It is displayed here for debugging.", **kwargs)
    if tb is not None:
        logMessage("\n", *traceback.format_exception(exc_type, value, tb), **kwargs)
    else:
        logMessage("\n", *traceback.format_exception_only(exc_type, value), **kwargs)


sys.excepthook = logError

try:
    faulthandler.enable()
except (RuntimeError, ValueError, AttributeError):
    # no usable stderr (pythonw, some CI runners)
    faulthandler.enable(file=open(os.path.join(paths.log_dir, "crash_log.log"), "w"))
