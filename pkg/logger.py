"""Logging configuration for UberNet."""
import functools
import logging
import sys
import time

# Verbosity levels (repeatable -d flag on run.py)
# -d = WARNING (errors + warnings, e.g. constant features, failed folds)
# -dd = INFO (+ epoch losses, fold scores, artifact paths)
# -ddd = DEBUG (+ per-fold / per-job detail, normalizer fits)
# -dddd = TRACE (+ command timing, per-batch losses, imputed cells)
# -ddddd = ALL (+ markdown and other third-party logs)

TRACE = 5  # Custom level below DEBUG
logging.addLevelName(TRACE, 'TRACE')

DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


class UberNetLogger(logging.Logger):
    """Logger with a TRACE level for per-batch and per-cell detail."""

    def trace(self, msg, *args, **kwargs):
        if self.isEnabledFor(TRACE):
            self._log(TRACE, msg, args, **kwargs)


logging.setLoggerClass(UberNetLogger)

# verbosity -> (level, format)
VERBOSITY = {
    0: (logging.ERROR, '%(message)s'),
    1: (logging.WARNING, '%(levelname)s: %(message)s'),
    2: (logging.INFO, '%(asctime)s [%(levelname)s] %(name)s: %(message)s'),
    3: (logging.DEBUG, '%(asctime)s [%(levelname)s] %(name)s (%(filename)s:%(lineno)d): %(message)s'),
    4: (TRACE, '%(asctime)s [%(levelname)s] %(name)s (%(filename)s:%(lineno)d) [%(funcName)s]: %(message)s'),
}
MAX_VERBOSITY = 5

# markdown logs extension loading at DEBUG under this name
QUIET_LOGGERS = ('MARKDOWN',)


def setup_logging(verbosity: int = 0) -> logging.Logger:
    """
    Configure the `ubernet` logger for a -d count.

    Args:
        verbosity: Number of 'd' flags; 0 shows errors only, 4 shows TRACE,
            5 also lets third-party loggers through the root logger

    Returns:
        The `ubernet` logger
    """
    verbosity = max(0, min(verbosity, MAX_VERBOSITY))
    level, fmt = VERBOSITY[min(verbosity, 4)]

    if verbosity >= MAX_VERBOSITY:
        logging.basicConfig(level=level, format=fmt, datefmt=DATE_FORMAT,
                            handlers=[logging.StreamHandler(sys.stderr)])
    else:
        for name in QUIET_LOGGERS:
            logging.getLogger(name).setLevel(logging.WARNING)

    logger = logging.getLogger('ubernet')
    logger.setLevel(level)
    logger.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(fmt, datefmt=DATE_FORMAT))
    logger.addHandler(handler)

    if verbosity >= 2:
        logger.info(f"Logging initialized at level {logging.getLevelName(level)} (verbosity={verbosity})")
    return logger


def get_logger(name: str = None) -> logging.Logger:
    """Logger for a module: get_logger('train') -> 'ubernet.train'."""
    if name:
        return logging.getLogger(f'ubernet.{name}')
    return logging.getLogger('ubernet')


def log_call(logger: logging.Logger):
    """
    Trace a command's entry and exit with its wall time.

    Failures are logged at DEBUG with the elapsed time and re-raised; the
    caller reports them.
    """
    def decorator(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            logger.log(TRACE, f">>> {func.__name__}() called")
            started = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                logger.debug(f"!!! {func.__name__}() raised {type(e).__name__} "
                             f"after {time.perf_counter() - started:.2f}s: {e}")
                raise
            logger.log(TRACE, f"<<< {func.__name__}() returned after {time.perf_counter() - started:.2f}s")
            return result
        return wrapper
    return decorator
