# global imports
import asyncio
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

LOG_FORMAT = "[%(asctime)s]: %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def thread_count():
    """number of workers allowed by SDM_THREADS (default: all cores)"""
    value = os.environ.get("SDM_THREADS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            logging.getLogger(__name__).warning("ignoring SDM_THREADS=%r", value)
    return os.cpu_count() or 1


class Session:
    """Runtime context shared by a pipeline run
    :param seed: root seed, every random stream is derived from it
    :param verbose: True to active verbose mode
    :param logfile: a file object or similar
    :param threads: worker cap, defaults to SDM_THREADS
    """

    def __init__(self, seed=0, verbose=False, logfile=False, threads=None):
        self.seed = int(seed)
        self.verbose = verbose
        self.logfile = logfile
        self.threads = threads or thread_count()
        self.counter = 0
        # unregistered, so it is collected with the session
        self.logger = logging.Logger("sdmcalibrate.session", logging.INFO)
        formatter = logging.Formatter(LOG_FORMAT, DATE_FORMAT)
        if verbose:
            handler = logging.StreamHandler(sys.stderr)
            handler.setFormatter(formatter)
            self.logger.addHandler(handler)
        if logfile:
            handler = logging.StreamHandler(logfile)
            handler.setFormatter(formatter)
            self.logger.addHandler(handler)

    def close(self):
        """detach the log handlers; the logfile itself stays open for its owner"""
        for handler in list(self.logger.handlers):
            self.logger.removeHandler(handler)
            handler.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def write_log(self, text):
        """write text in the log file"""
        self.logger.info(text)

    def progress(self, **fields):
        """write a machine-parseable key=value progress line"""
        self.write_log(" ".join("%s=%s" % (k, _fmt(v)) for k, v in fields.items()))

    def rng(self, *stream):
        """independent generator for a named stream of integers"""
        return np.random.default_rng([self.seed, *[int(s) for s in stream]])

    def count(self, n=1):
        self.counter += n

    def map(self, func, items):
        """apply func to every item on the worker pool, results in input order"""
        items = list(items)
        if self.threads <= 1 or len(items) <= 1:
            return [func(item) for item in items]

        async def run_all(loop, executor):
            futures = [loop.run_in_executor(executor, func, item) for item in items]
            return [await future for future in futures]

        loop = asyncio.new_event_loop()
        try:
            with ThreadPoolExecutor(max_workers=self.threads) as executor:
                return loop.run_until_complete(run_all(loop, executor))
        finally:
            loop.close()


class Timer:
    def __init__(self):
        self.start = time.time()

    @property
    def elapsed(self):
        return round(time.time() - self.start)


def _fmt(value):
    if isinstance(value, float):
        return "%.6g" % value
    return str(value)
