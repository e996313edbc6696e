"""
A pool of worker threads to run shards of a computation (rows of a neighbor
table, chunks of surfaces to encode, slices of an evaluation pass).
Every shard writes a disjoint part of the output, so the result does not
depend on the number of threads.
"""
import os
from threading import Thread
from queue import Queue, Empty


class ShardPoolAlreadyStartedError(Exception):
    """
    Raise the exception when a user tries to start a pool
    which has been already started.
    """
    pass


class ShardPoolAlreadyStoppedError(Exception):
    """
    Raise the exception when a user tries to stop a pool
    which has been already stopped.
    """
    pass


class ShardPoolNotAliveError(Exception):
    """
    Raise the exception when a user tries to run shards
    with a pool whose worker threads are not alive.
    """
    pass


def resolve_threads(threads):
    """
    Return the number of worker threads for a `--threads` value
    (0 means one thread per CPU).
    """
    if threads is None or threads <= 0:
        return os.cpu_count() or 1
    return threads


class _Job:
    """
    A class describing one shard to run.
    """
    def __init__(self, index, func, shard):
        self.index = index
        self.func = func
        self.shard = shard


class ShardPool:
    """
    A class to run shards in worker threads.
    With one thread the shards run inline, in order, in the calling thread.
    """
    def __init__(self, threads=1, job_timeout=0.01):
        """
        Parameters
        ----------
        threads: int
            A number of worker threads (0 = one per CPU).
        job_timeout: float
            A time in seconds to wait for a job before checking the exit flag.
        """
        self._threads = resolve_threads(threads)
        self._job_timeout = job_timeout
        self._workers = None
        self._q_exit = Queue(maxsize=1)
        self._jobs = Queue()
        self._results = Queue()


    def __enter__(self):
        self.start()
        return self


    def __exit__(self, *exc_info):
        if self._workers is not None:
            self.stop()


    @property
    def threads(self):
        return self._threads


    @property
    def alive(self):
        """
        Return True if the pool has been started (or runs inline).
        """
        return self._threads == 1 or self._workers is not None


    @staticmethod
    def _job(jobs, results, q_exit, job_timeout):
        """
        The worker loop.
        Parameters
        ----------
        jobs: Queue
            Jobs to run.
        results: Queue
            (index, result, exception) triples of finished jobs.
        """
        while True:
            try:
                job = jobs.get(timeout=job_timeout)
            except Empty:
                pass
            else:
                try:
                    results.put((job.index, job.func(job.shard), None))
                except Exception as e:
                    results.put((job.index, None, e))
            finally:
                if q_exit.qsize() > 0:
                    return


    def start(self):
        """
        Start the worker threads.
        """
        if self._workers is not None:
            raise ShardPoolAlreadyStartedError('The pool has been already started.')
        if self._threads == 1:
            return
        self._workers = []
        for _ in range(self._threads):
            t = Thread(target=self._job,
                       args=(self._jobs, self._results, self._q_exit, self._job_timeout))
            t.daemon = True
            t.start()
            self._workers.append(t)


    def map(self, func, shards):
        """
        Run func on every shard and return the results in shard order.
        The first exception raised by a shard is re-raised here.
        Parameters
        ----------
        func: callable
            A function of one shard.
        shards: list
            Shards to run.
        """
        shards = list(shards)
        if self._threads == 1 or len(shards) <= 1:
            return [func(shard) for shard in shards]
        if self._workers is None:
            raise ShardPoolNotAliveError('The pool is not alive now.')
        for index, shard in enumerate(shards):
            self._jobs.put(_Job(index, func, shard))
        results = [None] * len(shards)
        errors = {}
        for _ in range(len(shards)):
            index, result, error = self._results.get()
            if error is not None:
                errors[index] = error
            results[index] = result
        if errors:
            raise errors[min(errors)]
        return results


    def stop(self, timeout=None):
        """
        Stop the worker threads.
        It returns True if all the threads have been terminated,
        otherwise, in case of timeout, it returns False.
        """
        if self._threads == 1:
            return True
        if self._workers is None:
            raise ShardPoolAlreadyStoppedError('The pool has been already stopped.')
        self._q_exit.put_nowait(None)
        for t in self._workers:
            t.join(timeout)
        self._q_exit.get_nowait()
        if not any(t.is_alive() for t in self._workers):
            self._workers = None
            return True
        return False


def run_shards(func, shards, threads=1):
    """
    Run func over shards with a temporary pool.
    """
    with ShardPool(threads) as pool:
        return pool.map(func, shards)
