from time import perf_counter_ns


class Timer:
    """Wall-clock stopwatch; reads the running time when not yet stopped"""

    def __init__(self, start: bool = False) -> None:
        self._t_start = None
        self._t_stop = None

        if start:
            self.start()

    def start(self):
        self._t_start = perf_counter_ns()
        self._t_stop = None

    def stop(self):
        self._t_stop = perf_counter_ns()

    def seconds_elapsed(self, decimals: int = 5) -> float:
        if self._t_start is None:
            return 0.0
        end = self._t_stop if self._t_stop is not None else perf_counter_ns()
        return round(1e-9 * (end - self._t_start), decimals)

    def __enter__(self) -> "Timer":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()
