from functools import partial
from typing import Any, Callable, Iterable, List

from ttaforge import msg


class DaskExecutor(object):
    """
    Runs independent per-item tasks through a dask scheduler and returns their results in submission order.

    Each item becomes one node of a flat dask graph ``{key: (fn(item),)}``; the graph is handed to the scheduler's
    ``get``. With no scheduler configured a ``distributed.Client`` is started lazily.
    """

    def __init__(self):
        super(DaskExecutor, self).__init__()
        self.client = None

    def get(self, dsk, keys, client=None):
        if client is None:
            if self.client is None:
                import distributed

                self.client = distributed.Client(processes=False)
            client = self.client
        return client.get(dsk, keys)

    def map(self, fn: Callable[[Any], Any], items: Iterable[Any], client=None) -> List[Any]:
        items = list(items)
        if not items:
            return []

        keys = [f"task-{i}" for i in range(len(items))]
        # partials keep dask from walking into the payloads looking for keys
        dsk = {key: (partial(fn, item),) for key, item in zip(keys, items)}

        result = self.get(dsk, keys, client=client)

        msg.logMessage(f"{type(self).__name__} finished {len(keys)} tasks", level=msg.DEBUG)

        return list(result)

    def close(self):
        if self.client is not None:
            self.client.close()
            self.client = None
