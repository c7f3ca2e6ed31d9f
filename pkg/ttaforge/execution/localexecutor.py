import dask.local
import dask.threaded
from .daskexecutor import DaskExecutor


class LocalExecutor(DaskExecutor):
    def get(self, dsk, keys, client=None):
        if not client:
            return dask.threaded.get(dsk, keys)
        return super(LocalExecutor, self).get(dsk, keys, client)


class SynchronousExecutor(DaskExecutor):
    def get(self, dsk, keys, client=None):
        return dask.local.get_sync(dsk, keys)
