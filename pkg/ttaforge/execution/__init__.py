from .daskexecutor import DaskExecutor
from .localexecutor import LocalExecutor, SynchronousExecutor

# Global executor to use; replaced by the command line according to the ``executor`` config key
executor = LocalExecutor()

executors = {"local": LocalExecutor, "sync": SynchronousExecutor, "distributed": DaskExecutor}


def make_executor(name: str) -> DaskExecutor:
    try:
        return executors[name]()
    except KeyError:
        raise ValueError(f"Unknown executor {name!r}; choose one of {sorted(executors)}")
