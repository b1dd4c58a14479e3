"""Order-preserving process-pool map; serial when one worker is requested."""

from concurrent.futures import ProcessPoolExecutor

_workers = 1


def set_workers(n: int) -> None:
    global _workers
    _workers = max(1, int(n))


def pmap(fn, items, workers: int | None = None, chunksize: int = 16) -> list:
    items = list(items)
    n = _workers if workers is None else max(1, workers)
    if n == 1 or len(items) < 2 * chunksize:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items, chunksize=chunksize))
