from __future__ import annotations
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from hashlib import sha256
import logging
import os
from typing import Any, Optional, TypeVar
from zlib import crc32
from anyio import CapacityLimiter, create_task_group, to_thread
import anyio
import attr
import numpy as np
import torch

log = logging.getLogger(__package__)

TRACE = 5

T = TypeVar("T")
U = TypeVar("U")

MASK64 = (1 << 64) - 1


def stream_key(name: str | int) -> int:
    if isinstance(name, int):
        return name & MASK64
    return crc32(name.encode("utf-8"))


def substream(seed: int, *names: str | int) -> np.random.Generator:
    """
    Return a generator for the named sub-stream of ``seed``.  The same seed
    and names always give the same stream; different names give independent
    streams.
    """
    return np.random.default_rng([seed & MASK64, *map(stream_key, names)])


def draw_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 1 << 64, dtype=np.uint64))


@contextmanager
def torch_seeded(seed: int, *names: str | int) -> Iterator[None]:
    # Module initializers draw from torch's global generator.
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(substream(seed, *names).integers(0, 1 << 62)))
        yield


def array_digest(*arrays: Any) -> str:
    digest = sha256()
    for a in arrays:
        if isinstance(a, torch.Tensor):
            a = a.detach().cpu().numpy()
        a = np.ascontiguousarray(a)
        digest.update(str(a.dtype).encode())
        digest.update(repr(a.shape).encode())
        digest.update(a.tobytes())
    return digest.hexdigest()


def amap_ordered(
    func: Callable[[T], U], items: Sequence[T], jobs: Optional[int] = None
) -> list[U]:
    """
    Apply ``func`` to every item in worker threads, at most ``jobs`` at a
    time, and return the results in input order.
    """
    if (jobs is not None and jobs <= 1) or len(items) <= 1:
        return [func(x) for x in items]
    return anyio.run(_amap_ordered, func, items, jobs)


async def _amap_ordered(
    func: Callable[[T], U], items: Sequence[T], jobs: Optional[int]
) -> list[U]:
    results: list[Optional[U]] = [None] * len(items)
    errors: dict[int, Exception] = {}
    limit = CapacityLimiter(jobs if jobs is not None else (os.cpu_count() or 1))

    async def run(i: int, x: T) -> None:
        try:
            results[i] = await to_thread.run_sync(func, x, limiter=limit)
        except Exception as e:
            errors[i] = e

    async with create_task_group() as tg:
        for i, x in enumerate(items):
            tg.start_soon(run, i, x)
    if errors:
        # Report the failure a sequential run would have hit first.
        raise errors[min(errors)]
    return results  # type: ignore[return-value]


@attr.define
class ImageReport:
    """
    Tally of a batch command over input images: which outputs were written
    for each source image and which of its outputs failed
    """

    written: dict[str, list[str]] = attr.Factory(dict)
    #: Source image → error message of each failed output
    errors: dict[str, list[str]] = attr.Factory(dict)

    def wrote(self, source: str, target: str) -> None:
        self.written.setdefault(source, []).append(target)

    def failed(self, source: str, error: str) -> None:
        self.errors.setdefault(source, []).append(error)

    @property
    def n_images(self) -> int:
        return len(self.written.keys() | self.errors.keys())

    @property
    def n_written(self) -> int:
        return sum(map(len, self.written.values()))

    @property
    def n_failed(self) -> int:
        return sum(map(len, self.errors.values()))

    @property
    def ok(self) -> bool:
        return self.n_written > 0 and not self.errors

    def summary(self, what: str) -> str:
        s = f"{self.n_written}/{self.n_written + self.n_failed} {what} written"
        if self.errors:
            s += f"; {len(self.errors)} of {self.n_images} input images had failures"
        return s
