"""
streams.py

Pull-based, memoizing infinite streams. A stream forces items in order and
keeps them, so reading item k twice returns the same object. Pulls are
serialized by a lock; the producer runs only while the lock is held.
"""
import itertools
import threading
from typing import Callable, Generic, Iterable, Iterator, List, Optional, TypeVar

from .errors import ParameterError

Item = TypeVar('Item')


class MemoizedStream(Generic[Item]):

    def __init__(self, source: Callable[[], Iterable[Item]]):
        self._source = source
        self._iterator: Optional[Iterator[Item]] = None
        self._memo: List[Item] = []
        self._lock = threading.RLock()

    def _check_item(self, item: Item) -> Item:
        return item

    def item(self, k: int) -> Item:
        if k < 0:
            raise ParameterError(f"Stream index must be nonnegative, got {k}")
        with self._lock:
            if self._iterator is None:
                self._iterator = iter(self._source())
            while len(self._memo) <= k:
                try:
                    produced = next(self._iterator)
                except StopIteration:
                    raise RuntimeError(f"Stream ended after {len(self._memo)} items; streams must be infinite")
                self._memo.append(self._check_item(produced))
            return self._memo[k]

    def head(self, count: int) -> List[Item]:
        """The first `count` items."""
        if count <= 0:
            return []
        self.item(count - 1)
        with self._lock:
            return list(self._memo[:count])

    @property
    def pulled(self) -> int:
        return len(self._memo)

    def __iter__(self) -> Iterator[Item]:
        for k in itertools.count():
            yield self.item(k)
