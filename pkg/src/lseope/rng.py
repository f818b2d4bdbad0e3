"""Counter-based random streams.

Every experiment owns one :class:`RngHandle`. Trial ``i`` draws from
``substream(i)``, a Philox generator with the same key and a counter block
offset by ``i + 1``, so trials are independent of thread scheduling and of
the number of workers.
"""
import numpy as np

_COUNTER_WORDS = 4


class RngHandle:
    """Seeded Philox source with reproducible per-trial substreams."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._key = np.random.SeedSequence(self.seed).generate_state(2, dtype=np.uint64)
        self.generator = self._make(0)

    def _make(self, block: int) -> np.random.Generator:
        counter = np.zeros(_COUNTER_WORDS, dtype=np.uint64)
        counter[-1] = np.uint64(block)
        return np.random.Generator(np.random.Philox(key=self._key, counter=counter))

    def substream(self, i: int) -> np.random.Generator:
        if i < 0:
            raise ValueError("substream index must be non-negative")
        return self._make(i + 1)

    def derive(self, salt: int) -> "RngHandle":
        """Handle for a separate purpose (e.g. tuning) with an unrelated key."""
        return RngHandle(self.seed ^ (int(salt) & 0x7FFFFFFFFFFFFFFF))


def as_generator(rng) -> np.random.Generator:
    """Accept an :class:`RngHandle`, a ``Generator`` or an integer seed."""
    if isinstance(rng, RngHandle):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, (int, np.integer)):
        return RngHandle(0 if rng is None else int(rng)).generator
    raise TypeError(f"cannot build a generator from {type(rng).__name__}")
