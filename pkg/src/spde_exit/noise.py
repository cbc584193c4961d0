"""
Reproducible space-time white noise.

Increments are a pure function of ``(root_seed, spawn_key, step)``: the
stream key selects a Philox key, and steps are grouped in blocks of
``BLOCK_STEPS`` whose index is written into the Philox counter.  Replaying a
trajectory, or generating it on another worker in another order, gives the
same bits.

On a grid with spacing ``h`` the white-noise increment over ``dt`` is a field
of independent ``N(0, dt / h)`` values, one per node and component.
"""
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

BLOCK_STEPS = 64


@lru_cache(maxsize=4096)
def _philox_key(root_seed, spawn_key):
    seq = np.random.SeedSequence(int(root_seed) & (2**64 - 1), spawn_key=tuple(spawn_key))
    return seq.generate_state(2, np.uint64)


def standard_block(root_seed, spawn_key, block, shape):
    """Standard normals for steps ``block*BLOCK_STEPS ...`` of one stream."""
    bits = np.random.Philox(key=_philox_key(int(root_seed), tuple(spawn_key)),
                            counter=np.array([0, 0, int(block), 0], dtype=np.uint64))
    return np.random.Generator(bits).standard_normal((BLOCK_STEPS,) + tuple(shape))


@dataclass
class NoiseStream:
    """One trajectory's noise source.

    ``spawn_key`` identifies the stream below ``root_seed``; ``step_counter`` is
    the next step to be drawn.  Copies are cheap and independent.
    """

    root_seed: int
    spawn_key: tuple = ()
    step_counter: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def trajectory_index(self):
        return self.spawn_key[-1] if self.spawn_key else 0

    def standard(self, step, shape):
        block, offset = divmod(int(step), BLOCK_STEPS)
        key = (block, tuple(shape))
        cached = self._cache.get("block")
        if cached is None or cached[0] != key:
            cached = (key, standard_block(self.root_seed, self.spawn_key, block, shape))
            self._cache["block"] = cached
        return cached[1][offset]

    def fork(self):
        return NoiseStream(self.root_seed, self.spawn_key, self.step_counter)


def split_stream(root, trajectory_index):
    """Child stream ``trajectory_index`` of ``root``; ``root`` is left untouched."""
    if trajectory_index < 0:
        raise ValueError("trajectory index must be nonnegative")
    return NoiseStream(root.root_seed, tuple(root.spawn_key) + (int(trajectory_index),))


def increment_scale(grid, dt):
    return np.sqrt(dt / grid.spacing)


def sample_increment(stream, grid, dt):
    """Next white-noise increment of ``stream`` on ``grid``; advances the stream."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    z = stream.standard(stream.step_counter, grid.shape)
    stream.step_counter += 1
    return increment_scale(grid, dt) * z


def increment_at(stream, grid, dt, step):
    """Increment number ``step`` of ``stream`` without touching its counter."""
    return increment_scale(grid, dt) * stream.standard(step, grid.shape)


class BatchNoise:
    """Increments for a batch of streams advanced in lockstep.

    All streams must sit at the same step.  ``draw(active)`` returns the next
    increment of the streams flagged in ``active`` (all by default); the
    others are left behind and must not be drawn from again.
    """

    def __init__(self, streams, grid, dt):
        self.streams = list(streams)
        steps = {s.step_counter for s in self.streams}
        if len(steps) > 1:
            raise ValueError("batched streams must share the same step counter")
        self.step = steps.pop() if steps else 0
        self.grid = grid
        self.scale = increment_scale(grid, dt)
        self._block = None
        self._buf = np.empty((len(self.streams), BLOCK_STEPS) + grid.shape)
        self._loaded = np.zeros(len(self.streams), dtype=bool)
        self.counters = np.full(len(self.streams), self.step, dtype=np.int64)

    def draw(self, active=None):
        if active is None:
            active = np.ones(len(self.streams), dtype=bool)
        block, offset = divmod(self.step, BLOCK_STEPS)
        if block != self._block:
            self._block = block
            self._loaded[:] = False
        for i in np.flatnonzero(active & ~self._loaded):
            s = self.streams[i]
            self._buf[i] = standard_block(s.root_seed, s.spawn_key, block, self.grid.shape)
            self._loaded[i] = True
        self.counters[active] = self.step + 1
        self.step += 1
        return self.scale * self._buf[active, offset]

    def sync(self):
        """Write the per-stream step counters back onto the stream objects."""
        for s, c in zip(self.streams, self.counters):
            s.step_counter = int(c)
