"""Tree-ordered inclusive associative scans with pluggable executors.

Every scan, sequential or parallel, walks the same balanced combination
tree: an upsweep that reduces adjacent pairs level by level, followed by a
downsweep that turns the partial reductions into inclusive prefix (or
suffix) values. Inputs are padded to the next power of two with identity
elements, which keeps the tree regular and the layer count exactly
``2 * ceil(log2(next_pow2(n)))``.

Because both executors apply combines in the identical tree order, and
numpy's batched linalg kernels are bitwise-deterministic per slice, the
sequential and parallel executors produce bit-identical outputs. That
exactness is load-bearing: the LQR factorization cache is validated by
bitwise comparison against the uncached path.

Batches are tuples of ndarrays whose leading axis indexes scan positions.
A combine kernel maps ``(left, right) -> (out, aux)`` where ``aux`` is an
optional tuple of per-combine intermediates recorded for later replay.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Batch = tuple  # tuple of ndarrays, leading axis = scan position


def next_pow2(n: int) -> int:
    if n < 1:
        raise ValueError("length must be >= 1")
    return 1 << (n - 1).bit_length()


def scan_depth(length: int) -> int:
    """Combine layers (upsweep + downsweep) executed for a scan of `length`."""
    if length < 1:
        raise ValueError("length must be >= 1")
    return 2 * (next_pow2(length).bit_length() - 1)


@dataclass
class LayerCounter:
    """Instrumentation attached to a scan: layers and combines executed."""

    layers: int = 0
    combines: int = 0


def _blen(batch: Batch) -> int:
    return len(batch[0])


def _gather(batch: Batch, idx) -> Batch:
    # Fancy indexing only: always yields fresh C-contiguous arrays, which keeps
    # per-slice BLAS calls bitwise-identical between executors.
    idx = np.asarray(idx, dtype=np.intp)
    return tuple(a[idx] for a in batch)


def _concat(*batches: Batch) -> Batch:
    batches = [b for b in batches if b is not None and len(b) > 0]
    if not batches:
        return ()
    return tuple(np.concatenate(parts, axis=0) for parts in zip(*batches))


def _interleave(even: Batch, odd: Batch) -> Batch:
    out = []
    for e, o in zip(even, odd):
        merged = np.empty((len(e) + len(o),) + e.shape[1:], dtype=e.dtype)
        merged[0::2] = e
        merged[1::2] = o
        out.append(merged)
    return tuple(out)


class SequentialExecutor:
    """Runs each layer's combines one element at a time, in tree order."""

    threads = 1

    def run_layer(self, kernel, *operands: Batch):
        n = _blen(operands[0])
        outs, auxs = [], []
        for i in range(n):
            o, a = kernel(*(_gather(b, [i]) for b in operands))
            outs.append(o)
            auxs.append(a)
        return _concat(*outs), _concat(*auxs)


class ParallelExecutor:
    """Runs each layer's combines as batched kernels, chunked across threads.

    All of a layer's combines are independent, so they are stacked and handed
    to vectorized numpy kernels; with more than one thread the stack is split
    into contiguous chunks processed concurrently (numpy releases the GIL
    inside BLAS). Chunked and unchunked results are bitwise identical.
    """

    def __init__(self, threads: int | None = None, chunk_threshold: int = 64):
        if threads is None:
            threads = int(os.environ.get("SOLVER_THREADS", "0")) or (os.cpu_count() or 1)
        self.threads = max(1, int(threads))
        self.chunk_threshold = chunk_threshold
        self._pool: ThreadPoolExecutor | None = None

    def _ensure_pool(self) -> ThreadPoolExecutor:
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.threads)
        return self._pool

    def run_layer(self, kernel, *operands: Batch):
        n = _blen(operands[0])
        if self.threads == 1 or n < self.chunk_threshold:
            return kernel(*operands)
        chunks = np.array_split(np.arange(n, dtype=np.intp), min(self.threads, n))
        pool = self._ensure_pool()
        futures = [
            pool.submit(kernel, *(_gather(b, c) for b in operands)) for c in chunks
        ]
        results = [f.result() for f in futures]
        return _concat(*(r[0] for r in results)), _concat(*(r[1] for r in results))


_default_executor: ParallelExecutor | None = None


def default_executor() -> ParallelExecutor:
    global _default_executor
    if _default_executor is None:
        _default_executor = ParallelExecutor()
    return _default_executor


def tree_scan(
    batch: Batch,
    kernel: Callable,
    identity_fn: Callable[[int], Batch],
    *,
    direction: str = "forward",
    executor=None,
    counter: LayerCounter | None = None,
    record: bool = False,
    replay_aux: list | None = None,
):
    """Inclusive scan of `batch` under `kernel`, in fixed tree order.

    kernel(left, right[, aux]) -> (combined, aux_out); aux_out may be ().
    With record=True the per-layer aux batches are returned for later replay;
    with replay_aux the kernel is invoked with the recorded aux as a third
    operand, layer by layer, in the identical order.

    Returns (outputs, recorded_aux_layers or None).
    """
    n = _blen(batch)
    if n == 0:
        raise ValueError("empty scan")
    if direction not in ("forward", "reverse"):
        raise ValueError(f"unknown direction {direction!r}")
    executor = executor or default_executor()
    counter = counter if counter is not None else LayerCounter()

    reverse = direction == "reverse"
    if reverse:
        batch = _gather(batch, np.arange(n - 1, -1, -1))
        inner = kernel
        kernel = lambda left, right, *aux: inner(right, left, *aux)  # noqa: E731

    npad = next_pow2(n)
    if npad > n:
        batch = _concat(batch, identity_fn(npad - n))

    recorded: list | None = [] if record else None
    layer = 0

    def run(left: Batch, right: Batch):
        nonlocal layer
        ops = (left, right)
        if replay_aux is not None:
            ops = ops + (replay_aux[layer],)
        out, aux = executor.run_layer(kernel, *ops)
        if recorded is not None:
            recorded.append(aux)
        counter.combines += _blen(left)
        layer += 1
        return out

    def skip_layer():
        nonlocal layer
        if recorded is not None:
            recorded.append(())
        layer += 1

    # Upsweep: levels[d][m] reduces leaves [m*2^d, (m+1)*2^d).
    levels = [batch]
    m = npad
    while m > 1:
        cur = levels[-1]
        evens = _gather(cur, np.arange(0, m, 2))
        odds = _gather(cur, np.arange(1, m, 2))
        levels.append(run(evens, odds))
        counter.layers += 1
        m //= 2

    # Downsweep: inc[d][m] is the inclusive reduction of everything up to the
    # end of node (d, m)'s subtree. Right children inherit the parent value;
    # left children combine the left-neighbour's inc with their own upsweep
    # value, except the leftmost which has no prefix.
    inc = levels[-1]
    for d in range(len(levels) - 1, 0, -1):
        width = _blen(inc)
        left_vals = _gather(levels[d - 1], np.arange(0, 2 * width, 2))
        if width > 1:
            combined = run(
                _gather(inc, np.arange(width - 1)),
                _gather(left_vals, np.arange(1, width)),
            )
            inc_left = _concat(_gather(left_vals, [0]), combined)
        else:
            inc_left = _gather(left_vals, [0])
            skip_layer()
        inc = _interleave(inc_left, inc)
        counter.layers += 1

    out = _gather(inc, np.arange(n))
    if reverse:
        out = _gather(out, np.arange(n - 1, -1, -1))
    return out, recorded


def inclusive_scan(
    elements: Sequence,
    combine: Callable,
    identity,
    direction: str = "forward",
    executor=None,
    counter: LayerCounter | None = None,
) -> list:
    """Generic inclusive scan over arbitrary Python elements.

    `combine` must be associative and must not mutate its arguments;
    `identity` must satisfy combine(identity, x) == x == combine(x, identity).
    Forward returns prefix reductions, reverse returns suffix reductions,
    both in the fixed combination-tree order shared by all executors.
    """
    items = list(elements)
    if not items:
        raise ValueError("empty scan")

    def as_obj_array(vals):
        arr = np.empty(len(vals), dtype=object)
        for i, v in enumerate(vals):
            arr[i] = v
        return arr

    def kern(left, right):
        lv, rv = left[0], right[0]
        out = np.empty(len(lv), dtype=object)
        for i in range(len(lv)):
            out[i] = combine(lv[i], rv[i])
        return (out,), ()

    def ident(count):
        return (as_obj_array([identity] * count),)

    out, _ = tree_scan(
        (as_obj_array(items),),
        kern,
        ident,
        direction=direction,
        executor=executor,
        counter=counter,
    )
    return list(out[0])
