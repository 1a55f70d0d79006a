"""Pure-Python twins of the compiled kernels in ``_kernels.pyx``.

Results must match the compiled versions exactly; ``tests/test_kernels.py``
checks both against each other.
"""

from __future__ import annotations

import time

_I62 = 1 << 62
_FP_LIMIT = 1 << 34
_HALF = 1 << 31
_MASK = (1 << 32) - 1


def _mul_unsigned(x: int, fp: int) -> int:
    q = (x * fp) >> 32
    frac = (x * fp) & _MASK
    if frac > _HALF or (frac == _HALF and q & 1):
        q += 1
    return q


def mul_fixed(x: int, fp: int) -> int:
    """``x * fp / 2**32`` rounded half to even (symmetric for negative x)."""
    if not (-_I62 < x < _I62) or not (0 <= fp < _FP_LIMIT):
        raise OverflowError("operand outside kernel range")
    if x >= 0:
        return _mul_unsigned(x, fp)
    return -_mul_unsigned(-x, fp)


def sweep_refresh(anchor_nanos, anchor_ticks, ratio_fp, floor_nanos, ticks0,
                  tick_q, tick_r, tick_rem0, tick_div, n, oracle0, oracle_step,
                  sample_every, sample_phase):
    samples = []
    if n <= 0:
        return floor_nanos, ticks0, 0, 0, 0, 0, samples
    if tick_div <= 0 or ratio_fp < 0 or ratio_fp >= _FP_LIMIT:
        raise ValueError("bad sweep parameters")
    ticks = ticks0
    rem = tick_rem0
    last = floor_nanos
    oracle = oracle0
    err_sum = abs_sum = max_abs = max_signed = 0
    phase = sample_phase
    for i in range(n):
        if i:
            ticks += tick_q
            rem += tick_r
            if rem >= tick_div:
                ticks += 1
                rem -= tick_div
            oracle += oracle_step
        dt = ticks - anchor_ticks
        if dt >= 0:
            value = anchor_nanos + _mul_unsigned(dt, ratio_fp)
        else:
            value = anchor_nanos - _mul_unsigned(-dt, ratio_fp)
        if value > last:
            last = value
        err = last - oracle
        err_sum += err
        a = -err if err < 0 else err
        abs_sum += a
        if a > max_abs:
            max_abs = a
            max_signed = err
        if sample_every > 0:
            if phase == 0:
                samples.append((oracle, last, err))
            phase += 1
            if phase == sample_every:
                phase = 0
    return last, ticks, err_sum, abs_sum, max_abs, max_signed, samples


def count_ops_window(target_ns: int, max_gap_ns: int, preempt_ns: int = 50_000):
    clock = time.perf_counter_ns
    prev = clock()
    ops = active = 0
    interrupted = False
    while active < target_ns:
        acc = 0
        for j in range(64):
            acc += j
        now = clock()
        step = now - prev
        prev = now
        if step > max_gap_ns:
            interrupted = True
        # descheduled steps count neither time nor work
        if step <= preempt_ns:
            ops += 64
            active += step
    return ops, active, interrupted
