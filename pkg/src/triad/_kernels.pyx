# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Must stay bit-identical to ``_kernels_py``."""

from libc.stdint cimport int64_t, uint64_t


cdef extern from "<time.h>" nogil:
    ctypedef long time_t
    cdef struct timespec:
        time_t tv_sec
        long tv_nsec
    int clock_gettime(int clk_id, timespec *tp)
    int CLOCK_MONOTONIC


cdef int64_t I62 = (<int64_t>1) << 62
cdef int64_t FP_LIMIT = (<int64_t>1) << 34


cdef inline int64_t _mul_fixed(int64_t x, int64_t fp) noexcept nogil:
    # x * fp / 2**32, round half to even; x < 2**62, fp < 2**34
    cdef uint64_t ux = <uint64_t>x
    cdef uint64_t hi = (<uint64_t>fp) >> 32
    cdef uint64_t lo = (<uint64_t>fp) & 0xFFFFFFFFu
    cdef uint64_t xh = ux >> 32
    cdef uint64_t xl = ux & 0xFFFFFFFFu
    cdef uint64_t p = xl * lo
    cdef uint64_t res = ux * hi + xh * lo + (p >> 32)
    cdef uint64_t frac = p & 0xFFFFFFFFu
    if frac > 0x80000000u or (frac == 0x80000000u and (res & 1u)):
        res += 1
    return <int64_t>res


cdef inline int64_t _signed_mul_fixed(int64_t x, int64_t fp) noexcept nogil:
    if x >= 0:
        return _mul_fixed(x, fp)
    return -_mul_fixed(-x, fp)


def mul_fixed(x, fp):
    if not (-I62 < x < I62) or not (0 <= fp < FP_LIMIT):
        raise OverflowError("operand outside kernel range")
    return _signed_mul_fixed(x, fp)


def sweep_refresh(int64_t anchor_nanos, int64_t anchor_ticks, int64_t ratio_fp,
                  int64_t floor_nanos, int64_t ticks0, int64_t tick_q,
                  int64_t tick_r, int64_t tick_rem0, int64_t tick_div,
                  int64_t n, int64_t oracle0, int64_t oracle_step,
                  int64_t sample_every, int64_t sample_phase):
    cdef int64_t i
    cdef int64_t ticks = ticks0
    cdef int64_t rem = tick_rem0
    cdef int64_t value
    cdef int64_t last = floor_nanos
    cdef int64_t oracle = oracle0
    cdef int64_t err
    cdef int64_t err_sum = 0
    cdef int64_t abs_sum = 0
    cdef int64_t max_abs = 0
    cdef int64_t max_signed = 0
    cdef int64_t phase = sample_phase
    samples = []
    if n <= 0:
        return last, ticks0, 0, 0, 0, 0, samples
    if tick_div <= 0 or ratio_fp < 0 or ratio_fp >= FP_LIMIT:
        raise ValueError("bad sweep parameters")
    for i in range(n):
        if i:
            ticks += tick_q
            rem += tick_r
            if rem >= tick_div:
                ticks += 1
                rem -= tick_div
            oracle += oracle_step
        value = anchor_nanos + _signed_mul_fixed(ticks - anchor_ticks, ratio_fp)
        if value > last:
            last = value
        err = last - oracle
        err_sum += err
        if err < 0:
            abs_sum -= err
            if -err > max_abs:
                max_abs = -err
                max_signed = err
        else:
            abs_sum += err
            if err > max_abs:
                max_abs = err
                max_signed = err
        if sample_every > 0:
            if phase == 0:
                samples.append((oracle, last, err))
            phase += 1
            if phase == sample_every:
                phase = 0
    return last, ticks, err_sum, abs_sum, max_abs, max_signed, samples


cdef inline int64_t _now_ns() noexcept nogil:
    cdef timespec ts
    clock_gettime(CLOCK_MONOTONIC, &ts)
    return (<int64_t>ts.tv_sec) * 1000000000 + ts.tv_nsec


def count_ops_window(int64_t target_ns, int64_t max_gap_ns, int64_t preempt_ns=50000):
    """Busy-add until ``target_ns`` of unpreempted monotonic time has passed.

    Returns ``(ops, active_ns, interrupted)``. A step longer than
    ``preempt_ns`` means the thread was descheduled: its time and its
    operations are left out. A gap longer than ``max_gap_ns`` is treated
    as an exit.
    """
    cdef int64_t prev, now, step, ops = 0, acc = 0, active = 0
    cdef int j
    cdef bint interrupted = False
    with nogil:
        prev = _now_ns()
        while active < target_ns:
            for j in range(64):
                acc += j
            now = _now_ns()
            step = now - prev
            prev = now
            if step > max_gap_ns:
                interrupted = True
            if step <= preempt_ns:
                ops += 64
                active += step
    if acc < 0:
        ops += 1
    return ops, active, interrupted
