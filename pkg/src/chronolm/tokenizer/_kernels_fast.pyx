# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled BPE kernels.

Behaviourally identical to ``_kernels_py``; see that module for the
contract.  Words stay Python tuples at the API boundary and are unboxed
into C arrays inside the loops.
"""
from libc.stdlib cimport malloc, free

PACK_SHIFT = 21
cdef int _SHIFT = 21


def backend_name():
    return "cython"


cdef long* _unbox(tuple word, long* stack_buf, Py_ssize_t stack_cap, Py_ssize_t* n_out) except NULL:
    cdef Py_ssize_t n = len(word)
    cdef long* buf
    if n <= stack_cap:
        buf = stack_buf
    else:
        buf = <long*> malloc(n * sizeof(long))
        if buf == NULL:
            raise MemoryError()
    cdef Py_ssize_t i
    for i in range(n):
        buf[i] = <long> word[i]
    n_out[0] = n
    return buf


def count_pairs(list words, list freqs):
    cdef dict counts = {}
    cdef dict index = {}
    cdef Py_ssize_t wid, i, n
    cdef long f
    cdef tuple word
    cdef object p, c
    cdef set s
    cdef long stack_buf[256]
    cdef long* buf
    for wid in range(len(words)):
        word = <tuple> words[wid]
        f = <long> freqs[wid]
        buf = _unbox(word, stack_buf, 256, &n)
        try:
            for i in range(n - 1):
                p = (buf[i], buf[i + 1])
                c = counts.get(p)
                if c is None:
                    counts[p] = f
                else:
                    counts[p] = <long> c + f
                s = <set> index.get(p)
                if s is None:
                    s = set()
                    index[p] = s
                s.add(wid)
        finally:
            if buf != stack_buf:
                free(buf)
    return counts, index


def merge_word(tuple word, long a, long b, long new_id):
    cdef Py_ssize_t n = 0, i, m
    cdef long stack_buf[256]
    cdef long out_stack[256]
    cdef long* buf = _unbox(word, stack_buf, 256, &n)
    cdef long* out
    if n <= 256:
        out = out_stack
    else:
        out = <long*> malloc(n * sizeof(long))
        if out == NULL:
            if buf != stack_buf:
                free(buf)
            raise MemoryError()
    cdef dict delta = {}
    cdef set present = set()
    cdef object p, d
    try:
        m = 0
        i = 0
        while i < n:
            if i < n - 1 and buf[i] == a and buf[i + 1] == b:
                out[m] = new_id
                i += 2
            else:
                out[m] = buf[i]
                i += 1
            m += 1
        for i in range(n - 1):
            p = (buf[i], buf[i + 1])
            d = delta.get(p)
            delta[p] = -1 if d is None else <long> d - 1
        for i in range(m - 1):
            p = (out[i], out[i + 1])
            d = delta.get(p)
            delta[p] = 1 if d is None else <long> d + 1
            present.add(p)
        new_word = tuple([out[i] for i in range(m)])
    finally:
        if buf != stack_buf:
            free(buf)
        if out != out_stack:
            free(out)
    delta = {p: d for p, d in delta.items() if d != 0}
    return new_word, delta, present


def encode_word(tuple word, dict ranks, long first_merge_id):
    cdef Py_ssize_t n = 0, i, best_i
    cdef long best_rank
    cdef long stack_buf[256]
    cdef long* sym = _unbox(word, stack_buf, 256, &n)
    cdef object r
    try:
        while n > 1:
            best_rank = -1
            best_i = -1
            for i in range(n - 1):
                r = ranks.get((sym[i] << _SHIFT) | sym[i + 1])
                if r is not None and (best_rank < 0 or <long> r < best_rank):
                    best_rank = <long> r
                    best_i = i
            if best_i < 0:
                break
            sym[best_i] = first_merge_id + best_rank
            for i in range(best_i + 1, n - 1):
                sym[i] = sym[i + 1]
            n -= 1
        result = tuple([sym[i] for i in range(n)])
    finally:
        if sym != stack_buf:
            free(sym)
    return result
