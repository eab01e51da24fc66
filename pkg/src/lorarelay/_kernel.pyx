# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled slot loop. Must stay decision-for-decision identical to engine.World."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

from lorarelay import _counters as C

cdef enum:
    MAX_RELAYS = 2

cdef int P_NO_RELAY = C.NO_RELAY
cdef int P_IMMEDIATE = C.IMMEDIATE
cdef int P_UNCODED = C.UNCODED
cdef int P_SINGLE = C.SINGLE_RELAY
cdef int P_COOP = C.COOPERATIVE

cdef int K_RW_SLOTS = C.RW_SLOTS
cdef int K_RW_EMPTY = C.RW_EMPTY
cdef int K_RW_BOTH = C.RW_BOTH
cdef int K_RW_RELAY_ONLY = C.RW_RELAY_ONLY
cdef int K_RELAY_FRAMES = C.RELAY_FRAMES
cdef int K_RELAY_FRAMES_OK = C.RELAY_FRAMES_OK
cdef int K_RELAY_FRAMES_LOST = C.RELAY_FRAMES_LOST
cdef int K_DECODE_RECOVERED = C.DECODE_RECOVERED
cdef int K_DECODE_NOTHING_NEW = C.DECODE_NOTHING_NEW
cdef int K_DECODE_DISCARDED = C.DECODE_DISCARDED
cdef int K_TW_SLOTS = C.TW_SLOTS
cdef int K_EMPTY_TW = C.EMPTY_TW
cdef int K_UNCODED_DROPPED = C.UNCODED_DROPPED
cdef int K_GW_CAPTURES = C.GW_CAPTURES
cdef int K_RELAY_CAPTURES = C.RELAY_CAPTURES
cdef int K_FORWARD_DELIVERED = C.FORWARD_DELIVERED


cdef inline Py_ssize_t _capture(const double[::1] pw, Py_ssize_t j0, Py_ssize_t j1,
                                double sens, double ratio) nogil:
    cdef Py_ssize_t j, best_j = -1
    cdef double best = -1.0, second = 0.0, p
    for j in range(j0, j1):
        p = pw[j]
        if p > best:
            if best > second:
                second = best
            best_j = j
            best = p
        elif p > second:
            second = p
    if best_j < 0 or best < sens:
        return -1
    if second > 0.0 and not (best > ratio * second):
        return -1
    return best_j


def run_kernel(int protocol, long long n_slots, int n_r, int n_s, int cap,
               const long long[::1] tx_slot,
               const double[::1] pw_gw, const double[::1] pw_relay,
               double sens_sensor, double sens_relay, double ratio,
               const double[::1] rg_pw, const double[::1] tie,
               const double[::1] coded_len, double single_len):
    cdef Py_ssize_t n_msg = tx_slot.shape[0]
    outcome_arr = np.zeros(n_msg, dtype=np.int8)
    heard_arr = np.zeros(n_msg, dtype=np.int8)
    counters_arr = np.zeros(C.N_COUNTERS, dtype=np.int64)
    airtime_arr = np.zeros(MAX_RELAYS, dtype=np.float64)
    buf_arr = np.zeros((MAX_RELAYS, max(n_r, 1)), dtype=np.int64)

    cdef signed char[::1] outcome = outcome_arr
    cdef signed char[::1] heard = heard_arr
    cdef long long[::1] cnt = counters_arr
    cdef double[::1] air = airtime_arr
    cdef long long[:, ::1] buf = buf_arr
    cdef int buf_len[MAX_RELAYS]
    buf_len[0] = 0
    buf_len[1] = 0

    cdef long long t
    cdef Py_ssize_t i = 0, j0, j1, w, m, b, r
    cdef Py_ssize_t rg_k = 0, tie_k = 0
    cdef Py_ssize_t pending = -1, last
    cdef int listener, relay, miss, send, s
    cdef long long cycle, pos
    cdef double p

    if protocol == P_COOP:
        cycle = n_r + n_s + 1
    else:
        cycle = n_r + 1

    with nogil:
        for t in range(n_slots):
            j0 = i
            while i < n_msg and tx_slot[i] == t:
                i += 1
            j1 = i

            # gateway, sensor SF
            if j1 > j0:
                w = _capture(pw_gw, j0, j1, sens_sensor, ratio)
                if w >= 0:
                    outcome[w] = 1
                    cnt[K_GW_CAPTURES] += 1

            # which relay listens
            listener = -1
            pos = t % cycle
            if protocol == P_IMMEDIATE:
                if pending < 0:
                    listener = 0
            elif protocol == P_UNCODED or protocol == P_SINGLE:
                if pos < n_r:
                    listener = 0
            elif protocol == P_COOP:
                listener = 0 if pos < n_r else 1

            w = -1
            if listener >= 0:
                cnt[K_RW_SLOTS] += 1
                if j1 > j0:
                    w = _capture(pw_relay, j0, j1, sens_sensor, ratio)
                if w < 0:
                    cnt[K_RW_EMPTY] += 1
                else:
                    heard[w] = 1
                    cnt[K_RELAY_CAPTURES] += 1
                    if outcome[w] == 1:
                        cnt[K_RW_BOTH] += 1
                    else:
                        cnt[K_RW_RELAY_ONLY] += 1
                    if protocol != P_IMMEDIATE:
                        buf[listener, buf_len[listener]] = w
                        buf_len[listener] += 1

            # relay transmissions
            if protocol == P_IMMEDIATE:
                if pending >= 0:
                    air[0] += single_len
                    cnt[K_RELAY_FRAMES] += 1
                    p = rg_pw[rg_k]
                    rg_k += 1
                    if p >= sens_relay:
                        cnt[K_RELAY_FRAMES_OK] += 1
                        if outcome[pending] == 0:
                            outcome[pending] = 2
                            cnt[K_FORWARD_DELIVERED] += 1
                    else:
                        cnt[K_RELAY_FRAMES_LOST] += 1
                    pending = -1
                if w >= 0:
                    pending = w
            elif protocol != P_NO_RELAY:
                for relay in range(MAX_RELAYS):
                    if relay == 0:
                        if pos != n_r:
                            continue
                    else:
                        if protocol != P_COOP or pos != 0:
                            continue
                    cnt[K_TW_SLOTS] += 1
                    m = buf_len[relay]
                    if m == 0:
                        cnt[K_EMPTY_TW] += 1
                        continue
                    if protocol == P_UNCODED:
                        send = m
                        if m > cap:
                            for s in range(cap):
                                r = s + <Py_ssize_t>(tie[tie_k] * (m - s))
                                tie_k += 1
                                b = buf[relay, s]
                                buf[relay, s] = buf[relay, r]
                                buf[relay, r] = b
                            cnt[K_UNCODED_DROPPED] += m - cap
                            send = cap
                        for s in range(send):
                            b = buf[relay, s]
                            air[relay] += single_len
                            cnt[K_RELAY_FRAMES] += 1
                            p = rg_pw[rg_k]
                            rg_k += 1
                            if p >= sens_relay:
                                cnt[K_RELAY_FRAMES_OK] += 1
                                if outcome[b] == 0:
                                    outcome[b] = 2
                                    cnt[K_FORWARD_DELIVERED] += 1
                            else:
                                cnt[K_RELAY_FRAMES_LOST] += 1
                    else:
                        air[relay] += coded_len[m]
                        cnt[K_RELAY_FRAMES] += 1
                        p = rg_pw[rg_k]
                        rg_k += 1
                        if p >= sens_relay:
                            cnt[K_RELAY_FRAMES_OK] += 1
                            miss = 0
                            last = -1
                            for s in range(m):
                                b = buf[relay, s]
                                if outcome[b] == 0:
                                    miss += 1
                                    last = b
                            if miss == 1:
                                outcome[last] = 2
                                cnt[K_DECODE_RECOVERED] += 1
                            elif miss == 0:
                                cnt[K_DECODE_NOTHING_NEW] += 1
                            else:
                                cnt[K_DECODE_DISCARDED] += 1
                        else:
                            cnt[K_RELAY_FRAMES_LOST] += 1
                    buf_len[relay] = 0

    return outcome_arr, heard_arr, counters_arr, airtime_arr
