"""Numba cycle loop for the weight-distribution simulator.

Everything is flattened into integer arrays by ``hbmflow.sim``; this module
only knows about layers, consumer segments (a layer's chains on one
pseudo-channel) and pseudo-channels.
"""
import math

import numpy as np
from numba import njit

# trace event kinds
EV_ISSUE, EV_ARRIVE, EV_ROW, EV_IMAGE, EV_DEADLOCK = 0, 1, 2, 3, 4
# termination status
DONE, DEADLOCK, TIMEOUT = 0, 1, 2


@njit(cache=True)
def _tri(u, lo, mode, hi):
    if hi <= lo:
        return lo
    fc = (mode - lo) / (hi - lo)
    if u < fc:
        return lo + math.sqrt(u * (hi - lo) * (mode - lo))
    return hi - math.sqrt((1.0 - u) * (hi - lo) * (hi - mode))


@njit(cache=True)
def _trace(tr, n_tr, cyc, kind, a, b):
    if n_tr < tr.shape[0]:
        tr[n_tr, 0] = cyc
        tr[n_tr, 1] = kind
        tr[n_tr, 2] = a
        tr[n_tr, 3] = b
    return n_tr + 1


@njit(cache=True)
def run(
    # layers
    l_outh, l_cpr, l_onchip, l_total_rows, l_seg_ptr, l_sink,
    ie_ptr, ie_edge, oe_ptr, oe_edge,
    e_src, e_tab_off, e_src_outh, e_cap, need_tab, free_tab,
    # segments
    s_layer, s_pc, s_chains, s_lscap, s_bmcap, s_delay, s_total, s_thr,
    # pseudo-channels
    p_seg_ptr, p_seg,
    # scalars
    bl, dc_cap, max_out, core_div, hbm_div, eff_q, token_scale, random_accept,
    lat_lo, lat_mode, lat_hi, lat_unsat_hi, ns_to_hbm, refresh_period, refresh_stall,
    credit_mode, seed, n_images, watchdog, max_core_cycles, trace_cap,
):
    np.random.seed(seed)
    L = l_outh.shape[0]
    S = s_layer.shape[0]
    P = p_seg_ptr.shape[0] - 1
    E = e_src.shape[0]
    burst_words = 3 * bl
    cost = bl * token_scale

    # layer state
    started = np.zeros(L, np.int64)
    produced = np.zeros(L, np.int64)
    prog = np.zeros(L, np.int64)
    freed = np.zeros(E, np.int64)
    busy = np.zeros(L, np.int64)
    freeze = np.zeros(L, np.int64)
    starve = np.zeros(L, np.int64)
    img_done = np.zeros(n_images, np.int64)

    # segment state
    credits = s_lscap.copy()
    fetched = np.zeros(S, np.int64)
    consumed = np.zeros(S, np.int64)
    ls = np.zeros(S, np.int64)
    bm = np.zeros(S, np.int64)
    dmax = 1
    for s in range(S):
        if s_delay[s] > dmax:
            dmax = s_delay[s]
    dly = np.zeros((max(S, 1), dmax), np.int64)
    dly_sum = np.zeros(S, np.int64)
    ls_sum = np.zeros(S, np.int64)
    ls_min = s_lscap.copy()
    ls_max = np.zeros(S, np.int64)
    bm_sum = np.zeros(S, np.int64)
    bm_min = s_bmcap.copy()
    bm_max = np.zeros(S, np.int64)

    # pseudo-channel state
    tokens = np.zeros(P, np.int64)
    rr = np.zeros(P, np.int64)
    outstanding = np.zeros(P, np.int64)
    inf_arr = np.zeros((max(P, 1), max_out), np.int64)
    inf_seg = np.zeros((max(P, 1), max_out), np.int64)
    inf_words = np.zeros((max(P, 1), max_out), np.int64)
    inf_n = np.zeros(P, np.int64)
    rq_seg = np.zeros((max(P, 1), max_out), np.int64)
    rq_words = np.zeros((max(P, 1), max_out), np.int64)
    rq_head = np.zeros(P, np.int64)
    rq_n = np.zeros(P, np.int64)
    dc_seg = np.zeros((max(P, 1), dc_cap), np.int64)
    dc_words = np.zeros((max(P, 1), dc_cap), np.int64)
    dc_head = np.zeros(P, np.int64)
    dc_n = np.zeros(P, np.int64)
    dc_sum = np.zeros(P, np.int64)
    dc_min = np.full(P, dc_cap, np.int64)
    dc_max = np.zeros(P, np.int64)
    requests = np.zeros(P, np.int64)
    accepted = np.zeros(P, np.int64)
    words_in = np.zeros(P, np.int64)
    words_out = np.zeros(P, np.int64)

    tr = np.zeros((trace_cap, 4), np.int64)
    n_tr = 0
    violations = 0

    inflight_total = 0
    refresh_hold = False
    rows_left = 0
    for l in range(L):
        rows_left += l_total_rows[l]

    t = 0
    cc = 0  # core cycles elapsed
    hc = 0  # hbm cycles elapsed
    last_progress = 0
    status = TIMEOUT
    while True:
        # ---------------- HBM domain ----------------
        if t % hbm_div == 0:
            hc += 1
            in_refresh = refresh_period > 0 and (hc % refresh_period) < refresh_stall
            refresh_hold = False
            for p in range(P):
                if not in_refresh:
                    if random_accept:
                        gain = token_scale if np.random.random() * token_scale < eff_q else 0
                    else:
                        gain = eff_q
                    tokens[p] = min(tokens[p] + gain, cost + gain)
                # arrivals, oldest first
                while inf_n[p] > 0 and inf_arr[p, 0] <= hc:
                    sg = inf_seg[p, 0]
                    slot = (rq_head[p] + rq_n[p]) % max_out
                    rq_seg[p, slot] = sg
                    rq_words[p, slot] = inf_words[p, 0]
                    rq_n[p] += 1
                    for k in range(1, inf_n[p]):
                        inf_arr[p, k - 1] = inf_arr[p, k]
                        inf_seg[p, k - 1] = inf_seg[p, k]
                        inf_words[p, k - 1] = inf_words[p, k]
                    inf_n[p] -= 1
                    inflight_total -= 1
                    if trace_cap > 0:
                        n_tr = _trace(tr, n_tr, cc, EV_ARRIVE, p, s_layer[sg])
                # one 256-bit word per cycle into the clock-crossing FIFO
                if rq_n[p] > 0 and dc_n[p] < dc_cap:
                    h = rq_head[p]
                    w = min(3, rq_words[p, h])
                    slot = (dc_head[p] + dc_n[p]) % dc_cap
                    dc_seg[p, slot] = rq_seg[p, h]
                    dc_words[p, slot] = w
                    dc_n[p] += 1
                    words_in[p] += w
                    rq_words[p, h] -= w
                    if rq_words[p, h] == 0:
                        rq_head[p] = (h + 1) % max_out
                        rq_n[p] -= 1
                        outstanding[p] -= 1
                # prefetch: round-robin over this channel's consumers
                if outstanding[p] < max_out:
                    a = p_seg_ptr[p]
                    n = p_seg_ptr[p + 1] - a
                    pick = -1
                    for j in range(n):
                        k = (rr[p] + j) % n
                        sg = p_seg[a + k]
                        left = s_total[sg] - fetched[sg]
                        if left <= 0:
                            continue
                        want = min(burst_words, left)
                        if credit_mode:
                            if credits[sg] >= want:
                                pick = k
                                break
                        elif bm[sg] + burst_words <= s_bmcap[sg]:
                            pick = k
                            break
                    if pick >= 0:
                        requests[p] += 1
                        if in_refresh:
                            refresh_hold = True
                        if tokens[p] >= cost and not in_refresh:
                            tokens[p] -= cost
                            sg = p_seg[a + pick]
                            want = min(burst_words, s_total[sg] - fetched[sg])
                            fetched[sg] += want
                            if credit_mode:
                                credits[sg] -= want
                                if credits[sg] < 0:
                                    violations += 1
                            if outstanding[p] > 0:
                                ns = _tri(np.random.random(), lat_lo, lat_mode, lat_hi)
                            else:
                                ns = _tri(np.random.random(), lat_lo, lat_lo, lat_unsat_hi)
                            arr = hc + int(math.ceil(ns * ns_to_hbm))
                            # keep in-flight list sorted by arrival (stable)
                            k = inf_n[p]
                            while k > 0 and inf_arr[p, k - 1] > arr:
                                inf_arr[p, k] = inf_arr[p, k - 1]
                                inf_seg[p, k] = inf_seg[p, k - 1]
                                inf_words[p, k] = inf_words[p, k - 1]
                                k -= 1
                            inf_arr[p, k] = arr
                            inf_seg[p, k] = sg
                            inf_words[p, k] = want
                            inf_n[p] += 1
                            inflight_total += 1
                            outstanding[p] += 1
                            accepted[p] += 1
                            rr[p] = (pick + 1) % n
                            if trace_cap > 0:
                                n_tr = _trace(tr, n_tr, cc, EV_ISSUE, p, s_layer[sg])

        # ---------------- core domain ----------------
        if t % core_div == 0:
            cc += 1
            progress = False
            for p in range(P):
                if dc_n[p] > 0:
                    h = dc_head[p]
                    sg = dc_seg[p, h]
                    w = dc_words[p, h]
                    if bm[sg] + w <= s_bmcap[sg]:
                        bm[sg] += w
                        words_out[p] += w
                        dc_head[p] = (h + 1) % dc_cap
                        dc_n[p] -= 1
                dc_sum[p] += dc_n[p]
                if dc_n[p] < dc_min[p]:
                    dc_min[p] = dc_n[p]
                if dc_n[p] > dc_max[p]:
                    dc_max[p] = dc_n[p]
            for s in range(S):
                d = s_delay[s]
                slot = cc % d
                out = dly[s, slot]
                ls[s] += out
                dly_sum[s] -= out
                if ls[s] > s_lscap[s]:
                    violations += 1
                n = min(3, bm[s], s_lscap[s] - ls[s] - dly_sum[s])
                if n < 0:
                    n = 0
                bm[s] -= n
                dly[s, slot] = n
                dly_sum[s] += n

            for l in range(L - 1, -1, -1):
                if produced[l] >= l_total_rows[l]:
                    continue
                outh = l_outh[l]
                if started[l] == produced[l]:
                    g = started[l]
                    img = g // outh
                    r = g - img * outh
                    ok = True
                    for q in range(ie_ptr[l], ie_ptr[l + 1]):
                        e = ie_edge[q]
                        need = img * e_src_outh[e] + need_tab[e_tab_off[e] + r]
                        if produced[e_src[e]] < need:
                            ok = False
                            break
                    if ok:
                        for q in range(oe_ptr[l], oe_ptr[l + 1]):
                            e = oe_edge[q]
                            if g - freed[e] >= e_cap[e]:
                                ok = False
                                break
                    if ok:
                        started[l] += 1
                        prog[l] = 0
                        progress = True
                        for q in range(ie_ptr[l], ie_ptr[l + 1]):
                            e = ie_edge[q]
                            f = img * e_src_outh[e] + free_tab[e_tab_off[e] + r]
                            if f > freed[e]:
                                freed[e] = f
                if started[l] > produced[l]:
                    ok = True
                    if not l_onchip[l]:
                        for s in range(l_seg_ptr[l], l_seg_ptr[l + 1]):
                            rem = s_total[s] - consumed[s]
                            if ls[s] < s_chains[s] or (ls[s] < s_thr[s] and ls[s] < rem):
                                ok = False
                                break
                    if ok:
                        if not l_onchip[l]:
                            for s in range(l_seg_ptr[l], l_seg_ptr[l + 1]):
                                c = s_chains[s]
                                ls[s] -= c
                                consumed[s] += c
                                credits[s] += c
                        busy[l] += 1
                        prog[l] += 1
                        progress = True
                        if prog[l] == l_cpr[l]:
                            produced[l] += 1
                            rows_left -= 1
                            if trace_cap > 0:
                                n_tr = _trace(tr, n_tr, cc, EV_ROW, l, produced[l] - 1)
                            if l_sink[l] and produced[l] % outh == 0:
                                im = produced[l] // outh - 1
                                if cc > img_done[im]:
                                    img_done[im] = cc
                                if trace_cap > 0:
                                    n_tr = _trace(tr, n_tr, cc, EV_IMAGE, im, l)
                    else:
                        freeze[l] += 1
                else:
                    starve[l] += 1

            for s in range(S):
                ls_sum[s] += ls[s]
                bm_sum[s] += bm[s]
                if ls[s] < ls_min[s]:
                    ls_min[s] = ls[s]
                if ls[s] > ls_max[s]:
                    ls_max[s] = ls[s]
                if bm[s] < bm_min[s]:
                    bm_min[s] = bm[s]
                if bm[s] > bm_max[s]:
                    bm_max[s] = bm[s]

            if rows_left == 0:
                status = DONE
                break
            # a request held back only by refresh is pending work, not a stall
            if progress or refresh_hold:
                last_progress = cc
            elif cc - last_progress >= watchdog and inflight_total == 0:
                status = DEADLOCK
                if trace_cap > 0:
                    n_tr = _trace(tr, n_tr, cc, EV_DEADLOCK, -1, -1)
                break
            if cc >= max_core_cycles:
                status = TIMEOUT
                break
        t += 1

    return (status, cc, hc, violations,
            busy, freeze, starve, started, produced, img_done,
            credits, fetched, consumed, ls, bm, dly_sum,
            ls_sum, ls_min, ls_max, bm_sum, bm_min, bm_max,
            requests, accepted, words_in, words_out, dc_n, dc_head, dc_seg, dc_words,
            dc_sum, dc_min, dc_max, inf_n, rq_n,
            tr[:min(n_tr, trace_cap)], n_tr)
