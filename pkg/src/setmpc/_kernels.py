"""Compiled inner loops: transition-row construction and robust value
iteration sweeps. Pure-array interfaces so the callers own all data layout.
"""

import math

import numpy as np
from numba import njit

SQRT2 = math.sqrt(2.0)
TWO_PI = 2.0 * math.pi


@njit(cache=True, inline="always")
def _phi(z):
    return 0.5 * (1.0 + math.erf(z / SQRT2))


@njit(cache=True, inline="always")
def _bump(m, a, b, sigma):
    """P(m + N(0, sigma^2) lands in [a, b])."""
    return _phi((b - m) / sigma) - _phi((a - m) / sigma)


@njit(cache=True)
def _wrapped_factor(mlo, mhi, a, b, sigma):
    """Factor bounds for a wrapped angle dimension: sum of Gaussian bumps
    over the 2*pi-shifted copies of [a, b] reachable from [mlo, mhi]."""
    jlo = int(math.ceil((mlo - 8.0 * sigma - b) / TWO_PI))
    jhi = int(math.floor((mhi + 8.0 * sigma - a) / TWO_PI))
    fh = 0.0
    fl = 0.0
    for j in range(jlo, jhi + 1):
        aj = a + TWO_PI * j
        bj = b + TWO_PI * j
        mid = 0.5 * (aj + bj)
        mc = min(max(mid, mlo), mhi)
        fh += _bump(mc, aj, bj, sigma)
        lo1 = _bump(mlo, aj, bj, sigma)
        lo2 = _bump(mhi, aj, bj, sigma)
        fl += lo1 if lo1 < lo2 else lo2
    if fh > 1.0:
        fh = 1.0
    if fl > fh:
        fl = fh
    return fl, fh


@njit(cache=True, inline="always")
def _noisy_factor(mlo, mhi, a, b, sigma):
    mid = 0.5 * (a + b)
    mc = min(max(mid, mlo), mhi)
    fh = _bump(mc, a, b, sigma)
    lo1 = _bump(mlo, a, b, sigma)
    lo2 = _bump(mhi, a, b, sigma)
    fl = lo1 if lo1 < lo2 else lo2
    return fl, fh


@njit(cache=True, inline="always")
def _det_factor(mlo, mhi, a, b, closed_top):
    """Noise-free dimension: the mean lands at itself, cells are [a, b)
    except the topmost which is closed."""
    if closed_top:
        overlap = mhi >= a and mlo <= b
        contained = mlo >= a and mhi <= b
    else:
        overlap = mhi >= a and mlo < b
        contained = mlo >= a and mhi < b
    fh = 1.0 if overlap else 0.0
    fl = 1.0 if contained else 0.0
    return fl, fh


CENSOR_PAD = 1.0e6


@njit(cache=True)
def build_rows(
    mlo,
    mhi,
    sigma,
    wrap_mask,
    clamp_mask,
    edges_pad,
    counts,
    state_lo,
    state_hi,
    win_lo,
    win_hi,
    offsets,
    strides,
    prune,
    tail_allow,
    outside_index,
    cols_out,
    plo_out,
    phi_out,
    row_counts,
):
    """Fill transition entries for every source cell (rows of mlo/mhi).

    win_lo/win_hi give per-cell per-dim candidate target index windows;
    offsets[i] is the write capacity offset for cell i. Emits in-box targets
    with p_hi >= prune plus one outside entry folding pruned and tail mass.
    Clamped dimensions saturate: their edge cells absorb the overflow tails
    (censored upper factors) and the saturation event's probability is added
    to every upper bound, since saturation couples the dimensions.
    Returns the index of the first infeasible row, or -1.
    """
    n_cells, n_x = mlo.shape
    maxw = 1
    for i in range(n_cells):
        for d in range(n_x):
            w = win_hi[i, d] - win_lo[i, d]
            if w > maxw:
                maxw = w
    flo_buf = np.empty((n_x, maxw))
    fhi_buf = np.empty((n_x, maxw))
    idx = np.empty(n_x, dtype=np.int64)
    bad_row = -1

    for i in range(n_cells):
        pos = offsets[i]
        start = pos
        pruned = 0.0

        pclip = 0.0
        for d in range(n_x):
            if clamp_mask[d] and sigma[d] > 0.0:
                pclip += 1.0 - _phi((state_hi[d] - mhi[i, d]) / sigma[d])
                pclip += _phi((state_lo[d] - mlo[i, d]) / sigma[d])

        empty = False
        for d in range(n_x):
            if win_hi[i, d] <= win_lo[i, d]:
                empty = True
        if not empty:
            for d in range(n_x):
                closed_last = counts[d] - 1
                for k in range(win_lo[i, d], win_hi[i, d]):
                    a = edges_pad[d, k]
                    b = edges_pad[d, k + 1]
                    if sigma[d] > 0.0:
                        if wrap_mask[d]:
                            fl, fh = _wrapped_factor(
                                mlo[i, d], mhi[i, d], a, b, sigma[d]
                            )
                        elif clamp_mask[d]:
                            fl = _noisy_factor(
                                mlo[i, d], mhi[i, d], a, b, sigma[d]
                            )[0]
                            ah = a - CENSOR_PAD if k == 0 else a
                            bh = b + CENSOR_PAD if k == closed_last else b
                            fh = _noisy_factor(
                                mlo[i, d], mhi[i, d], ah, bh, sigma[d]
                            )[1]
                        else:
                            fl, fh = _noisy_factor(
                                mlo[i, d], mhi[i, d], a, b, sigma[d]
                            )
                    else:
                        fl, fh = _det_factor(
                            mlo[i, d], mhi[i, d], a, b, k == closed_last
                        )
                    flo_buf[d, k - win_lo[i, d]] = fl
                    fhi_buf[d, k - win_lo[i, d]] = fh
            # odometer over the window product
            for d in range(n_x):
                idx[d] = 0
            while True:
                ph = 1.0
                for d in range(n_x):
                    ph *= fhi_buf[d, idx[d]]
                if ph + pclip >= prune:
                    pl = 1.0
                    for d in range(n_x):
                        pl *= flo_buf[d, idx[d]]
                    lin = 0
                    for d in range(n_x):
                        lin += (win_lo[i, d] + idx[d]) * strides[d]
                    ph += pclip
                    if ph > 1.0:
                        ph = 1.0
                    cols_out[pos] = lin
                    plo_out[pos] = pl
                    phi_out[pos] = ph
                    pos += 1
                else:
                    pruned += ph
                d = n_x - 1
                while d >= 0:
                    idx[d] += 1
                    if idx[d] < win_hi[i, d] - win_lo[i, d]:
                        break
                    idx[d] = 0
                    d -= 1
                if d < 0:
                    break

        # outside cell: complement of landing anywhere in the state box;
        # wrapped and clamped dimensions cannot leave
        in_lo = 1.0
        in_hi = 1.0
        for d in range(n_x):
            if wrap_mask[d] or clamp_mask[d]:
                continue
            a = state_lo[d]
            b = state_hi[d]
            if sigma[d] > 0.0:
                fl, fh = _noisy_factor(mlo[i, d], mhi[i, d], a, b, sigma[d])
            else:
                fl, fh = _det_factor(mlo[i, d], mhi[i, d], a, b, True)
            in_lo *= fl
            in_hi *= fh
        out_lo = 1.0 - in_hi - pclip
        if out_lo < 0.0:
            out_lo = 0.0
        out_hi = (1.0 - in_lo) + pclip + pruned + tail_allow
        if out_hi > 1.0:
            out_hi = 1.0

        ssum = out_hi
        for q in range(start, pos):
            ssum += phi_out[q]
        if ssum < 1.0:
            deficit = 1.0 - ssum
            if deficit <= 1e-9 and out_hi + deficit <= 1.0:
                out_hi += deficit
            elif bad_row < 0:
                bad_row = i
        if out_hi > 0.0:
            cols_out[pos] = outside_index
            plo_out[pos] = out_lo
            phi_out[pos] = out_hi
            pos += 1
        row_counts[i] = pos - start
    return bad_row


@njit(cache=True, inline="always")
def _greedy_expect(vals, plo, phi, order):
    """Expectation of the extremal feasible distribution: mandatory p_lo
    everywhere, remaining budget filled along `order` up to p_hi."""
    acc = 0.0
    budget = 1.0
    for t in range(vals.shape[0]):
        acc += plo[t] * vals[t]
        budget -= plo[t]
    if budget < 0.0:
        budget = 0.0
    for o in range(order.shape[0]):
        t = order[o]
        cap = phi[t] - plo[t]
        add = cap if cap < budget else budget
        acc += add * vals[t]
        budget -= add
        if budget <= 0.0:
            break
    return acc


@njit(cache=True)
def vi_sweep(
    row_ptr,
    cols,
    plo,
    phi,
    values,
    new_values,
    neutral_states,
    num_actions,
    policy,
    fixed_policy,
    maximize_adversary,
):
    """One synchronous robust backup sweep over all neutral states.

    fixed_policy False: maximize over actions (policy written out, lowest
    index wins ties). True: evaluate the action in `policy`. The adversary
    minimizes unless maximize_adversary. Returns the sup-norm residual."""
    residual = 0.0
    n = neutral_states.shape[0]
    for r in range(n):
        s = neutral_states[r]
        best = -1.0
        best_a = 0
        if fixed_policy:
            a0 = policy[s]
            a1 = a0 + 1
        else:
            a0 = 0
            a1 = num_actions
        for a in range(a0, a1):
            lo = row_ptr[r * num_actions + a]
            hi = row_ptr[r * num_actions + a + 1]
            vals = values[cols[lo:hi]]
            if maximize_adversary:
                order = np.argsort(-vals)
            else:
                order = np.argsort(vals)
            e = _greedy_expect(vals, plo[lo:hi], phi[lo:hi], order)
            if e > best:
                best = e
                best_a = a
        new_values[s] = best
        if not fixed_policy:
            policy[s] = best_a
        d = best - values[s]
        if d < 0.0:
            d = -d
        if d > residual:
            residual = d
    return residual
