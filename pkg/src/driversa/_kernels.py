"""Numba kernels for histogram GBDT training and tree traversal.

Everything here is deterministic: fixed row order, fixed feature order,
strict-improvement comparisons for every tie-break.
"""

from __future__ import annotations

import numpy as np
from numba import njit

MAX_CATEGORIES = 63  # category sets are stored as uint64 bitmasks


@njit(cache=True)
def build_histogram(codes, rows, grad, hess, hist_g, hist_h, hist_c):
    n = rows.shape[0]
    n_feat = codes.shape[1]
    for ii in range(n):
        r = rows[ii]
        g = grad[r]
        h = hess[r]
        for f in range(n_feat):
            b = codes[r, f]
            hist_g[f, b] += g
            hist_h[f, b] += h
            hist_c[f, b] += 1


@njit(cache=True)
def best_split_kernel(hist_g, hist_h, hist_c, n_bins, is_cat,
                      total_g, total_h, total_c, min_data, lam):
    """Best split over all features of one node.

    Returns (feature, gain, threshold_bin, missing_left, left_cat_bits).
    feature == -1 means no split with positive gain satisfies the
    min_data_in_leaf constraint. Ties resolve to the lowest feature index,
    then the lowest bin index, then missing-to-left. Categorical left sets
    are encoded as uint64 bitmasks over category ids.
    """
    n_feat = hist_g.shape[0]
    best_f = -1
    best_gain = 0.0
    best_bin = -1
    best_mleft = True
    best_cats = np.uint64(0)

    parent = total_g * total_g / (total_h + lam) if total_h + lam > 0 else 0.0

    for f in range(n_feat):
        nb = n_bins[f]
        mb = nb  # reserved missing bin
        gm = hist_g[f, mb]
        hm = hist_h[f, mb]
        cm = hist_c[f, mb]

        if is_cat[f] == 0:
            for pass_i in range(2):
                mleft = pass_i == 0
                if cm == 0 and pass_i == 1:
                    break  # no missing rows: both passes identical
                gl = gm if mleft else 0.0
                hl = hm if mleft else 0.0
                cl = cm if mleft else 0
                for b in range(nb):
                    gl += hist_g[f, b]
                    hl += hist_h[f, b]
                    cl += hist_c[f, b]
                    cr = total_c - cl
                    if cr < min_data:
                        break
                    if cl < min_data:
                        continue
                    gr = total_g - gl
                    hr = total_h - hl
                    if hl + lam <= 0 or hr + lam <= 0:
                        continue
                    gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        best_bin = b
                        best_mleft = mleft
                        best_cats = np.uint64(0)
        else:
            # categories present in this node, sorted by grad/hess ratio
            cat_id = np.empty(nb, np.int32)
            ratio = np.empty(nb, np.float64)
            k = 0
            for b in range(nb):
                if hist_c[f, b] > 0:
                    cat_id[k] = b
                    ratio[k] = hist_g[f, b] / hist_h[f, b]
                    k += 1
            if k < 1:
                continue
            # insertion sort on (ratio, id) for determinism
            for i in range(1, k):
                rv = ratio[i]
                cv = cat_id[i]
                j = i - 1
                while j >= 0 and (ratio[j] > rv or (ratio[j] == rv and cat_id[j] > cv)):
                    ratio[j + 1] = ratio[j]
                    cat_id[j + 1] = cat_id[j]
                    j -= 1
                ratio[j + 1] = rv
                cat_id[j + 1] = cv
            for pass_i in range(2):
                mleft = pass_i == 0
                if cm == 0 and pass_i == 1:
                    break
                gl = gm if mleft else 0.0
                hl = hm if mleft else 0.0
                cl = cm if mleft else 0
                mask = np.uint64(0)
                for m in range(k):
                    b = cat_id[m]
                    mask |= np.uint64(1) << np.uint64(b)
                    gl += hist_g[f, b]
                    hl += hist_h[f, b]
                    cl += hist_c[f, b]
                    cr = total_c - cl
                    if cr < min_data:
                        break
                    if cl < min_data:
                        continue
                    gr = total_g - gl
                    hr = total_h - hl
                    if hl + lam <= 0 or hr + lam <= 0:
                        continue
                    gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        best_bin = -1
                        best_mleft = mleft
                        best_cats = mask
    return best_f, best_gain, best_bin, best_mleft, best_cats


@njit(cache=True, inline="always")
def _hist_zero_build(hist_g, hist_h, hist_c, nid, codes, row_buf, s, e,
                     grad, hess, n_bins):
    n_feat = codes.shape[1]
    for f in range(n_feat):
        for b in range(n_bins[f] + 1):
            hist_g[nid, f, b] = 0.0
            hist_h[nid, f, b] = 0.0
            hist_c[nid, f, b] = 0
    for ii in range(s, e):
        r = row_buf[ii]
        g = grad[r]
        h = hess[r]
        for f in range(n_feat):
            b = codes[r, f]
            hist_g[nid, f, b] += g
            hist_h[nid, f, b] += h
            hist_c[nid, f, b] += 1


@njit(cache=True, inline="always")
def _hist_subtract(hist_g, hist_h, hist_c, dst, parent, src, n_bins):
    n_feat = n_bins.shape[0]
    for f in range(n_feat):
        for b in range(n_bins[f] + 1):
            hist_g[dst, f, b] = hist_g[parent, f, b] - hist_g[src, f, b]
            hist_h[dst, f, b] = hist_h[parent, f, b] - hist_h[src, f, b]
            hist_c[dst, f, b] = hist_c[parent, f, b] - hist_c[src, f, b]


@njit(cache=True)
def grow_tree_kernel(codes, rows, grad, hess, n_bins, is_cat,
                     min_data, lam, lr, num_leaves,
                     hist_g, hist_h, hist_c,
                     feature, is_cat_node, thresh_bin, cat_bits,
                     default_left, left, right, is_leaf, value, cover):
    """Grow one leaf-wise tree entirely inside compiled code.

    ``hist_*`` are per-node workspaces of shape (max_nodes, F, width); the
    output arrays have length max_nodes = 2 * num_leaves - 1. Rows are
    partitioned in place; the smaller child's histogram is accumulated
    directly and the sibling's obtained by subtraction from the parent.
    Returns the number of nodes written.
    """
    n = rows.shape[0]
    n_feat = codes.shape[1]
    max_nodes = 2 * num_leaves - 1

    row_buf = rows.copy()
    tmp_l = np.empty(n, rows.dtype)
    tmp_r = np.empty(n, rows.dtype)
    node_s = np.empty(max_nodes, np.int64)
    node_e = np.empty(max_nodes, np.int64)
    node_g = np.empty(max_nodes, np.float64)
    node_h = np.empty(max_nodes, np.float64)
    cand_gain = np.empty(max_nodes, np.float64)
    cand_f = np.empty(max_nodes, np.int32)
    cand_bin = np.empty(max_nodes, np.int32)
    cand_mleft = np.empty(max_nodes, np.uint8)
    cand_mask = np.empty(max_nodes, np.uint64)
    has_cand = np.zeros(max_nodes, np.uint8)

    g0 = 0.0
    h0 = 0.0
    for ii in range(n):
        g0 += grad[row_buf[ii]]
        h0 += hess[row_buf[ii]]
    node_s[0] = 0
    node_e[0] = n
    node_g[0] = g0
    node_h[0] = h0
    feature[0] = -1
    is_cat_node[0] = 0
    thresh_bin[0] = -1
    cat_bits[0] = np.uint64(0)
    default_left[0] = 1
    left[0] = -1
    right[0] = -1
    is_leaf[0] = 1
    value[0] = -g0 / (h0 + lam) * lr if h0 + lam > 0 else 0.0
    cover[0] = float(n)
    n_nodes = 1

    sum_nb = 0
    for f in range(n_feat):
        sum_nb += n_bins[f] + 1

    if n >= 2 * min_data:
        _hist_zero_build(hist_g, hist_h, hist_c, 0, codes, row_buf, 0, n,
                         grad, hess, n_bins)
        bf, bgain, bbin, bmleft, bmask = best_split_kernel(
            hist_g[0], hist_h[0], hist_c[0], n_bins, is_cat,
            g0, h0, n, min_data, lam)
        if bf >= 0:
            has_cand[0] = 1
            cand_gain[0] = bgain
            cand_f[0] = bf
            cand_bin[0] = bbin
            cand_mleft[0] = 1 if bmleft else 0
            cand_mask[0] = bmask

    leaves = 1
    while leaves < num_leaves:
        best = -1
        best_gain = 0.0
        for nid in range(n_nodes):
            if is_leaf[nid] == 1 and has_cand[nid] == 1 and cand_gain[nid] > best_gain:
                best_gain = cand_gain[nid]
                best = nid
        if best < 0:
            break

        f = cand_f[best]
        miss_bin = n_bins[f]
        cbin = cand_bin[best]
        mask = cand_mask[best]
        mleft = cand_mleft[best] == 1
        catf = is_cat[f] == 1
        s = node_s[best]
        e = node_e[best]
        nl = 0
        nr = 0
        for ii in range(s, e):
            r = row_buf[ii]
            b = codes[r, f]
            if b == miss_bin:
                go_left = mleft
            elif catf:
                go_left = ((mask >> np.uint64(b)) & np.uint64(1)) != np.uint64(0)
            else:
                go_left = b <= cbin
            if go_left:
                tmp_l[nl] = r
                nl += 1
            else:
                tmp_r[nr] = r
                nr += 1
        for ii in range(nl):
            row_buf[s + ii] = tmp_l[ii]
        for ii in range(nr):
            row_buf[s + nl + ii] = tmp_r[ii]

        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        node_s[lid] = s
        node_e[lid] = s + nl
        node_s[rid] = s + nl
        node_e[rid] = e
        gl = 0.0
        hl = 0.0
        for ii in range(s, s + nl):
            gl += grad[row_buf[ii]]
            hl += hess[row_buf[ii]]
        gr = node_g[best] - gl
        hr = node_h[best] - hl
        node_g[lid] = gl
        node_h[lid] = hl
        node_g[rid] = gr
        node_h[rid] = hr

        is_leaf[best] = 0
        feature[best] = f
        is_cat_node[best] = 1 if catf else 0
        thresh_bin[best] = cbin
        cat_bits[best] = mask if catf else np.uint64(0)
        default_left[best] = 1 if mleft else 0
        left[best] = lid
        right[best] = rid
        value[best] = 0.0

        for child in (lid, rid):
            cg = node_g[child]
            ch = node_h[child]
            feature[child] = -1
            is_cat_node[child] = 0
            thresh_bin[child] = -1
            cat_bits[child] = np.uint64(0)
            default_left[child] = 1
            left[child] = -1
            right[child] = -1
            is_leaf[child] = 1
            value[child] = -cg / (ch + lam) * lr if ch + lam > 0 else 0.0
            cover[child] = float(node_e[child] - node_s[child])
        leaves += 1

        # Child histograms are only materialized for children that can be
        # split further; the cheaper of direct accumulation and parent
        # subtraction is used.
        need_l = nl >= 2 * min_data
        need_r = nr >= 2 * min_data
        if need_l and need_r:
            small = lid if nl <= nr else rid
            big = rid if small == lid else lid
            _hist_zero_build(hist_g, hist_h, hist_c, small, codes, row_buf,
                             node_s[small], node_e[small], grad, hess, n_bins)
            _hist_subtract(hist_g, hist_h, hist_c, big, best, small, n_bins)
        elif need_l or need_r:
            child = lid if need_l else rid
            other = rid if need_l else lid
            n_c = node_e[child] - node_s[child]
            n_o = node_e[other] - node_s[other]
            if n_c * n_feat <= n_o * n_feat + 4 * sum_nb:
                _hist_zero_build(hist_g, hist_h, hist_c, child, codes, row_buf,
                                 node_s[child], node_e[child], grad, hess,
                                 n_bins)
            else:
                _hist_zero_build(hist_g, hist_h, hist_c, other, codes, row_buf,
                                 node_s[other], node_e[other], grad, hess,
                                 n_bins)
                _hist_subtract(hist_g, hist_h, hist_c, child, best, other,
                               n_bins)

        for child in (lid, rid):
            cnt = node_e[child] - node_s[child]
            has_cand[child] = 0
            if cnt >= 2 * min_data:
                bf, bgain, bbin, bmleft, bmask = best_split_kernel(
                    hist_g[child], hist_h[child], hist_c[child], n_bins, is_cat,
                    node_g[child], node_h[child], cnt, min_data, lam)
                if bf >= 0:
                    has_cand[child] = 1
                    cand_gain[child] = bgain
                    cand_f[child] = bf
                    cand_bin[child] = bbin
                    cand_mleft[child] = 1 if bmleft else 0
                    cand_mask[child] = bmask
    return n_nodes


@njit(cache=True)
def partition_rows(codes, rows, feature, is_cat, thresh_bin, cat_mask,
                   missing_left, miss_bin):
    """Stable partition of a node's rows by a split descriptor."""
    n = rows.shape[0]
    go_left = np.empty(n, np.bool_)
    n_left = 0
    for ii in range(n):
        b = codes[rows[ii], feature]
        if b == miss_bin:
            left = missing_left
        elif is_cat:
            left = cat_mask[b]
        else:
            left = b <= thresh_bin
        go_left[ii] = left
        if left:
            n_left += 1
    left_rows = np.empty(n_left, rows.dtype)
    right_rows = np.empty(n - n_left, rows.dtype)
    li = 0
    ri = 0
    for ii in range(n):
        if go_left[ii]:
            left_rows[li] = rows[ii]
            li += 1
        else:
            right_rows[ri] = rows[ii]
            ri += 1
    return left_rows, right_rows


@njit(cache=True)
def idt_detect(t, x, y, max_disp, min_dur):
    """Dispersion-threshold fixation scan; returns (start, end) sample indices.

    Grows a window until it spans min_dur; if (x-range + y-range) stays
    within max_disp it is extended sample by sample (incremental bounds)
    and emitted, otherwise the window start advances by one sample.
    """
    n = t.shape[0]
    starts = np.empty(n, np.int64)
    ends = np.empty(n, np.int64)
    cnt = 0
    i = 0
    while i < n:
        j = i
        while j < n and t[j] - t[i] < min_dur:
            j += 1
        if j >= n:
            break
        xmin = x[i]
        xmax = x[i]
        ymin = y[i]
        ymax = y[i]
        for m in range(i + 1, j + 1):
            if x[m] < xmin:
                xmin = x[m]
            if x[m] > xmax:
                xmax = x[m]
            if y[m] < ymin:
                ymin = y[m]
            if y[m] > ymax:
                ymax = y[m]
        if (xmax - xmin) + (ymax - ymin) <= max_disp:
            while j + 1 < n:
                nxmin = min(xmin, x[j + 1])
                nxmax = max(xmax, x[j + 1])
                nymin = min(ymin, y[j + 1])
                nymax = max(ymax, y[j + 1])
                if (nxmax - nxmin) + (nymax - nymin) > max_disp:
                    break
                xmin = nxmin
                xmax = nxmax
                ymin = nymin
                ymax = nymax
                j += 1
            starts[cnt] = i
            ends[cnt] = j
            cnt += 1
            i = j + 1
        else:
            i += 1
    return starts[:cnt], ends[:cnt]


@njit(cache=True)
def _path_unwound_sum(wz, wo, ww, ud, i):
    one_f = wo[i]
    zero_f = wz[i]
    nxt = ww[ud]
    total = 0.0
    if one_f != 0.0:
        for j in range(ud - 1, -1, -1):
            tmp = nxt / ((j + 1) * one_f)
            total += tmp
            nxt = ww[j] - tmp * zero_f * (ud - j)
    else:
        for j in range(ud - 1, -1, -1):
            total += ww[j] / (zero_f * (ud - j))
    return total * (ud + 1)


@njit(cache=True)
def _path_unwind(wd, wz, wo, ww, ud, i):
    one_f = wo[i]
    zero_f = wz[i]
    nxt = ww[ud]
    if one_f != 0.0:
        for j in range(ud - 1, -1, -1):
            tmp = ww[j]
            ww[j] = nxt * (ud + 1) / ((j + 1) * one_f)
            nxt = tmp - ww[j] * zero_f * (ud - j) / (ud + 1)
    else:
        for j in range(ud - 1, -1, -1):
            ww[j] = ww[j] * (ud + 1) / (zero_f * (ud - j))
    for j in range(i, ud):
        wd[j] = wd[j + 1]
        wz[j] = wz[j + 1]
        wo[j] = wo[j + 1]


@njit(cache=True)
def tree_shap_matrix(feature, is_cat, threshold, cat_bits, default_left,
                     left, right, is_leaf, value, cover, X, max_depth, phi):
    """Exact Shapley attributions for one tree, accumulated into phi (n, F).

    Path-dependent conditional expectations weighted by training covers.
    Iterative form of the polynomial-time unique-path algorithm: each stack
    frame carries a snapshot of the weighted feature path.
    """
    n = X.shape[0]
    size = max_depth + 2
    # one frame per cold branch taken plus the root: bounded by split count
    max_slots = value.shape[0] // 2 + 2

    st_node = np.empty(max_slots, np.int64)
    st_len = np.empty(max_slots, np.int64)
    st_pz = np.empty(max_slots, np.float64)
    st_po = np.empty(max_slots, np.float64)
    st_pi = np.empty(max_slots, np.int64)
    st_d = np.empty((max_slots, size), np.int64)
    st_z = np.empty((max_slots, size), np.float64)
    st_o = np.empty((max_slots, size), np.float64)
    st_w = np.empty((max_slots, size), np.float64)

    for row in range(n):
        st_node[0] = 0
        st_len[0] = 0
        st_pz[0] = 1.0
        st_po[0] = 1.0
        st_pi[0] = -1
        top = 1
        idx = 0
        while idx < top:
            slot = idx
            idx += 1
            node = st_node[slot]
            u = st_len[slot]
            pz = st_pz[slot]
            po = st_po[slot]
            pi = st_pi[slot]
            wd = st_d[slot]
            wz = st_z[slot]
            wo = st_o[slot]
            ww = st_w[slot]

            # extend the path in place with the incoming fractions
            wd[u] = pi
            wz[u] = pz
            wo[u] = po
            ww[u] = 1.0 if u == 0 else 0.0
            for i in range(u - 1, -1, -1):
                ww[i + 1] += po * ww[i] * (i + 1) / (u + 1)
                ww[i] = pz * ww[i] * (u - i) / (u + 1)
            ud = u

            if is_leaf[node]:
                for i in range(1, ud + 1):
                    w = _path_unwound_sum(wz, wo, ww, ud, i)
                    phi[row, wd[i]] += w * (wo[i] - wz[i]) * value[node]
                continue

            f = feature[node]
            x = X[row, f]
            if x != x:
                hot = left[node] if default_left[node] else right[node]
            elif is_cat[node]:
                c = np.int64(x)
                if 0 <= c <= MAX_CATEGORIES and (cat_bits[node] >> np.uint64(c)) & np.uint64(1):
                    hot = left[node]
                else:
                    hot = right[node]
            else:
                hot = left[node] if x <= threshold[node] else right[node]
            cold = right[node] if hot == left[node] else left[node]

            hot_zf = cover[hot] / cover[node]
            cold_zf = cover[cold] / cover[node]
            iz = 1.0
            io = 1.0
            k = -1
            for i in range(ud + 1):
                if wd[i] == f:
                    k = i
                    break
            if k >= 0:
                iz = wz[k]
                io = wo[k]
                _path_unwind(wd, wz, wo, ww, ud, k)
                ud -= 1

            new_len = ud + 1
            # snapshot the cold branch onto a fresh slot for later
            st_node[top] = cold
            st_len[top] = new_len
            st_pz[top] = cold_zf * iz
            st_po[top] = 0.0
            st_pi[top] = f
            for i in range(new_len):
                st_d[top, i] = wd[i]
                st_z[top, i] = wz[i]
                st_o[top, i] = wo[i]
                st_w[top, i] = ww[i]
            top += 1
            # descend the hot branch in place, reusing this slot's path
            st_node[slot] = hot
            st_len[slot] = new_len
            st_pz[slot] = hot_zf * iz
            st_po[slot] = io
            st_pi[slot] = f
            idx = slot


@njit(cache=True)
def predict_tree_into(feature, is_cat, threshold, cat_bits, default_left,
                      left, right, is_leaf, value, X, out):
    n = X.shape[0]
    for i in range(n):
        node = 0
        while is_leaf[node] == 0:
            f = feature[node]
            x = X[i, f]
            if x != x:  # NaN: learned default direction
                node = left[node] if default_left[node] else right[node]
            elif is_cat[node]:
                c = np.int64(x)
                if 0 <= c <= MAX_CATEGORIES and (cat_bits[node] >> np.uint64(c)) & np.uint64(1):
                    node = left[node]
                else:
                    node = right[node]
            else:
                node = left[node] if x <= threshold[node] else right[node]
        out[i] += value[node]
