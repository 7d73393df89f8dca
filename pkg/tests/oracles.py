"""Independent scalar-loop reference implementations.

Everything here is written directly from the mathematical definitions with
plain Python floats and index loops, deliberately sharing no code with the
package. Equivalence tests compare the vectorized implementations against
these references at tight tolerances.

Conventions mirrored from the definitions (not from the package code):

  * GRU step: z = s(x U_z + h W_z), r = s(x U_r + h W_r),
    c = tanh(x U_c + (h*r) W_c), h' = (1-z)*c + z*h, zero initial state.
  * Attention head: proj = h W; logit(i,j) = leaky(a1.proj_i + a2.proj_j)
    over the closed neighborhood of i; row softmax; agg_i = sum alpha_ij
    proj_j; heads are averaged and squashed with a sigmoid.
  * Two-step generation: v = z S1 + b1 reshaped row-major to (d_in, k),
    W = v S2 + b2; conv kernels reshape row-major to (C_in, C_out, Kh, Kw).
  * Causal convolution: output t sees inputs t, t-dil, ..., t-(K-1)*dil
    with zeros before the start; kernel tap K-1 multiplies the current
    input.
"""

from __future__ import annotations

import math

import numpy as np

LEAKY_SLOPE = 0.2


def sigmoid(v: float) -> float:
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def leaky(v: float, slope: float = LEAKY_SLOPE) -> float:
    return v if v >= 0 else slope * v


def vecmat(vec, mat):
    """(a,) @ (a, b) with explicit loops."""
    a = len(mat)
    b = len(mat[0])
    return [sum(float(vec[i]) * float(mat[i][j]) for i in range(a)) for j in range(b)]


def dot(u, v):
    return sum(float(a) * float(b) for a, b in zip(u, v))


# ---------------------------------------------------------------- encoder


def o_gru_cell(x, h, u_z, w_z, u_r, w_r, u_c, w_c):
    """Single instance: x (d,), h (k,) -> (k,)."""
    z = [sigmoid(a + b) for a, b in zip(vecmat(x, u_z), vecmat(h, w_z))]
    r = [sigmoid(a + b) for a, b in zip(vecmat(x, u_r), vecmat(h, w_r))]
    hr = [float(h[j]) * r[j] for j in range(len(h))]
    c = [math.tanh(a + b) for a, b in zip(vecmat(x, u_c), vecmat(hr, w_c))]
    return [(1.0 - z[j]) * c[j] + z[j] * float(h[j]) for j in range(len(h))]


def o_temporal(window, u_z, w_z, u_r, w_r, u_c, w_c):
    """window (T, N, d) -> (N, hidden), zero initial state per node."""
    steps, n, _ = np.asarray(window).shape
    hidden = len(w_z)
    out = []
    for node in range(n):
        h = [0.0] * hidden
        for t in range(steps):
            h = o_gru_cell(window[t][node], h, u_z, w_z, u_r, w_r, u_c, w_c)
        out.append(h)
    return np.array(out)


def o_neighborhoods(adjacency, self_loops=True):
    """Closed neighborhood sets, {center: sorted neighbor list}."""
    a = np.asarray(adjacency)
    n = a.shape[0]
    hoods = {}
    for i in range(n):
        nb = [j for j in range(n) if a[i][j] != 0 or (self_loops and i == j)]
        hoods[i] = nb
    return hoods


def o_attention_head(h, adjacency, weight, scorer, self_loops=True):
    """One head: h (N, d_s) -> (alpha dict, proj list).

    alpha[(i, j)] is the softmax weight of neighbor j for center i.
    """
    n = len(h)
    out_dim = len(weight[0])
    proj = [vecmat(h[i], weight) for i in range(n)]
    a1 = [float(scorer[c]) for c in range(out_dim)]
    a2 = [float(scorer[out_dim + c]) for c in range(out_dim)]
    hoods = o_neighborhoods(adjacency, self_loops)
    alpha = {}
    for i in range(n):
        logits = [leaky(dot(a1, proj[i]) + dot(a2, proj[j])) for j in hoods[i]]
        peak = max(logits)
        exps = [math.exp(v - peak) for v in logits]
        total = sum(exps)
        for j, e in zip(hoods[i], exps):
            alpha[(i, j)] = e / total
    return alpha, proj


def o_spatial(h, adjacency, head_weights, head_scorers, self_loops=True):
    """Multi-head neighborhood attention: (N, d_s) -> (N, d_out)."""
    n = len(h)
    out_dim = len(head_weights[0][0])
    acc = [[0.0] * out_dim for _ in range(n)]
    heads = len(head_weights)
    hoods = o_neighborhoods(adjacency, self_loops)
    for weight, scorer in zip(head_weights, head_scorers):
        alpha, proj = o_attention_head(h, adjacency, weight, scorer, self_loops)
        for i in range(n):
            for j in hoods[i]:
                for c in range(out_dim):
                    acc[i][c] += alpha[(i, j)] * proj[j][c]
    return np.array([[sigmoid(acc[i][c] / heads) for c in range(out_dim)] for i in range(n)])


def o_fuse(z_tp, z_sp, gamma_raw, w_out, gate=None):
    """(N, hid) x 2 -> (N, k)."""
    n = len(z_tp)
    hid = len(z_tp[0])
    g = [sigmoid(float(v)) for v in np.broadcast_to(gamma_raw, (hid,))] if gate is None else [
        float(v) for v in np.broadcast_to(gate, (hid,))
    ]
    blended = [
        [g[c] * float(z_tp[i][c]) + (1.0 - g[c]) * float(z_sp[i][c]) for c in range(hid)]
        for i in range(n)
    ]
    return np.array([vecmat(row, w_out) for row in blended])


# -------------------------------------------------------- reconstruction


def o_meta_graph(z):
    n = len(z)
    return np.array([[sigmoid(dot(z[i], z[j])) for j in range(n)] for i in range(n)])


def o_recon_loss(a_meta, a_target, normalize=False):
    n = len(a_meta)
    total = 0.0
    for i in range(n):
        for j in range(n):
            diff = float(a_meta[i][j]) - float(a_target[i][j])
            total += diff * diff
    return total / (n * n) if normalize else total


# ------------------------------------------------------------ generation


def o_gen_linear(z, d_in, d_out, s1_w, s2_w, s1_b=None, s2_b=None, bias_w=None, bias_b=None):
    """One embedding z (k,) -> (W (d_in, d_out), bias (d_out,) or None)."""
    k = len(z)
    lifted = vecmat(z, s1_w)
    if s1_b is not None:
        lifted = [lifted[i] + float(s1_b[i]) for i in range(len(lifted))]
    v = [[lifted[i * k + j] for j in range(k)] for i in range(d_in)]
    w = [vecmat(v[i], s2_w) for i in range(d_in)]
    if s2_b is not None:
        w = [[w[i][j] + float(s2_b[j]) for j in range(d_out)] for i in range(d_in)]
    bias = None
    if bias_w is not None:
        bias = vecmat(z, bias_w)
        if bias_b is not None:
            bias = [bias[j] + float(bias_b[j]) for j in range(d_out)]
    return np.array(w), (None if bias is None else np.array(bias))


def o_gen_conv(z, c_in, c_out, k_h, k_w, s1_w, s2_w, s1_b=None, s2_b=None, bias_w=None, bias_b=None):
    """One embedding z (k,) -> (kernel (C_in, C_out, Kh, Kw), bias or None).

    The bias head maps z straight to one value per output channel, so it is
    handled here rather than through the flat-weight helper.
    """
    flat, _ = o_gen_linear(z, c_in, c_out * k_h * k_w, s1_w, s2_w, s1_b, s2_b)
    bias = None
    if bias_w is not None:
        bias = vecmat(z, bias_w)
        if bias_b is not None:
            bias = [bias[j] + float(bias_b[j]) for j in range(c_out)]
        bias = np.array(bias)
    kernel = np.empty((c_in, c_out, k_h, k_w))
    for ci in range(c_in):
        for co in range(c_out):
            for a in range(k_h):
                for b in range(k_w):
                    kernel[ci][co][a][b] = flat[ci][co * k_h * k_w + a * k_w + b]
    return kernel, bias


def o_apply_generated_linear(x, weights, biases=None):
    """x (N, d_in) with per-node weights (N, d_in, d_out)."""
    n = len(x)
    out = []
    for node in range(n):
        row = vecmat(x[node], weights[node])
        if biases is not None:
            row = [row[j] + float(biases[node][j]) for j in range(len(row))]
        out.append(row)
    return np.array(out)


# -------------------------------------------------------------- network


def o_extract_gru(window, mats_per_node):
    """window (T, N, d); mats_per_node[n] is a dict of the six matrices."""
    steps, n, _ = np.asarray(window).shape
    out = []
    for node in range(n):
        m = mats_per_node[node]
        hidden = len(m["w_z"])
        h = [0.0] * hidden
        for t in range(steps):
            h = o_gru_cell(window[t][node], h, m["u_z"], m["w_z"], m["u_r"], m["w_r"], m["u_c"], m["w_c"])
        out.append(h)
    return np.array(out)


def o_causal_conv(x, kernel, bias, dilation):
    """x (C_in, T), kernel (C_in, C_out, 1, K) -> (C_out, T).

    Tap K-1 multiplies the current step, earlier taps reach back by the
    dilation; indices before the series start contribute zero.
    """
    c_in, length = np.asarray(x).shape
    c_out = len(kernel[0])
    taps = len(kernel[0][0][0])
    y = np.zeros((c_out, length))
    for co in range(c_out):
        for t in range(length):
            acc = 0.0 if bias is None else float(bias[co])
            for tap in range(taps):
                src = t - (taps - 1 - tap) * dilation
                if src < 0:
                    continue
                for ci in range(c_in):
                    acc += float(kernel[ci][co][0][tap]) * float(x[ci][src])
            y[co][t] = acc
    return y


def o_extract_tcn(window, branches_per_node):
    """window (T, N, d); branches_per_node[n] is a list of branches, each a
    list of (kernel, bias, dilation) layers; relu between layers, final-step
    outputs summed over branches."""
    steps, n, d = np.asarray(window).shape
    out = []
    for node in range(n):
        total = None
        for layers in branches_per_node[node]:
            y = np.array([[float(window[t][node][f]) for t in range(steps)] for f in range(d)])
            for idx, (kernel, bias, dilation) in enumerate(layers):
                y = o_causal_conv(y, kernel, bias, dilation)
                if idx + 1 < len(layers):
                    y = np.maximum(y, 0.0)
            last = y[:, -1]
            total = last if total is None else total + last
        out.append(total)
    return np.array(out)


def o_predict(features, w, b, horizon, out_dim):
    """features (N, F) -> (M, N, d)."""
    n = len(features)
    pred = np.empty((horizon, n, out_dim))
    for node in range(n):
        flat = vecmat(features[node], w)
        flat = [flat[j] + float(b[j]) for j in range(len(flat))]
        for m in range(horizon):
            for f in range(out_dim):
                pred[m][node][f] = flat[m * out_dim + f]
    return pred


def o_spatial_input(window):
    """Node-major flattening: (T, N, d) -> (N, T*d), index t*d + f."""
    steps, n, d = np.asarray(window).shape
    return np.array(
        [[float(window[t][node][f]) for t in range(steps) for f in range(d)] for node in range(n)]
    )


def o_forward(window, adjacency, arr, cfg):
    """Full-model forward for one (T, N, d) window, ablation 'none'.

    ``arr`` maps parameter segment names to numpy arrays using the same
    naming the package uses; ``cfg`` is a dict with horizon, in_dim, heads,
    extractor ('gru' or 'tcn'), hidden_dim, kernel_sizes, meta_dim.
    Returns (pred (M, N, d), a_meta (N, N)).
    """
    z_tp = o_temporal(
        window,
        arr["temporal.u_z"], arr["temporal.w_z"],
        arr["temporal.u_r"], arr["temporal.w_r"],
        arr["temporal.u_c"], arr["temporal.w_c"],
    )
    h_sp = o_spatial_input(window)
    weights = [arr[f"spatial.w.{h}"] for h in range(cfg["heads"])]
    scorers = [arr[f"spatial.a.{h}"] for h in range(cfg["heads"])]
    z_sp = o_spatial(h_sp, adjacency, weights, scorers)
    z = o_fuse(z_tp, z_sp, arr["fuse.gamma_raw"], arr["fuse.w_out"])
    a_meta = o_meta_graph(z)

    n = len(z)
    if cfg["extractor"] == "gru":
        mats = []
        for node in range(n):
            per = {}
            for name in ("u_z", "w_z", "u_r", "w_r", "u_c", "w_c"):
                pre = f"gen.{name}"
                d_in = cfg["in_dim"] if name.startswith("u") else cfg["hidden_dim"]
                w, _ = o_gen_linear(
                    z[node], d_in, cfg["hidden_dim"],
                    arr[f"{pre}.step1.w"], arr[f"{pre}.step2.w"],
                    arr.get(f"{pre}.step1.b"), arr.get(f"{pre}.step2.b"),
                )
                per[name] = w
            mats.append(per)
        features = o_extract_gru(window, mats)
    else:
        branches = []
        for node in range(n):
            node_branches = []
            for ks in cfg["kernel_sizes"]:
                layers = []
                for layer in range(2):
                    c_in = cfg["in_dim"] if layer == 0 else cfg["hidden_dim"]
                    pre = f"gen.tcn{ks}.l{layer}"
                    kernel, bias = o_gen_conv(
                        z[node], c_in, cfg["hidden_dim"], 1, ks,
                        arr[f"{pre}.step1.w"], arr[f"{pre}.step2.w"],
                        arr.get(f"{pre}.step1.b"), arr.get(f"{pre}.step2.b"),
                        arr.get(f"{pre}.bias.w"), arr.get(f"{pre}.bias.b"),
                    )
                    layers.append((kernel, bias, 2 ** layer))
                node_branches.append(layers)
            branches.append(node_branches)
        features = o_extract_tcn(window, branches)

    pred = o_predict(features, arr["predictor.w"], arr["predictor.b"], cfg["horizon"], cfg["in_dim"])
    return pred, a_meta


def o_joint_loss(xs, ys, adjacency, arr, cfg, lam, normalize):
    """Batch joint objective: mean squared error + lam * mean recon loss."""
    sq = 0.0
    count = 0
    recon = 0.0
    for x, y in zip(xs, ys):
        pred, a_meta = o_forward(x, adjacency, arr, cfg)
        err = pred - np.asarray(y)
        sq += float((err * err).sum())
        count += err.size
        recon += o_recon_loss(a_meta, adjacency, normalize)
    return sq / count + lam * recon / len(xs)
