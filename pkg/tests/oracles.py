"""Independent reference implementations used as test oracles.

Nothing here imports the package's im2col path; the oracles are written
from the textbook definitions with explicit loops.
"""
from __future__ import annotations

import numpy as np


def naive_conv2d(x, w, b, stride, padding):
    """Direct six-loop cross-correlation."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    xp = np.zeros((n, cin, h + 2 * ph, wd + 2 * pw), dtype=np.float64)
    xp[:, :, ph:ph + h, pw:pw + wd] = x
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for i in range(n):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    acc = b[o]
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ci, r * sh + u, c * sw + v] * w[o, ci, u, v]
                    out[i, o, r, c] = acc
    return out


def naive_mean_pool(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, 1, 1))
    for i in range(n):
        for j in range(c):
            total = 0.0
            for r in range(h):
                for s in range(w):
                    total += x[i, j, r, s]
            out[i, j, 0, 0] = total / (h * w)
    return out


def numerical_grad(f, x, eps=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def adam_scalar(theta0, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Published Adam update on a single float, written with plain Python arithmetic."""
    theta, m, v = float(theta0), 0.0, 0.0
    traj = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * mhat / (vhat ** 0.5 + eps)
        traj.append(theta)
    return traj


def dfs_toposort(spec):
    """Reverse post-order DFS; independent of the validator's Kahn queue."""
    by_id = {n.id: n for n in spec.nodes}
    state, order = {}, []

    def visit(nid):
        if state.get(nid) == 2:
            return
        if state.get(nid) == 1:
            raise ValueError(f"cycle through {nid}")
        state[nid] = 1
        for src in by_id[nid].inputs:
            visit(src)
        state[nid] = 2
        order.append(nid)

    for n in spec.nodes:
        visit(n.id)
    return order


# --------------------------------------------------------------------------
# finite-difference cases for every layer backward

GRAD_KINDS = ("conv", "relu", "add", "concat", "gap", "dense", "xent")


def gradcheck_case(kind, rng):
    """Build one random double-precision instance of ``kind``.

    Returns a list of ``(label, analytic, numeric)`` gradient pairs for the
    scalar loss ``sum(forward(...) * R)`` with a fixed random ``R``.
    """
    from nanonet import tensor_ops as T

    def rnd(*shape):
        return rng.standard_normal(shape)

    if kind == "conv":
        n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        kh, kw = rng.choice([1, 2, 3], size=2)
        sh, sw = rng.integers(1, 3, size=2)
        ph, pw = rng.integers(0, 2, size=2)
        h, w = rng.integers(kh, kh + 4), rng.integers(kw, kw + 4)
        x = rnd(n, cin, h, w)
        p = T.LayerParams(rnd(cout, cin, kh, kw), rnd(cout))
        stride, pad = (int(sh), int(sw)), (int(ph), int(pw))
        r = rnd(*T.conv2d_forward(x, p, stride, pad).shape)
        loss = lambda: float((T.conv2d_forward(x, p, stride, pad) * r).sum())  # noqa: E731
        gx, gw, gb = T.conv2d_backward(x, p, r, stride, pad)
        return [("conv.x", gx, numerical_grad(loss, x)), ("conv.w", gw, numerical_grad(loss, p.weights)),
                ("conv.b", gb, numerical_grad(loss, p.bias))]
    if kind == "relu":
        x = rnd(2, 3, 4, 4)
        x[np.abs(x) < 1e-3] = 0.5  # stay away from the kink
        r = rnd(*x.shape)
        loss = lambda: float((T.relu(x) * r).sum())  # noqa: E731
        return [("relu.x", T.relu_backward(x, r), numerical_grad(loss, x))]
    if kind == "add":
        k = int(rng.integers(2, 4))
        xs = [rnd(2, 3, 3, 2) for _ in range(k)]
        r = rnd(2, 3, 3, 2)
        loss = lambda: float((T.add_merge(*xs) * r).sum())  # noqa: E731
        grads = T.add_backward(r, k)
        return [(f"add.x{i}", grads[i], numerical_grad(loss, xs[i])) for i in range(k)]
    if kind == "concat":
        chans = [int(c) for c in rng.integers(1, 4, size=int(rng.integers(1, 4)))]
        xs = [rnd(2, c, 3, 3) for c in chans]
        r = rnd(2, sum(chans), 3, 3)
        loss = lambda: float((T.concat_channels(xs) * r).sum())  # noqa: E731
        grads = T.concat_backward(r, chans)
        return [(f"concat.x{i}", grads[i], numerical_grad(loss, xs[i])) for i in range(len(xs))]
    if kind == "gap":
        x = rnd(int(rng.integers(1, 3)), 3, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        r = rnd(x.shape[0], 3, 1, 1)
        loss = lambda: float((T.global_avg_pool(x) * r).sum())  # noqa: E731
        return [("gap.x", T.global_avg_pool_backward(x.shape, r), numerical_grad(loss, x))]
    if kind == "dense":
        n, i, o = (int(v) for v in rng.integers(1, 6, size=3))
        x = rnd(n, i, 1, 1)
        p = T.LayerParams(rnd(o, i, 1, 1), rnd(o))
        r = rnd(n, o, 1, 1)
        loss = lambda: float((T.dense_forward(x, p) * r).sum())  # noqa: E731
        gx, gw, gb = T.dense_backward(x, p, r)
        return [("dense.x", gx, numerical_grad(loss, x)), ("dense.w", gw, numerical_grad(loss, p.weights)),
                ("dense.b", gb, numerical_grad(loss, p.bias))]
    if kind == "xent":
        n, k = int(rng.integers(1, 5)), int(rng.integers(2, 8))
        z = rnd(n, k, 1, 1) * 3
        y = rng.integers(0, k, size=n)
        loss = lambda: T.softmax_xent(z, y)[0]  # noqa: E731
        return [("xent.logits", T.softmax_xent(z, y)[1], numerical_grad(loss, z))]
    raise ValueError(kind)


def generated_specs(count, seed=0):
    """Both references plus seeded mutation chains of them (distinct structures)."""
    from nanonet.arch import build_reference
    from nanonet.explorer import mutate

    rng = np.random.default_rng(seed)
    specs = [build_reference("nano_b_like"), build_reference("nano_a_like")]
    keys = {s.content_hash() for s in specs}
    while len(specs) < count:
        cur = specs[int(rng.integers(len(specs)))]
        for _ in range(int(rng.integers(1, 4))):
            cur = mutate(cur, rng)
        if cur.content_hash() not in keys:
            keys.add(cur.content_hash())
            specs.append(cur)
    return specs


# --------------------------------------------------------------------------
# toy exploration space: two 3x3 convs with widths drawn from WIDTHS

WIDTHS = (4, 8, 12, 16)
TOY_HW = 6


def toy_spec(w1, w2, hw=TOY_HW):
    from nanonet.arch import ArchSpec, LayerNode

    nodes = (LayerNode("c1", "conv", (), kernel=(3, 3), out_channels=w1),
             LayerNode("r1", "relu", ("c1",)),
             LayerNode("c2", "conv", ("r1",), kernel=(3, 3), out_channels=w2),
             LayerNode("r2", "relu", ("c2",)),
             LayerNode("gap", "global_avg_pool", ("r2",)),
             LayerNode("fc", "dense", ("gap",), out_channels=7),
             LayerNode("head", "softmax_head", ("fc",)))
    return ArchSpec("toy", (1, hw, hw), nodes, "head")


def toy_accuracy(w1, w2):
    return min(1.0, 0.86 + 0.005 * w1 + 0.004 * w2)


def toy_evaluate(spec, _parent=None):
    by_id = spec.by_id
    return toy_accuracy(by_id["c1"].out_channels, by_id["c2"].out_channels), None


def toy_counts(w1, w2):
    """Closed-form parameter and MAC counts of ``toy_spec``."""
    hw = TOY_HW * TOY_HW
    params = (9 * w1 + w1) + (9 * w1 * w2 + w2) + (7 * w2 + 7)
    macs = 9 * w1 * hw + 9 * w1 * w2 * hw + 7 * w2
    return params, macs


def u_reference(acc, params, macs, alpha=2, beta=0.5, gamma=0.5):
    """Same score in 50-digit decimal arithmetic."""
    from decimal import Decimal, getcontext

    getcontext().prec = 50
    p = max(Decimal(params) / Decimal(10**6), Decimal("0.001"))
    m = max(Decimal(macs) / Decimal(10**6), Decimal("0.001"))
    a = Decimal(repr(acc)) * 100
    u = 20 * (Decimal(repr(alpha)) * a.log10() - Decimal(repr(beta)) * p.log10()
              - Decimal(repr(gamma)) * m.log10())
    return float(u)


def toy_enumeration_best(min_accuracy, max_params):
    """Exhaustive argmax-U over the 16 feasible/infeasible toy candidates."""
    best = None
    for w1 in WIDTHS:
        for w2 in WIDTHS:
            acc = toy_accuracy(w1, w2)
            params, macs = toy_counts(w1, w2)
            if acc >= min_accuracy and params <= max_params:
                u = u_reference(acc, params, macs)
                if best is None or u > best[0]:
                    best = (u, w1, w2)
    return best
