"""Independent reference computations used by the tests."""
import numpy as np

from gflsim.encoder import AggregatedContext, ModelParams

FD_STEP = 1e-6


def forward(x, w1, w2):
    return np.maximum(x @ w1, 0.0) @ w2


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def frozen_context_loss(x, y, w: ModelParams, ctx: AggregatedContext, a_kk, w_eval: ModelParams):
    """Mean CE of Softmax(a_kk h(W) + C + dC (W - W_eval)): the context is linear in W around W_eval."""
    c = ctx.c_vec + ctx.c_jac @ (w.flat() - w_eval.flat())
    z = a_kk * forward(np.atleast_2d(x), w.w1, w.w2) + c
    p = softmax(z)
    return float(-np.mean(np.sum(np.atleast_2d(y) * np.log(p), axis=1)))


def fd_gradient(fn, w: ModelParams, step=FD_STEP):
    base = w.flat()
    g = np.zeros_like(base)
    for q in range(len(base)):
        up, dn = base.copy(), base.copy()
        up[q] += step
        dn[q] -= step
        g[q] = (fn(ModelParams.from_flat(up, *w.shape)) - fn(ModelParams.from_flat(dn, *w.shape))) / (2 * step)
    return g


def fd_jacobian(x, w: ModelParams, step=FD_STEP):
    base = w.flat()
    jac = np.zeros((w.c, len(base)))
    for q in range(len(base)):
        up, dn = base.copy(), base.copy()
        up[q] += step
        dn[q] -= step
        hu = forward(x, *ModelParams.from_flat(up, *w.shape).__dict__.values())
        hd = forward(x, *ModelParams.from_flat(dn, *w.shape).__dict__.values())
        jac[:, q] = (hu - hd) / (2 * step)
    return jac


def near_kink(x, w: ModelParams, margin=1e-4) -> bool:
    return bool(np.any(np.abs(np.atleast_2d(x) @ w.w1) < margin))


def rel_err(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def centralized_appnp_step(x, y, labeled, a_tilde, w1, w2, eta):
    """One full-batch gradient step on F(W) = mean over labeled k of CE(y_k, Softmax((A H)_k)).

    Written directly as reverse-mode over the dense graph model.
    """
    pre = x @ w1
    act = np.maximum(pre, 0.0)
    h = act @ w2
    z = a_tilde @ h
    p = softmax(z)
    dz = np.zeros_like(z)
    dz[labeled] = (p[labeled] - y[labeled]) / len(labeled)
    dh = a_tilde.T @ dz
    dw2 = act.T @ dh
    dpre = (dh @ w2.T) * (pre > 0)
    dw1 = x.T @ dpre
    return w1 - eta * dw1, w2 - eta * dw2


def centralized_mlp_step(x, y, w1, w2, eta):
    pre = x @ w1
    act = np.maximum(pre, 0.0)
    p = softmax(act @ w2)
    dh = (p - y) / len(x)
    dw2 = act.T @ dh
    dw1 = x.T @ ((dh @ w2.T) * (pre > 0))
    return w1 - eta * dw1, w2 - eta * dw2
