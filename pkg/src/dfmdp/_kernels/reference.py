"""Pure numpy reference implementations of the hot kernels.

Semantics here are the contract; the compiled backend must match within
floating-point reassociation. Each backend is bit-reproducible on its own.
"""
import numpy as np


def mlp_slices(in_dim: int, h1: int, h2: int, n_actions: int):
    """Flat layout of a 2-hidden-layer MLP: [w1, b1, w2, b2, w3, b3]."""
    shapes = [("w1", (in_dim, h1)), ("b1", (h1,)), ("w2", (h1, h2)),
              ("b2", (h2,)), ("w3", (h2, n_actions)), ("b3", (n_actions,))]
    out = []
    off = 0
    for name, shape in shapes:
        n = int(np.prod(shape))
        out.append((name, slice(off, off + n), shape))
        off += n
    return out, off


def _unpack(flat, dims):
    slices, total = mlp_slices(*dims)
    if flat.size != total:
        raise ValueError("ddqn kernel: parameter vector length mismatch")
    return {name: flat[sl].reshape(shape) for name, sl, shape in slices}


def mlp_q(x, flat, dims):
    """Batched Q-network forward: relu(relu(x w1 + b1) w2 + b2) w3 + b3."""
    p = _unpack(np.asarray(flat), dims)
    h = np.maximum(x @ p["w1"] + p["b1"], 0.0)
    h = np.maximum(h @ p["w2"] + p["b2"], 0.0)
    return h @ p["w3"] + p["b3"]


def soft_vi_loop(reward_next, next_idx, gamma, beta, iters, q, tail):
    """Run ``iters`` soft Bellman backups in place on the Q-table ``q``.

    Backup: Q(s,a) <- r(s,a) + gamma * sum_a' softmax(beta Q(s',:))_a' Q(s',a')
    with deterministic successors ``next_idx``. ``tail`` (length t) receives
    the last t sup-norm residuals in iteration order.
    """
    tlen = tail.shape[0]
    tail[:] = 0.0
    for it in range(iters):
        z = beta * q
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        v = (p * q).sum(axis=1)
        q_new = reward_next + gamma * v[next_idx]
        resid = np.abs(q_new - q).max()
        left = iters - it
        if left <= tlen:
            tail[tlen - left] = resid
        q[:] = q_new
    if not np.all(np.isfinite(q)):
        raise FloatingPointError("soft value iteration diverged to non-finite Q")


def ddqn_step(flat, target_flat, adam_m, adam_v, step_count,
              xs, acts, rews, xns, done,
              gamma, beta, lr, beta1, beta2, eps, dims):
    """One soft double-DQN gradient step with Adam; mutates flat/adam_m/adam_v.

    Target: y = r + gamma * (1 - done) * sum_a' softmax(beta q_online(s'))_a'
    * q_target(s', a'). Returns the minibatch mean squared TD error.
    """
    p = _unpack(flat, dims)
    B = xs.shape[0]

    # forward on s with caches for the backward pass
    z1 = xs @ p["w1"] + p["b1"]
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ p["w2"] + p["b2"]
    h2 = np.maximum(z2, 0.0)
    q = h2 @ p["w3"] + p["b3"]

    # soft double-DQN target (no gradient flows through it)
    qn_online = mlp_q(xns, flat, dims)
    qn_target = mlp_q(xns, target_flat, dims)
    zz = beta * qn_online
    zz = zz - zz.max(axis=1, keepdims=True)
    ez = np.exp(zz)
    probs = ez / ez.sum(axis=1, keepdims=True)
    y = rews + gamma * (1.0 - done) * (probs * qn_target).sum(axis=1)

    idx = np.arange(B)
    td = q[idx, acts] - y
    loss = float(np.mean(td * td))

    gq = np.zeros_like(q)
    gq[idx, acts] = 2.0 * td / B

    gw3 = h2.T @ gq
    gb3 = gq.sum(axis=0)
    gh2 = (gq @ p["w3"].T) * (z2 > 0)
    gw2 = h1.T @ gh2
    gb2 = gh2.sum(axis=0)
    gh1 = (gh2 @ p["w2"].T) * (z1 > 0)
    gw1 = xs.T @ gh1
    gb1 = gh1.sum(axis=0)

    grad = np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2,
                           gw3.ravel(), gb3])

    adam_m *= beta1
    adam_m += (1.0 - beta1) * grad
    adam_v *= beta2
    adam_v += (1.0 - beta2) * grad * grad
    mhat = adam_m / (1.0 - beta1 ** step_count)
    vhat = adam_v / (1.0 - beta2 ** step_count)
    flat -= lr * mhat / (np.sqrt(vhat) + eps)
    return loss
