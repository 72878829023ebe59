"""Shared finite-difference oracle and random-graph generator for gradient tests.

These run the graphs in float64; the checker re-evaluates the whole forward
function per perturbed entry, staying independent of the tape machinery it
verifies.
"""

import numpy as np

from ibrec import tensor as tn
from ibrec.tensor import Tape, Tensor


def max_rel_error(build_fn, leaves, h=1e-4):
    """Compare tape gradients of scalar build_fn() against central differences.

    `leaves` are watched float64 Tensors the function closes over.  Returns
    the maximum relative error over every entry of every leaf.
    """
    with Tape():
        loss = build_fn()
        tn.backward(loss)
    grads = [leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)
             for leaf in leaves]
    for leaf in leaves:
        leaf.grad = None

    worst = 0.0
    for leaf, grad in zip(leaves, grads):
        flat = leaf.data.ravel()
        gflat = grad.ravel()
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + h
            up = build_fn().item()
            flat[k] = keep - h
            down = build_fn().item()
            flat[k] = keep
            fd = (up - down) / (2.0 * h)
            scale = max(abs(fd), abs(gflat[k]), 1.0)
            worst = max(worst, abs(fd - gflat[k]) / scale)
    return worst


def random_graph(rng):
    """A random small computation mixing every primitive; returns (build_fn, leaves)."""
    rows, cols = int(rng.integers(2, 4)), int(rng.integers(2, 4))
    a = Tensor(rng.standard_normal((rows, cols)), watched=True)
    b = Tensor(rng.standard_normal((rows, cols)), watched=True)
    w = Tensor(rng.standard_normal((cols, 2)), watched=True)

    ops = rng.permutation(["tanh", "sigmoid", "relu", "exp", "mul", "add", "sub", "clip"])[:4]

    def build():
        t = tn.add(a, b)
        for name in ops:
            if name == "tanh":
                t = tn.tanh(t)
            elif name == "sigmoid":
                t = tn.sigmoid(t)
            elif name == "relu":
                t = tn.relu(tn.add(t, Tensor(np.full(t.data.shape, 0.1))))
            elif name == "exp":
                t = tn.exp(tn.mul(t, Tensor(np.full(t.data.shape, 0.5))))
            elif name == "mul":
                t = tn.mul(t, b)
            elif name == "add":
                t = tn.add(t, a)
            elif name == "sub":
                t = tn.sub(t, b)
            elif name == "clip":
                t = tn.clip(t, -3.0, 3.0)
        t = tn.log(tn.add(tn.sigmoid(t), Tensor(np.full(t.data.shape, 0.5))))
        proj = tn.matmul(t, w)
        left = tn.slice_axis(proj, 1, 0, 1)
        right = tn.slice_axis(proj, 1, 1, 2)
        joined = tn.concat([left, tn.transpose(tn.reshape(right, (1, rows)))], axis=1)
        return tn.add(tn.sum(joined), tn.mean(tn.mul(proj, proj)))

    return build, [a, b, w]
