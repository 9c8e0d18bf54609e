"""Central finite-difference verification of backward passes.

The oracle perturbs leaf tensors in place and rebuilds the graph for every
probe, so it is independent of any particular backward implementation.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def numeric_grad(f: Callable[[], Tensor], t: Tensor, eps: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of the scalar f() with respect to t.data.

    Returns a dense array shaped like t; when ``coords`` (flat indices) is
    given, only those entries are probed and the rest stay zero.
    """
    flat = t.data.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f().data)
        flat[i] = orig - eps
        lo = float(f().data)
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(t.data.shape)


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = float(np.linalg.norm(analytic - numeric))
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    # structurally zero gradients (e.g. key biases under softmax shift
    # invariance) leave only finite-difference noise; compare absolutely then
    if denom < 1e-8:
        return diff
    return diff / denom


def check_gradients(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and finite differences.

    ``f`` must rebuild the graph from the given leaf tensors on every call.
    Large tensors can be spot-checked by sampling ``max_coords`` coordinates.
    """
    for t in tensors:
        t.grad = None
    loss = f()
    ad.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        coords = None
        if max_coords is not None and t.data.size > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(t.data.size, size=max_coords, replace=False)
        numeric = numeric_grad(f, t, eps=eps, coords=coords)
        if coords is not None:
            sel = np.asarray(coords)
            err = _relative_error(analytic.reshape(-1)[sel], numeric.reshape(-1)[sel])
        else:
            err = _relative_error(analytic, numeric)
        worst = max(worst, err)
    return worst


def run_suite(seed: int = 0) -> list[tuple[str, float]]:
    """Finite-difference checks for every differentiable op plus the model.

    Returns (name, max relative error) pairs; all must come in below 1e-4.
    """
    rng = np.random.default_rng(seed)
    results: list[tuple[str, float]] = []

    def rt(*shape):
        return Tensor(rng.standard_normal(shape))

    a, b = rt(3, 4), rt(4, 2)
    results.append(("matmul", check_gradients(lambda: ad.matmul(a, b).sum(), [a, b])))

    ab, bb = rt(2, 3, 4), rt(2, 4, 5)
    results.append(("matmul_batched", check_gradients(lambda: ad.matmul(ab, bb).sum(), [ab, bb])))

    x, w, bias = rt(2, 3), rt(3, 4), rt(4)
    results.append(("linear", check_gradients(lambda: ad.linear(x, w, bias).sum(), [x, w, bias])))

    s = rt(5)
    results.append(("softmax_lastdim", check_gradients(lambda: (ad.softmax_lastdim(s) * rt_fixed).sum(), [s])))

    r = rt(3, 4)
    results.append(("relu", check_gradients(lambda: ad.relu(r).sum(), [r])))

    m1, m2 = rt(3, 4), rt(3, 4)
    results.append(("add_mul", check_gradients(lambda: (ad.add(m1, m2) * m2).sum(), [m1, m2])))

    mm = rt(4, 3)
    results.append(("mean", check_gradients(lambda: (ad.tmean(mm, axis=1) * rt_fixed3).sum(), [mm])))

    ln_x, ln_g, ln_b = rt(4, 6), rt(6), rt(6)
    results.append(
        ("layernorm", check_gradients(lambda: (ad.layernorm(ln_x, ln_g, ln_b) * ln_probe).sum(), [ln_x, ln_g, ln_b]))
    )

    bn_x, bn_g, bn_b = rt(8, 3), rt(3), rt(3)

    def bn_loss():
        state = ad.BatchNormState(3)
        return (ad.batchnorm(bn_x, bn_g, bn_b, state, training=True) * bn_probe).sum()

    results.append(("batchnorm", check_gradients(bn_loss, [bn_x, bn_g, bn_b])))

    ce_logits = rt(3, 4)
    ce_labels = rng.integers(0, 4, size=3)
    results.append(("cross_entropy", check_gradients(lambda: ad.cross_entropy(ce_logits, ce_labels), [ce_logits])))

    tk = rt(5, 3)
    results.append(
        ("take_concat", check_gradients(lambda: ad.concat([ad.take(tk, [0, 2, 2, 4]), tk], axis=0).sum(), [tk]))
    )

    from . import attention as attn

    p = attn.init_attention_params(channels=8, heads=2, intra=True, rng=rng)
    q, k, v = rt(3, 8), rt(4, 8), rt(4, 8)
    results.append(
        ("mhsa", check_gradients(lambda: (attn.mhsa(q, k, v, heads=2) * mh_probe).sum(), [q, k, v]))
    )

    si_x = rt(3 * 2 + 1, 8)
    si_leaves = [si_x] + [t for t in p.tensors() if t is not None]
    results.append(
        (
            "s_iipa",
            check_gradients(
                lambda: (attn.s_iipa(si_x, p, attn.AttentionConfig(), parts=3, frames=2) * si_probe).sum(),
                si_leaves,
            ),
        )
    )
    results.append(
        (
            "t_iipa",
            check_gradients(
                lambda: (attn.t_iipa(si_x, p, attn.AttentionConfig(), parts=3, frames=2) * si_probe).sum(),
                si_leaves,
            ),
        )
    )
    results.append(
        (
            "flat_attention",
            check_gradients(
                lambda: (attn.flat_attention_layer(si_x, p, attn.AttentionConfig()) * si_probe).sum(),
                si_leaves,
            ),
        )
    )

    results.append(("model_end_to_end", model_end_to_end_check(seed)))
    return results


def model_end_to_end_check(seed: int = 0, coords_per_tensor: int = 4) -> float:
    """Loss-vs-weights finite differences through the full network."""
    from . import model as mdl
    from .skeldata import default_partition_map

    rng = np.random.default_rng(seed + 17)
    cfg = mdl.ModelConfig(num_classes=3, frames=4, channels=16, encoder_channels=8, heads=2, layers=1)
    params = mdl.init_params(cfg, seed=seed)
    coords = rng.standard_normal((3, cfg.frames, 25, 1))
    label = 1

    named = params.named_tensors()
    leaves = list(named.values())

    def loss():
        logits = mdl.forward_coords(coords, params, cfg, mode="eval")
        return ad.cross_entropy(logits, label)

    return check_gradients(loss, leaves, max_coords=coords_per_tensor, rng=rng)


# Fixed random probe vectors so suite losses are not plain sums (plain sums
# can hide systematic backward errors for normalizing ops).
_probe_rng = np.random.default_rng(1234)
rt_fixed = Tensor(_probe_rng.standard_normal(5))
rt_fixed3 = Tensor(_probe_rng.standard_normal(4))
ln_probe = Tensor(_probe_rng.standard_normal((4, 6)))
bn_probe = Tensor(_probe_rng.standard_normal((8, 3)))
mh_probe = Tensor(_probe_rng.standard_normal((3, 8)))
si_probe = Tensor(_probe_rng.standard_normal((7, 8)))
