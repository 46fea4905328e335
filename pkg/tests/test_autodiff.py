"""Gradient checks for the reverse-mode engine.

Every differentiable op is validated against central finite differences in
float64 with steps scaled by input magnitude; a composed residual-block
graph is checked end to end at a looser tolerance.  These helpers are also
driven by the acceptance suite.
"""

from __future__ import annotations

import numpy as np
import pytest

from shapesculpt import autodiff as ad

OP_TOL = 1e-4
COMPOSED_TOL = 1e-3


def fd_gradient(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar function at x (float64)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.ravel()
    flat_g = grad.ravel()
    for i in range(flat_x.size):
        step = h * max(1.0, abs(flat_x[i]))
        orig = flat_x[i]
        flat_x[i] = orig + step
        f_plus = f(x)
        flat_x[i] = orig - step
        f_minus = f(x)
        flat_x[i] = orig
        flat_g[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute gap normalized by the larger gradient magnitude."""
    denom = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / denom)


def check_grad(build, inputs: dict[str, np.ndarray], wrt: str, tol: float = OP_TOL) -> float:
    """Compare the engine gradient of ``wrt`` against finite differences.

    ``build`` maps {name: Tensor} to a scalar loss Tensor; ``inputs`` holds
    float64 arrays.  Returns the relative error (and asserts it).
    """
    tensors = {k: ad.Tensor(v.astype(np.float64), requires_grad=(k == wrt)) for k, v in inputs.items()}
    loss = build(tensors)
    ad.backward(loss)
    analytic = tensors[wrt].grad.copy()

    def scalar_fn(x):
        local = {
            k: ad.Tensor(x if k == wrt else v.astype(np.float64))
            for k, v in inputs.items()
        }
        return float(build(local).data)

    numeric = fd_gradient(scalar_fn, inputs[wrt])
    err = rel_err(analytic, numeric)
    assert err < tol, f"gradient wrt {wrt}: rel err {err:.3e} >= {tol}"
    return err


def projection_loss(out: ad.Tensor, rng: np.random.Generator) -> ad.Tensor:
    """Random linear functional of an op output, fixing a scalar objective."""
    r = ad.Tensor(rng.standard_normal(out.data.shape))
    return ad.sum_all(ad.mul(out, r))


# The op checks below are collected by name so the acceptance gate can rerun
# the identical suite; see tests/test_acceptance.py.

def op_check_add(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4, 4, 4))
    b = rng.standard_normal((3, 4, 4, 4))
    r = rng.standard_normal((3, 4, 4, 4))

    def build(t):
        return ad.sum_all(ad.mul(ad.add(t["a"], t["b"]), ad.Tensor(r)))

    e1 = check_grad(build, {"a": a, "b": b}, "a")
    e2 = check_grad(build, {"a": a, "b": b}, "b")
    return max(e1, e2)


def op_check_mul(seed: int = 1) -> float:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal((2, 3, 3, 3))
    r = rng.standard_normal((2, 3, 3, 3))

    def build(t):
        return ad.sum_all(ad.mul(ad.mul(t["a"], t["b"]), ad.Tensor(r)))

    return max(check_grad(build, {"a": a, "b": b}, "a"), check_grad(build, {"a": a, "b": b}, "b"))


def op_check_scale(seed: int = 2) -> float:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((4, 5))
    r = rng.standard_normal((4, 5))

    def build(t):
        return ad.sum_all(ad.mul(ad.scale(t["a"], -1.7), ad.Tensor(r)))

    return check_grad(build, {"a": a}, "a")


def op_check_silu(seed: int = 3) -> float:
    rng = np.random.default_rng(seed)
    a = 2.0 * rng.standard_normal((2, 4, 4, 4))
    r = rng.standard_normal((2, 4, 4, 4))

    def build(t):
        return ad.sum_all(ad.mul(ad.silu(t["a"]), ad.Tensor(r)))

    return check_grad(build, {"a": a}, "a")


def op_check_linear(seed: int = 4) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 7))
    w = rng.standard_normal((6, 7))
    b = rng.standard_normal(6)
    r = rng.standard_normal((5, 6))

    def build(t):
        return ad.sum_all(ad.mul(ad.linear(t["x"], t["w"], t["b"]), ad.Tensor(r)))

    errs = [check_grad(build, {"x": x, "w": w, "b": b}, name) for name in ("x", "w", "b")]
    x1 = rng.standard_normal(7)
    r1 = rng.standard_normal(6)

    def build1(t):
        return ad.sum_all(ad.mul(ad.linear(t["x"], t["w"], t["b"]), ad.Tensor(r1)))

    errs.append(check_grad(build1, {"x": x1, "w": w, "b": b}, "x"))
    errs.append(check_grad(build1, {"x": x1, "w": w, "b": b}, "w"))
    return max(errs)


def op_check_reshape(seed: int = 5) -> float:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 3, 4))
    r = rng.standard_normal((6, 4))

    def build(t):
        return ad.sum_all(ad.mul(ad.reshape(t["a"], (6, 4)), ad.Tensor(r)))

    return check_grad(build, {"a": a}, "a")


def op_check_conv3(seed: int = 6) -> float:
    rng = np.random.default_rng(seed)
    errs = []
    for stride, padding, with_bias, batched in [(1, 1, True, True), (2, 1, True, False), (1, 0, False, True)]:
        shape = (2, 3, 4, 4, 4) if batched else (3, 4, 4, 4)
        x = rng.standard_normal(shape)
        w = rng.standard_normal((4, 3, 3, 3, 3)) / 5.0
        b = rng.standard_normal(4)
        inputs = {"x": x, "w": w}
        if with_bias:
            inputs["b"] = b
        probe = {}

        def build(t, stride=stride, padding=padding, with_bias=with_bias):
            out = ad.conv3(t["x"], t["w"], t.get("b") if with_bias else None, stride=stride, padding=padding)
            if "r" not in probe:
                probe["r"] = np.random.default_rng(seed + 99).standard_normal(out.data.shape)
            return ad.sum_all(ad.mul(out, ad.Tensor(probe["r"])))

        for name in inputs:
            errs.append(check_grad(build, inputs, name))
    return max(errs)


def op_check_group_norm(seed: int = 7) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 6, 3, 3, 3))
    gamma = 1.0 + 0.3 * rng.standard_normal(6)
    beta = 0.3 * rng.standard_normal(6)
    r = rng.standard_normal((2, 6, 3, 3, 3))

    def build(t):
        out = ad.group_norm(t["x"], t["g"], t["b"], groups=3)
        return ad.sum_all(ad.mul(out, ad.Tensor(r)))

    inputs = {"x": x, "g": gamma, "b": beta}
    return max(check_grad(build, inputs, n) for n in ("x", "g", "b"))


def op_check_upsample2(seed: int = 8) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 3, 3, 3))
    r = rng.standard_normal((3, 6, 6, 6))

    def build(t):
        return ad.sum_all(ad.mul(ad.upsample2(t["x"]), ad.Tensor(r)))

    return check_grad(build, {"x": x}, "x")


def op_check_downsample2(seed: int = 9) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 3, 6, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3, 3)) / 5.0
    b = rng.standard_normal(4)
    r = rng.standard_normal((1, 4, 3, 3, 3))

    def build(t):
        return ad.sum_all(ad.mul(ad.downsample2(t["x"], t["w"], t["b"]), ad.Tensor(r)))

    inputs = {"x": x, "w": w, "b": b}
    return max(check_grad(build, inputs, n) for n in inputs)


def op_check_channel_bias(seed: int = 10) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 4, 3, 3, 3))
    b2 = rng.standard_normal((2, 4))
    r = rng.standard_normal((2, 4, 3, 3, 3))

    def build(t):
        return ad.sum_all(ad.mul(ad.channel_bias(t["x"], t["b"]), ad.Tensor(r)))

    errs = [check_grad(build, {"x": x, "b": b2}, n) for n in ("x", "b")]
    b1 = rng.standard_normal(4)
    errs.extend(check_grad(build, {"x": x, "b": b1}, n) for n in ("x", "b"))
    return max(errs)


def op_check_channel_affine(seed: int = 11) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 4, 3, 3, 3))
    s = 0.4 * rng.standard_normal((2, 4))
    t_ = 0.4 * rng.standard_normal((2, 4))
    r = rng.standard_normal((2, 4, 3, 3, 3))

    def build(t):
        return ad.sum_all(ad.mul(ad.channel_affine(t["x"], t["s"], t["t"]), ad.Tensor(r)))

    inputs = {"x": x, "s": s, "t": t_}
    return max(check_grad(build, inputs, n) for n in inputs)


def op_check_trilinear_sample(seed: int = 12) -> float:
    rng = np.random.default_rng(seed)
    vol = rng.standard_normal((3, 5, 5, 5))
    coords = rng.uniform(0.0, 4.0, size=(11, 3))
    coords[0] = (0.0, 0.0, 0.0)
    coords[1] = (4.0, 4.0, 4.0)
    r = rng.standard_normal((11, 3))

    def build(t):
        return ad.sum_all(ad.mul(ad.trilinear_sample(t["v"], coords), ad.Tensor(r)))

    return check_grad(build, {"v": vol}, "v")


def op_check_l1_loss(seed: int = 13) -> float:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((4, 4, 4))
    # Keep |a - b| bounded away from zero so finite differences stay on one
    # side of the kink.
    b = a + np.where(rng.random((4, 4, 4)) < 0.5, -1.0, 1.0) * (0.1 + rng.random((4, 4, 4)))

    def build(t):
        return ad.l1_loss(t["a"], t["b"])

    return max(check_grad(build, {"a": a, "b": b}, "a"), check_grad(build, {"a": a, "b": b}, "b"))


def op_check_mse_loss(seed: int = 14) -> float:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((4, 4, 4))
    b = rng.standard_normal((4, 4, 4))

    def build(t):
        return ad.mse_loss(t["a"], t["b"])

    return max(check_grad(build, {"a": a, "b": b}, "a"), check_grad(build, {"a": a, "b": b}, "b"))


def op_check_mean_all(seed: int = 15) -> float:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 5))

    def build(t):
        return ad.mean_all(t["a"])

    return check_grad(build, {"a": a}, "a")


OP_CHECKS = {
    "add": op_check_add,
    "mul": op_check_mul,
    "scale": op_check_scale,
    "silu": op_check_silu,
    "linear": op_check_linear,
    "reshape": op_check_reshape,
    "conv3": op_check_conv3,
    "group_norm": op_check_group_norm,
    "upsample2": op_check_upsample2,
    "downsample2": op_check_downsample2,
    "channel_bias": op_check_channel_bias,
    "channel_affine": op_check_channel_affine,
    "trilinear_sample": op_check_trilinear_sample,
    "l1_loss": op_check_l1_loss,
    "mse_loss": op_check_mse_loss,
    "mean_all": op_check_mean_all,
}


def composed_block_check(seed: int = 20) -> float:
    """Finite-difference check through a full residual block graph."""
    rng = np.random.default_rng(seed)
    c = 4
    x = rng.standard_normal((c, 4, 4, 4)) * 0.5
    w1 = rng.standard_normal((c, c, 3, 3, 3)) / 6.0
    b1 = 0.1 * rng.standard_normal(c)
    w2 = rng.standard_normal((c, c, 3, 3, 3)) / 6.0
    b2 = 0.1 * rng.standard_normal(c)
    tb = 0.2 * rng.standard_normal(c)
    fs = 0.2 * rng.standard_normal(c)
    ft = 0.2 * rng.standard_normal(c)
    r = rng.standard_normal((c, 4, 4, 4))

    def build(t):
        h = ad.conv3(ad.silu(t["x"]), t["w1"], t["b1"], padding=1)
        h = ad.channel_bias(h, t["tb"])
        h = ad.channel_affine(h, t["fs"], t["ft"])
        h = ad.conv3(ad.silu(h), t["w2"], t["b2"], padding=1)
        out = ad.add(t["x"], h)
        return ad.sum_all(ad.mul(out, ad.Tensor(r)))

    inputs = {"x": x, "w1": w1, "b1": b1, "w2": w2, "b2": b2, "tb": tb, "fs": fs, "ft": ft}
    return max(check_grad(build, inputs, name, tol=COMPOSED_TOL) for name in inputs)


@pytest.mark.parametrize("name", sorted(OP_CHECKS))
def test_op_gradients(name):
    err = OP_CHECKS[name]()
    assert err < OP_TOL


def test_composed_block_gradients():
    assert composed_block_check() < COMPOSED_TOL


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    y = ad.add(x, x)
    with pytest.raises(ValueError):
        ad.backward(y)


def test_stop_gradient_blocks_flow():
    x = ad.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    y = ad.sum_all(ad.mul(ad.stop_gradient(x), x))
    ad.backward(y)
    np.testing.assert_array_equal(y.data, np.sum(x.data * x.data))
    # d/dx of sg(x)*x is sg(x) alone.
    np.testing.assert_allclose(x.grad, x.data, rtol=0, atol=0)


def test_stop_gradient_values_bit_equal():
    x = ad.Tensor(np.random.default_rng(0).standard_normal((3, 3)).astype(np.float32), requires_grad=True)
    s = ad.stop_gradient(x)
    assert s.data.tobytes() == x.data.tobytes()
    assert not s.requires_grad


def test_repeated_backward_is_bit_identical():
    rng = np.random.default_rng(21)
    x = ad.Tensor(rng.standard_normal((3, 4, 4, 4)), requires_grad=True)
    w = ad.Tensor(rng.standard_normal((3, 3, 3, 3, 3)) / 5.0, requires_grad=True)
    loss = ad.l1_loss(ad.conv3(x, w, padding=1), ad.Tensor(np.zeros((3, 4, 4, 4))))
    ad.backward(loss)
    gx1 = x.grad.copy()
    gw1 = w.grad.copy()
    x.zero_grad()
    w.zero_grad()
    ad.backward(loss)
    assert x.grad.tobytes() == gx1.tobytes()
    assert w.grad.tobytes() == gw1.tobytes()


def test_l1_subgradient_zero_at_ties():
    a = ad.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    b = ad.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    loss = ad.l1_loss(a, b)
    ad.backward(loss)
    assert float(loss.data) == 0.0
    np.testing.assert_array_equal(a.grad, np.zeros(3))
    np.testing.assert_array_equal(b.grad, np.zeros(3))


def test_trilinear_sample_exact_on_lattice():
    rng = np.random.default_rng(22)
    vol = ad.Tensor(rng.standard_normal((2, 4, 4, 4)))
    coords = np.array([[0, 0, 0], [3, 3, 3], [1, 2, 3]], dtype=np.float64)
    out = ad.trilinear_sample(vol, coords)
    expect = np.stack([vol.data[:, 0, 0, 0], vol.data[:, 3, 3, 3], vol.data[:, 1, 2, 3]])
    np.testing.assert_allclose(out.data, expect, rtol=0, atol=1e-12)


def test_trilinear_sample_rejects_out_of_bounds():
    vol = ad.Tensor(np.zeros((1, 4, 4, 4)))
    with pytest.raises(ValueError):
        ad.trilinear_sample(vol, np.array([[-0.01, 0.0, 0.0]]))
    with pytest.raises(ValueError):
        ad.trilinear_sample(vol, np.array([[0.0, 3.01, 0.0]]))


def test_dtype_preservation():
    x32 = ad.Tensor(np.ones((2, 2), dtype=np.float32))
    x64 = ad.Tensor(np.ones((2, 2), dtype=np.float64))
    assert ad.add(x32, x32).dtype == np.float32
    assert ad.add(x64, x64).dtype == np.float64
    assert ad.silu(x64).dtype == np.float64
    assert ad.Tensor(np.ones(3, dtype=np.int64)).dtype == np.float32


def test_adam_matches_hand_stepped_reference():
    rng = np.random.default_rng(30)
    p0 = rng.standard_normal(6).astype(np.float64)
    grads = [rng.standard_normal(6) for _ in range(7)]
    p = ad.Tensor(p0.copy(), requires_grad=True)
    opt = ad.Adam([p], lr=3e-2, beta1=0.9, beta2=0.999, eps=1e-8)
    # Hand-stepped reference with the canonical bias-corrected update.
    ref = p0.copy()
    m = np.zeros(6)
    v = np.zeros(6)
    for k, g in enumerate(grads, start=1):
        p.grad[...] = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1 - 0.9**k)
        vhat = v / (1 - 0.999**k)
        ref = ref - 3e-2 * mhat / (np.sqrt(vhat) + 1e-8)
        np.testing.assert_allclose(p.data, ref, rtol=0, atol=1e-10)


def test_timestep_embed_shape_and_range():
    e = ad.timestep_embed(17, 32)
    assert e.shape == (32,)
    assert not e.requires_grad
    assert np.all(np.abs(e.data) <= 1.0 + 1e-6)
    batch = ad.timestep_embed([3, 900], 32)
    assert batch.shape == (2, 32)
    # Distinct timesteps embed distinctly.
    assert not np.allclose(batch.data[0], batch.data[1])
