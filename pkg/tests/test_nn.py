import numpy as np
import pytest

from rainbalance import tensor as tn
from rainbalance.gradcheck import GradCheckReport, NonDeterministicError, grad_check, relative_error
from rainbalance.nn import GRU, Adam, BiGRU, Linear, Module, clip_grad_norm, gru_sequence, \
    gru_sequence_reference
from rainbalance.tensor import Parameter, Tensor

from conftest import rng


def _gru_params(r, i, h):
    return [Parameter(n, r.uniform(-0.5, 0.5, s)) for n, s in
            (("W_x", (i, 3 * h)), ("W_h", (h, 3 * h)), ("b_x", (3 * h,)), ("b_h", (3 * h,)))]


def _loop_gru(x, w_x, w_h, b_x, b_h):
    """Textbook per-sample, per-step GRU in plain numpy."""
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    B, T, _ = x.shape
    H = w_h.shape[0]
    out = np.zeros((B, T, H))
    for b in range(B):
        h = np.zeros(H)
        for t in range(T):
            gx = x[b, t] @ w_x + b_x
            gh = h @ w_h + b_h
            r = sig(gx[:H] + gh[:H])
            z = sig(gx[H:2 * H] + gh[H:2 * H])
            n = np.tanh(gx[2 * H:] + r * gh[2 * H:])
            h = (1 - z) * n + z * h
            out[b, t] = h
    return out


@pytest.mark.parametrize("reverse", [False, True])
def test_fused_gru_forward_matches_loop_oracle(reverse):
    r = rng(3)
    x = r.standard_normal((2, 5, 3))
    ps = _gru_params(r, 3, 4)
    got = gru_sequence(Tensor(x), *ps, reverse=reverse).data
    if reverse:
        want = _loop_gru(x[:, ::-1], *(p.data for p in ps))[:, ::-1]
    else:
        want = _loop_gru(x, *(p.data for p in ps))
    np.testing.assert_allclose(got, want, atol=1e-13)


@pytest.mark.parametrize("reverse", [False, True])
def test_fused_gru_gradients_match_composite_reference(reverse):
    r = rng(4)
    x0 = r.standard_normal((3, 6, 2))
    w = r.standard_normal((3, 6, 5))
    grads = []
    for fn in (gru_sequence, gru_sequence_reference):
        x = Parameter("x", x0)
        ps = _gru_params(rng(5), 2, 5)
        out = fn(x, *ps, reverse=reverse)
        tn.backward(tn.sum(tn.mul(out, w)))
        grads.append([x.grad] + [p.grad for p in ps])
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_gru_gradcheck_passes():
    r = rng(6)
    x = Parameter("x", r.standard_normal((2, 4, 3)))
    ps = _gru_params(r, 3, 3)
    w = r.standard_normal((2, 4, 3))
    report = grad_check(lambda: tn.sum(tn.mul(gru_sequence(x, *ps), w)), [x] + ps)
    assert report.passed, report.lines()


def test_bigru_reverses_with_swapped_lanes():
    """Reversing time and swapping the lane weights mirrors the output and swaps its halves."""
    r = rng(7)
    net = BiGRU("enc", 3, 4, r)
    x = r.standard_normal((2, 6, 3))
    out = net(Tensor(x)).data
    mirror = BiGRU("mirror", 3, 4, rng(0))
    for src, dst in ((net.fwd, mirror.bwd), (net.bwd, mirror.fwd)):
        for a, b in zip(src.parameters(), dst.parameters()):
            b.data = a.data.copy()
    flipped = mirror(Tensor(x[:, ::-1])).data[:, ::-1]
    np.testing.assert_allclose(flipped[..., 4:], out[..., :4], atol=1e-14)
    np.testing.assert_allclose(flipped[..., :4], out[..., 4:], atol=1e-14)


def test_gru_rejects_bad_shapes():
    g = GRU("g", 3, 4, rng(0))
    with pytest.raises(tn.ShapeError):
        g(Tensor(np.zeros((2, 5, 2))))
    with pytest.raises(tn.ShapeError):
        g(Tensor(np.zeros((5,))))


def test_gru_accepts_unbatched_sequence():
    g = GRU("g", 3, 4, rng(0))
    x = rng(1).standard_normal((5, 3))
    np.testing.assert_array_equal(g(Tensor(x)).data, g(Tensor(x[None])).data[0])


def test_linear_init_bounds_and_zero_bias():
    lin = Linear("lin", 16, 3, rng(0))
    assert np.all(np.abs(lin.weight.data) <= 1 / 4)
    np.testing.assert_array_equal(lin.bias.data, 0.0)


def test_module_names_are_hierarchical_and_unique():
    net = BiGRU("enc", 2, 3, rng(0))
    names = list(net.named_parameters())
    assert names[0] == "enc.fwd.W_x" and "enc.bwd.b_h" in names
    m = Module("m")
    m.add_child(Linear("dup", 1, 1, rng(0)))
    m.add_child(Linear("dup", 1, 1, rng(0)))
    with pytest.raises(ValueError):
        m.named_parameters()


def test_clip_grad_norm_rescales_globally():
    a = Parameter("a", np.zeros(2))
    b = Parameter("b", np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    norm = clip_grad_norm([a, b], 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])
    a.grad, b.grad = np.array([0.3, 0.0]), np.array([0.4])
    clip_grad_norm([a, b], 1.0)
    np.testing.assert_array_equal(a.grad, [0.3, 0.0])


def test_adam_matches_closed_form_steps():
    p = Parameter("p", np.array([1.0, -2.0]))
    opt = Adam([p], lr=0.1)
    grads = [np.array([0.5, -1.0]), np.array([0.2, 0.3])]
    m = v = np.zeros(2)
    ref = p.data.copy()
    for t, g in enumerate(grads, start=1):
        p.grad = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, ref, rtol=1e-15)


def test_adam_state_round_trip():
    p = Parameter("p", np.ones(3))
    opt = Adam([p])
    p.grad = np.array([1.0, 2.0, 3.0])
    opt.step()
    clone = Adam([Parameter("p", p.data.copy())])
    clone.load_state(opt.state())
    assert clone.t == 1
    np.testing.assert_array_equal(clone.m["p"], opt.m["p"])


# ---------------------------------------------------------------- gradient checker

def test_gradcheck_detects_corrupted_backward(monkeypatch):
    r = rng(8)
    x = Tensor(r.standard_normal((2, 4, 3)))
    ps = _gru_params(r, 3, 3)
    fn = lambda: tn.sum(tn.square(gru_sequence(x, *ps)))
    assert grad_check(fn, ps).passed
    monkeypatch.setattr(tn, "_dtanh", lambda y: 1.0 - 0.5 * y * y)
    bad = grad_check(fn, ps)
    assert not bad.passed
    assert set(bad.failures()) >= {"W_x", "W_h"}


def test_gradcheck_rejects_nonpositive_step():
    p = Parameter("p", np.ones(2))
    with pytest.raises(ValueError):
        grad_check(lambda: tn.sum(p), [p], step=0.0)


def test_gradcheck_rejects_nondeterministic_function():
    p = Parameter("p", np.ones(2))
    r = rng(0)
    with pytest.raises(NonDeterministicError):
        grad_check(lambda: tn.sum(tn.mul(p, r.standard_normal(2))), [p])


def test_gradcheck_restores_parameters_and_reports_every_name():
    p = Parameter("p", np.array([0.3, -0.7]))
    q = Parameter("q", np.array([[1.1]]))
    before = p.data.copy()
    report = grad_check(lambda: tn.sum(tn.mul(tn.tanh(p), q)), [p, q])
    np.testing.assert_array_equal(p.data, before)
    assert list(report.errors) == ["p", "q"] and report.passed


def test_relative_error_uses_unit_floor():
    np.testing.assert_allclose(relative_error(np.array([1e-9, 10.0]), np.array([0.0, 11.0])),
                               [1e-9, 1 / 11])


def test_report_summary():
    rep = GradCheckReport(tol=1e-4, step=1e-5, errors={"a": 1e-6, "b": 1e-3})
    assert not rep.passed and rep.failures() == ["b"] and rep.max_error == 1e-3
    assert rep.lines()[0].startswith("PASS a")
