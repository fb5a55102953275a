import numpy as np

from sparseworld.diffcore import AdamState, RngStream, Tape, Tensor, adam_step, backward, mse, mul, sum_


def test_zero_gradient_leaves_params_unchanged():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    before = p.data.copy()
    adam_step({"p": p}, {"p": np.zeros(2, dtype=np.float32)}, AdamState(), lr=0.1)
    assert np.array_equal(p.data, before)


def test_first_step_closed_form():
    # after bias correction the first update is -lr * g / (|g| + eps)
    g = np.array([0.3, -0.7, 1.2], dtype=np.float32)
    p = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
    lr, eps = 0.05, 1e-8
    adam_step({"p": p}, {"p": g}, AdamState(), lr=lr, eps=eps)
    want = -lr * g / (np.abs(g) + eps)
    assert np.allclose(p.data, want, atol=1e-7)


def test_converges_on_quadratic():
    x = Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
    state = AdamState()
    for _ in range(500):
        x.zero_grad()
        with Tape():
            d = x - 3.0
            backward(sum_(mul(d, d)))
        adam_step({"x": x}, {"x": x._grad}, state, lr=0.1)
    assert abs(float(x.data[0]) - 3.0) < 1e-2


def test_deterministic_given_inputs():
    def run():
        p = Tensor(np.linspace(-1, 1, 8).astype(np.float32), requires_grad=True)
        st = AdamState()
        rng = RngStream(3)
        for _ in range(20):
            g = rng.normal((8,)).astype(np.float32)
            adam_step({"p": p}, {"p": g}, st, lr=0.01)
        return p.data.copy()

    assert np.array_equal(run(), run())


def test_missing_grad_entry_is_skipped():
    p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    q = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    adam_step({"p": p, "q": q}, {"p": np.ones(2, dtype=np.float32)}, AdamState(), lr=0.1)
    assert np.array_equal(q.data, np.ones(2, dtype=np.float32))
    assert not np.array_equal(p.data, np.ones(2, dtype=np.float32))
