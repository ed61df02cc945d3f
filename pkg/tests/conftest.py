import numpy as np
import pytest

from mambamatch import tensor as T


def fd_gradcheck(fn, leaves, h=1e-3, rtol=1e-4, guard=1e-6):
    """Compare analytic gradients against central finite differences.

    ``fn(leaves) -> scalar Tensor`` must rebuild its graph on every call
    (backward frees the tape). Leaves should be float64: at h=1e-3 the
    stated tolerance is below float32 cancellation noise.
    """
    loss = fn(leaves)
    grads = T.backward(loss, leaves)
    for t in leaves:
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = fn(leaves).item()
            flat[i] = orig - h
            lm = fn(leaves).item()
            flat[i] = orig
            num[i] = (lp - lm) / (2.0 * h)
        num = num.reshape(t.shape)
        rel = np.abs(grads[t] - num) / (np.abs(num) + guard)
        assert rel.max() < rtol, f"gradient mismatch: rel err {rel.max():.3g}"


def leaf(rng, shape, scale=1.0):
    """Random float64 leaf tensor for gradient checks."""
    return T.Tensor(rng.standard_normal(shape) * scale, dtype=np.float64,
                    requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
