import numpy as np
import pytest

from afinet.tensor import Tensor


def fd_gradient_check(build, arrays, h=1e-5, rel_tol=1e-4):
    """Central finite-difference check for a scalar-valued graph.

    build(*tensors) must return a scalar loss Tensor. `arrays` are float64
    numpy arrays; every element of every array is perturbed by +-h and the
    analytic gradient is compared against (f+ - f-) / 2h using the relative
    error of the full gradient vectors.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True, dtype=np.float64)
               for a in arrays]
    loss = build(*tensors)
    loss.backward()
    analytic = [t.grad.copy() for t in tensors]

    def eval_loss(mod_arrays):
        ts = [Tensor(a, dtype=np.float64) for a in mod_arrays]
        return build(*ts).item()

    for ti, a in enumerate(arrays):
        numeric = np.zeros_like(a)
        flat = a.ravel()
        nflat = numeric.ravel()
        for idx in range(a.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = eval_loss(arrays)
            flat[idx] = orig - h
            fm = eval_loss(arrays)
            flat[idx] = orig
            nflat[idx] = (fp - fm) / (2.0 * h)
        ga, gn = analytic[ti], numeric
        denom = max(np.linalg.norm(ga), np.linalg.norm(gn), 1e-12)
        rel = np.linalg.norm(ga - gn) / denom
        assert rel < rel_tol, (
            f"gradient mismatch on input {ti}: rel error {rel:.3e} "
            f"(analytic norm {np.linalg.norm(ga):.3e}, "
            f"numeric norm {np.linalg.norm(gn):.3e})")


def conv2d_reference(x, k, stride=1):
    """Six-loop cross-correlation with zero rows / circular columns."""
    n, c, h, w = x.shape
    co, _, kh, kw = k.shape
    ph0 = (kh - 1) // 2
    pw0 = (kw - 1) // 2
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    out = np.zeros((n, co, ho, wo), dtype=np.float64)
    for ni in range(n):
        for oc in range(co):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                y = oy * stride + i - ph0
                                xc = (ox * stride + j - pw0) % w
                                if 0 <= y < h:
                                    acc += x[ni, ic, y, xc] * k[oc, ic, i, j]
                    out[ni, oc, oy, ox] = acc
    return out


def maxpool2d_reference(x):
    """Direct 2x2 window scan."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[ni, ci, i, j] = x[ni, ci, 2 * i:2 * i + 2,
                                          2 * j:2 * j + 2].max()
    return out


def vlad_reference(assign, v, centers):
    """Scalar-loop evaluation of the soft-assigned residual sum."""
    n, i_cnt, k_cnt = assign.shape
    c = v.shape[2]
    out = np.zeros((n, k_cnt, c), dtype=np.float64)
    for ni in range(n):
        for k in range(k_cnt):
            for j in range(c):
                acc = 0.0
                for i in range(i_cnt):
                    acc += assign[ni, i, k] * (v[ni, i, j] - centers[k, j])
                out[ni, k, j] = acc
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
