import numpy as np


def central_difference(f, x, h=1e-3):
    """Numerical gradient of scalar f at array x (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def loop_mse(a, b):
    flat_a, flat_b = np.ravel(a).tolist(), np.ravel(b).tolist()
    return sum((p - q) ** 2 for p, q in zip(flat_a, flat_b)) / len(flat_a)


def loop_ssim_channel(a, b, c1=1e-4, c2=9e-4):
    """SSIM of two flat pixel lists by the textbook formula, population moments."""
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    va = sum((p - ma) ** 2 for p in a) / n
    vb = sum((q - mb) ** 2 for q in b) / n
    cov = sum((p - ma) * (q - mb) for p, q in zip(a, b)) / n
    return ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))


def loop_ssim(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[None], b[None]
    scores = [loop_ssim_channel(a[c].ravel().tolist(), b[c].ravel().tolist())
              for c in range(a.shape[0])]
    return sum(scores) / len(scores)


def loop_psnr(a, b):
    import math
    return 10 * math.log10(1 / loop_mse(a, b))
