import numpy as np


def central_diff(f, x, h=1e-5):
    """Gradient of scalar ``f`` at ``x`` by central differences, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rel=1e-3, floor=1e-6):
    err = np.abs(analytic - numeric)
    bound = np.maximum(rel * np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    worst = np.max(err - bound)
    assert worst <= 0, f"gradient mismatch: max excess {worst:.3g}, max err {err.max():.3g}"


def naive_conv2d(x, w, b, stride=1, padding=0):
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    xp = np.zeros((n, h + 2 * padding, wd + 2 * padding, cin))
    xp[:, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, ho, wo, cout))
    for a in range(n):
        for i in range(ho):
            for j in range(wo):
                for o in range(cout):
                    s = b[o]
                    for di in range(kh):
                        for dj in range(kw):
                            for c in range(cin):
                                s += xp[a, i * stride + di, j * stride + dj, c] * w[di, dj, c, o]
                    out[a, i, j, o] = s
    return out


def naive_dct2(x):
    """Direct O(N^4) orthonormal DCT-II of a single 2-D channel."""
    h, w = x.shape
    out = np.zeros((h, w))
    for k in range(h):
        for l in range(w):
            s = 0.0
            for i in range(h):
                for j in range(w):
                    s += x[i, j] * np.cos(np.pi * (2 * i + 1) * k / (2 * h)) * np.cos(np.pi * (2 * j + 1) * l / (2 * w))
            ck = np.sqrt(1 / h) if k == 0 else np.sqrt(2 / h)
            cl = np.sqrt(1 / w) if l == 0 else np.sqrt(2 / w)
            out[k, l] = ck * cl * s
    return out


def naive_idct2(s):
    h, w = s.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for k in range(h):
                for l in range(w):
                    ck = np.sqrt(1 / h) if k == 0 else np.sqrt(2 / h)
                    cl = np.sqrt(1 / w) if l == 0 else np.sqrt(2 / w)
                    acc += ck * cl * s[k, l] * np.cos(np.pi * (2 * i + 1) * k / (2 * h)) * np.cos(np.pi * (2 * j + 1) * l / (2 * w))
            out[i, j] = acc
    return out
