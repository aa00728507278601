"""Independent reference computations used by the tests.

Nothing here imports the code under test except to drive it (the gradient
check calls a loss closure); formulas are restated from scratch.
"""
import math

import numpy as np
import torch


def kl_monte_carlo(mu_q, logvar_q, mu_p, logvar_p, n, rng):
    """Estimate E_q[log q(z) - log p(z)] for diagonal Gaussians; returns (mean, standard error)."""
    mu_q, logvar_q, mu_p, logvar_p = (np.asarray(v, dtype=np.float64) for v in (mu_q, logvar_q, mu_p, logvar_p))
    sd_q = np.exp(0.5 * logvar_q)
    z = mu_q + sd_q * rng.standard_normal((n, mu_q.size))

    def logpdf(z, mu, logvar):
        return -0.5 * (math.log(2 * math.pi) + logvar + (z - mu) ** 2 / np.exp(logvar))

    samples = (logpdf(z, mu_q, logvar_q) - logpdf(z, mu_p, logvar_p)).sum(axis=1)
    return samples.mean(), samples.std(ddof=1) / math.sqrt(n)


def ssim_textbook(a, b, data_range=1.0, win=11, sigma=1.5, k1=0.01, k2=0.03):
    """Loop over every full window position and apply the SSIM formula directly."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    half = win // 2
    yy, xx = np.mgrid[-half : half + 1, -half : half + 1]
    w = np.exp(-(xx**2 + yy**2) / (2 * sigma**2))
    w /= w.sum()
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for i in range(a.shape[0] - win + 1):
        for j in range(a.shape[1] - win + 1):
            pa = a[i : i + win, j : j + win]
            pb = b[i : i + win, j : j + win]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def _kink_signs(modules, loss_fn):
    """Run ``loss_fn`` and record the sign pattern of every input to ``modules``."""
    signs = []
    hooks = [m.register_forward_hook(lambda mod, inp, out: signs.append(inp[0].detach() > 0)) for m in modules]
    try:
        with torch.no_grad():
            value = float(loss_fn())
    finally:
        for hk in hooks:
            hk.remove()
    return value, signs


def directional_gradient_check(loss_fn, params, h=1e-4, seed=0, kink_modules=(), max_draws=50):
    """Compare autograd with a central difference along a random unit direction per tensor.

    Central differences are only a valid oracle when the loss is smooth on the
    segment [p - h v, p + h v]. If any module in ``kink_modules`` (piecewise
    linear activations) sees an input change sign between the two endpoints
    and the centre, the direction is discarded and a new one drawn. The
    redraw rule looks only at the sign patterns, never at the gradient error.

    Returns {name: (analytic, finite_difference, relative_error, draws)}.
    """
    gen = torch.Generator().manual_seed(seed)
    kink_modules = list(kink_modules)
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    _, centre = _kink_signs(kink_modules, loss_fn)
    results = {}
    for name, p in params:
        for draw in range(1, max_draws + 1):
            v = torch.randn(p.shape, generator=gen, dtype=p.dtype)
            v /= v.norm()
            with torch.no_grad():
                p.add_(h * v)
                up, s_up = _kink_signs(kink_modules, loss_fn)
                p.sub_(2 * h * v)
                down, s_down = _kink_signs(kink_modules, loss_fn)
                p.add_(h * v)
            smooth = all(torch.equal(a, c) and torch.equal(b, c) for a, b, c in zip(s_up, s_down, centre))
            if smooth:
                break
        analytic = float((p.grad * v).sum())
        fd = (up - down) / (2 * h)
        rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-12)
        results[name] = (analytic, fd, rel, draw if smooth else None)
    return results
