"""Shared test utilities: finite differences and brute-force loss oracles."""

import math

import torch


def finite_difference_grad(scalar_fn, tensor: torch.Tensor, step: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of ``scalar_fn(tensor)`` w.r.t. every entry.

    ``tensor`` is perturbed in place entry by entry (and restored), so
    ``scalar_fn`` must re-read it on each call.
    """
    grad = torch.zeros_like(tensor, dtype=torch.float64)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = float(scalar_fn())
            flat[i] = orig - step
            down = float(scalar_fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
    return grad


def assert_grads_close(
    analytic: torch.Tensor,
    numeric: torch.Tensor,
    rtol: float,
    atol: float = 1e-9,
    context: str = "",
) -> None:
    """Require |analytic - numeric| <= rtol * max(|analytic|, |numeric|) + atol."""
    analytic = analytic.detach().to(torch.float64)
    diff = (analytic - numeric).abs()
    bound = rtol * torch.maximum(analytic.abs(), numeric.abs()) + atol
    worst = (diff - bound).max()
    assert (diff <= bound).all(), (
        f"gradient mismatch{' for ' + context if context else ''}: "
        f"worst excess {float(worst):.3e}, "
        f"max analytic {float(analytic.abs().max()):.3e}, "
        f"max numeric {float(numeric.abs().max()):.3e}"
    )


def check_parameter_grads(loss_fn, named_parameters, rtol, step=1e-5, atol=1e-9):
    """Compare autograd parameter gradients against finite differences.

    ``loss_fn`` must rebuild the loss from scratch (so parameter perturbations
    take effect). Returns the number of parameters checked.
    """
    params = list(named_parameters)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    checked = 0
    for (name, param), grad in zip(params, grads):
        analytic = torch.zeros_like(param) if grad is None else grad
        with torch.no_grad():
            numeric = finite_difference_grad(loss_fn, param, step=step)
        assert_grads_close(analytic, numeric, rtol=rtol, atol=atol, context=name)
        checked += param.numel()
    return checked


def scalar_pixel_oracle(pred, altitudes, coords, values, config, delta):
    """Brute-force python recomputation of the point-statistics loss."""

    def scalar_huber(a, b):
        err = abs(a - b)
        return 0.5 * err * err if err <= delta else delta * (err - 0.5 * delta)

    n, rows, cols = pred.shape
    z_max = altitudes[-1]
    pred_vals, bin_ids = [], []
    for (x, y, z), v in zip(coords, values):
        ix = min(cols - 1, max(0, int(math.floor(x + 0.5))))
        iy = min(rows - 1, max(0, int(math.floor(y + 0.5))))
        iz = min(range(n), key=lambda i: (abs(altitudes[i] - z), i))
        pred_vals.append(float(pred[iz, iy, ix]))
        bin_ids.append(
            min(config.altitude_bins - 1, int(z / z_max * config.altitude_bins))
        )

    loss = 0.0
    for b in range(config.altitude_bins):
        bucket = [i for i, bid in enumerate(bin_ids) if bid == b]
        if not bucket:
            continue
        pv = [pred_vals[i] for i in bucket]
        ov = [float(values[i]) for i in bucket]
        mu_hat, mu = sum(pv) / len(pv), sum(ov) / len(ov)
        var_hat = sum((v - mu_hat) ** 2 for v in pv) / len(pv)
        var = sum((v - mu) ** 2 for v in ov) / len(ov)
        loss += scalar_huber(mu_hat, mu)
        loss += scalar_huber(math.sqrt(var_hat + 1e-24), math.sqrt(var + 1e-24))

    def hist(values_list):
        centers = [i / (config.hist_bins - 1) for i in range(config.hist_bins)]
        acc = [0.0] * config.hist_bins
        for v in values_list:
            w = [
                math.exp(-((v - c) ** 2) / (2 * config.hist_bandwidth**2))
                for c in centers
            ]
            total = sum(w)
            for i in range(config.hist_bins):
                acc[i] += w[i] / total
        return [a / len(values_list) for a in acc]

    p = hist(pred_vals)
    q = hist([float(v) for v in values])
    mix = [(a + b) / 2 for a, b in zip(p, q)]
    js = 0.0
    for a, b, e in zip(p, q, mix):
        if a > 0:
            js += 0.5 * a * math.log(a / e)
        if b > 0:
            js += 0.5 * b * math.log(b / e)
    return loss + js
