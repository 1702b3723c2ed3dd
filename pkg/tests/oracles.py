"""Independent reference implementations shared by the unit and acceptance tests."""

import numpy as np
import torch

from boneage.regress import EnsembleConfig, EnsembleNet, ensemble_loss


def tiny_ensemble(seed=0, **overrides):
    cfg = EnsembleConfig(**{"input_side": 32, "width_mult": 0.1, "head_width": 8, "seed": seed, **overrides})
    torch.manual_seed(seed)
    return cfg, EnsembleNet(cfg).double()


def _activation_pattern(net, run):
    """Run ``run()`` and record which side of every ReLU/ReLU6 kink each pre-activation sits on."""
    pattern = []

    def hook(module, inputs, output):
        x = inputs[0]
        cut = 6.0 if isinstance(module, torch.nn.ReLU6) else None
        pattern.append((x > 0) if cut is None else (x > 0) * 1 + (x >= cut) * 1)

    handles = [m.register_forward_hook(hook) for m in net.modules() if isinstance(m, (torch.nn.ReLU, torch.nn.ReLU6))]
    try:
        value = float(run())
    finally:
        for h in handles:
            h.remove()
    return value, pattern


def gradient_check(n_params=10, seed=0, step=1e-3, max_draws=2000, **overrides):
    """Analytic vs central-difference gradients of the ensemble loss.

    Returns (analytic, numeric, floor) triples for ``n_params`` randomly drawn scalar
    parameters; ``floor`` is the gradient magnitude below which the central difference
    is dominated by float64 round-off (eps * |loss| / h, times the relative tolerance).
    The net runs in float64 and eval mode. A central difference is only meaningful when
    the loss is smooth over [p - h, p + h]; draws where the step moves any ReLU
    pre-activation across a kink are discarded and redrawn.
    """
    cfg, net = tiny_ensemble(seed, **overrides)
    net.eval()
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(3, 5, 32, 32, generator=gen, dtype=torch.float64)
    sex = torch.tensor([0.0, 1.0, 1.0], dtype=torch.float64)
    ages = torch.tensor([30.0, 120.0, 200.0], dtype=torch.float64)

    def loss():
        per_region, mean = net(x, sex)
        return ensemble_loss(per_region, mean, ages, cfg)

    net.zero_grad()
    value = loss()
    value.backward()
    params = [p for p in net.parameters() if p.requires_grad]
    rng = np.random.default_rng(seed)
    eps = float(np.finfo(np.float64).eps)
    pairs = []
    for _ in range(max_draws):
        if len(pairs) == n_params:
            break
        p = params[rng.integers(len(params))]
        flat = p.data.view(-1)
        i = int(rng.integers(flat.numel()))
        analytic = float(p.grad.view(-1)[i])
        with torch.no_grad():
            orig = float(flat[i])
            # step relative to the parameter's scale ("unit-scaled" parameters)
            h = step * max(1.0, abs(orig))
            flat[i] = orig + h
            up, pat_up = _activation_pattern(net, loss)
            flat[i] = orig - h
            down, pat_down = _activation_pattern(net, loss)
            flat[i] = orig
        if any(not torch.equal(a, b) for a, b in zip(pat_up, pat_down)):
            continue
        floor = 1e3 * eps * abs(value.item()) / h
        pairs.append((analytic, (up - down) / (2 * h), floor))
    if len(pairs) < n_params:
        raise RuntimeError(f"only {len(pairs)} kink-free parameters found")
    return pairs


def relative_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def brute_mae(preds, truths):
    total = 0.0
    for p, t in zip(preds, truths):
        total += abs(p - t)
    return total / len(preds)


def brute_per_year(records, lo=None, hi=None):
    """{(source, year): (n, mae, mean signed error)} by direct loops over the records."""
    table = {}
    for r in records:
        if lo is not None and not (lo <= r.truth <= hi):
            continue
        sources = {"mean": r.mean, **r.per_region}
        for source, value in sources.items():
            key = (source, int(r.truth // 12))
            table.setdefault(key, []).append(value - r.truth)
    out = {}
    for key, errs in table.items():
        n = len(errs)
        out[key] = (n, sum(abs(e) for e in errs) / n, sum(errs) / n)
    return out
