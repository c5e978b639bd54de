"""Central finite-difference oracle for the CNN gradients."""

import numpy as np

from augment3d.nn import Model, _forward, bce_loss, predict
from augment3d.rng import RngStream


def loss_of(model, x, y):
    return bce_loss(predict(model, x), y)


def activation_pattern(model, x) -> bytes:
    """ReLU on/off masks and pooling argmaxes of one forward pass."""
    _, cache = _forward(model, np.asarray(x, dtype=np.float64)[:, None], keep=True)
    parts = []
    for entry in cache["convs"]:
        parts.append((entry["z"] > 0).tobytes())
        if "pool_idx" in entry:
            parts.append(entry["pool_idx"].tobytes())
    parts.append((cache["zd"] > 0).tobytes())
    return b"".join(parts)


def smooth_within(model, x, h) -> bool:
    """True when no +-h step in any single parameter changes the activation
    pattern, i.e. central differences never straddle a ReLU or pooling kink."""
    base = activation_pattern(model, x)
    for p in model.params.values():
        for i in np.ndindex(p.shape):
            old = p[i]
            for step in (h, -h):
                p[i] = old + step
                if activation_pattern(model, x) != base:
                    p[i] = old
                    return False
            p[i] = old
    return True


def smooth_point(config, batch, h, max_tries=100):
    """First seeded (model, x, y) whose h-neighbourhood is kink-free."""
    for seed in range(max_tries):
        model = Model.init(config, RngStream(seed, ("gradcheck", "w")), dtype=np.float64)
        brng = RngStream(seed, ("gradcheck", "b"))
        for name, p in model.params.items():
            if name.endswith(".b"):
                p[...] = brng.child(name).uniform(-0.1, 0.1, p.size).reshape(p.shape)
        x = RngStream(seed, ("gradcheck", "x")).normal(1.0, batch * int(np.prod(config.input_shape)))
        x = x.reshape((batch,) + config.input_shape)
        y = (np.arange(batch) % 2 == 0).astype(np.float64)
        if smooth_within(model, x, h):
            return model, x, y
    raise RuntimeError("no kink-free evaluation point found")


def numeric_gradients(model, x, y, h):
    grads = {}
    for name, p in model.params.items():
        g = np.zeros(p.shape, dtype=np.float64)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            lp = loss_of(model, x, y)
            p[i] = old - h
            lm = loss_of(model, x, y)
            p[i] = old
            g[i] = (lp - lm) / (2 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic, numeric, floor=1e-8):
    worst = 0.0
    for name in numeric:
        a, n = analytic[name], numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst
