import numpy as np
import pytest

FD_STEP = 1e-5


def rel_error(analytic, numeric, floor=1e-8):
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f, x, indices=None, step=FD_STEP):
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (perturbed in place)."""
    flat = x.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        out.append((hi - lo) / (2 * step))
    return np.array(out)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def synth_small(tmp_path_factory):
    """3 plugs per class, 4 slices, 32x32: enough to exercise plumbing quickly."""
    from lithonet.synth import synth_generate

    out = tmp_path_factory.mktemp("synth_small")
    synth_generate(out, plugs_per_class=3, slices_per_plug=4, size=32, seed=3)
    return out / "manifest.csv"


def activation_pattern(model):
    """Bytes identifying every ReLU on/off state and pooling winner of the last forward."""
    from lithonet.layers import SPP, MaxPool, ReLU

    parts = []
    for layer in model.layers:
        cache = layer._cache
        if isinstance(layer, ReLU):
            parts.append(np.packbits(cache > 0).tobytes())
        elif isinstance(layer, (MaxPool, SPP)):
            parts.append(cache[1].tobytes())
    return b"|".join(parts)


def model_gradcheck(model, x, labels, n_params=20, seed=0, weights=None, floor=1e-6, step=FD_STEP):
    """Relative errors of back-propagated vs central-difference loss gradients.

    Dropout stays active with a fixed mask (the generator is re-seeded on
    every evaluation), so the full training-mode graph is checked. Below
    ``floor`` the central difference is dominated by round-off, so the
    error is measured against ``floor`` instead. A parameter whose
    +/- ``step`` stencil changes a ReLU state or pooling winner straddles a
    kink, where no derivative exists; it is replaced by a fresh draw.

    Returns ``(errors, skipped)``.
    """
    from lithonet.training import one_hot, weighted_cross_entropy, weighted_cross_entropy_grad

    target = one_hot(labels, model.spec.classes)

    def run():
        probs = model.forward(x, train=True, rng=np.random.default_rng(seed))
        return weighted_cross_entropy(probs, target, weights), activation_pattern(model)

    probs = model.forward(x, train=True, rng=np.random.default_rng(seed))
    pattern = activation_pattern(model)
    model.backward(weighted_cross_entropy_grad(probs, target, weights), from_logits=True)
    params = model.param_arrays()
    grads = [g.copy() for g in model.grad_arrays()]
    pick = np.random.default_rng(seed + 1)
    errors = []
    skipped = 0
    while len(errors) < n_params:
        k = int(pick.integers(len(params)))
        i = int(pick.integers(params[k].size))
        flat = params[k].reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        hi, p_hi = run()
        flat[i] = orig - step
        lo, p_lo = run()
        flat[i] = orig
        if p_hi != pattern or p_lo != pattern:
            skipped += 1
            if skipped > 5 * n_params:
                raise AssertionError("too many kink-crossing stencils; use a smaller step")
            continue
        numeric = (hi - lo) / (2 * step)
        errors.append(float(rel_error(grads[k].reshape(-1)[i], numeric, floor)))
    return np.array(errors), skipped
