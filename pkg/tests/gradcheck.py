"""Central finite-difference gradient checking helpers (float64)."""

import numpy as np
import torch


def finite_difference_check(loss_fn, parameters, eps: float = 1e-5,
                            rel_tol: float = 1e-4, n_entries: int = 10,
                            seed: int = 0) -> None:
    """Compare autograd gradients of `loss_fn()` against central finite
    differences on a random subset of entries of every parameter tensor.

    The relative error is measured against the larger of the two gradient
    magnitudes (with an absolute floor to ignore numerically-zero entries).
    """
    params = [p for p in parameters if p.requires_grad]
    assert params, "nothing to check"
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    for p in params:
        assert p.grad is not None, "parameter received no gradient"
        flat = p.detach().view(-1)
        grad = p.grad.view(-1)
        idx = rng.choice(flat.numel(), size=min(n_entries, flat.numel()),
                         replace=False)
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + eps
            with torch.no_grad():
                up = loss_fn().item()
            flat[i] = orig - eps
            with torch.no_grad():
                down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            an = grad[i].item()
            denom = max(abs(fd), abs(an), 1e-6)
            assert abs(fd - an) / denom < rel_tol, \
                f"gradient mismatch: analytic={an:.6e} fd={fd:.6e}"
