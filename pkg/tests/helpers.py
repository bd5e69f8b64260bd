import numpy as np
import torch


def central_difference(loss_fn, tensor, indices, eps=1e-6):
    """Central finite differences of ``loss_fn()`` w.r.t. selected entries of ``tensor``."""
    flat = tensor.data.view(-1)
    grads = []
    for i in indices:
        orig = flat[i].item()
        flat[i] = orig + eps
        up = float(loss_fn())
        flat[i] = orig - eps
        down = float(loss_fn())
        flat[i] = orig
        grads.append((up - down) / (2 * eps))
    return np.array(grads)


def gradient_errors(loss_fn, named_params, samples=12, eps=1e-6, seed=0):
    """Relative error between autograd and central differences, per parameter.

    At most ``samples`` entries per tensor are probed. The error is the norm of
    the difference over the larger of the two gradient norms.
    """
    rng = np.random.default_rng(seed)
    params = [p for _, p in named_params]
    for p in params:
        p.grad = None
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    errors = {}
    with torch.no_grad():
        for (name, p), g in zip(named_params, analytic):
            n = p.numel()
            idx = np.arange(n) if n <= samples else rng.choice(n, size=samples, replace=False)
            a = np.zeros(len(idx)) if g is None else g.reshape(-1)[idx].numpy()
            num = central_difference(loss_fn, p, idx, eps)
            scale = max(np.linalg.norm(a), np.linalg.norm(num), 1e-12)
            errors[name] = float(np.linalg.norm(a - num) / scale)
    return errors
