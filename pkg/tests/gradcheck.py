"""Central finite-difference gradient oracle used by the loss tests.

Independent of autograd: perturbs one coordinate at a time and differences
the loss value. Everything runs in double precision.
"""

import torch

FD_STEP = 1e-5
REL_TOL = 1e-4


def fd_gradient(closure, param: torch.Tensor, step: float = FD_STEP) -> torch.Tensor:
    """Central-difference gradient of closure() wrt every entry of param."""
    grad = torch.zeros_like(param)
    flat = param.view(-1)
    out = grad.view(-1)
    for i in range(flat.numel()):
        with torch.no_grad():
            orig = flat[i].item()
            flat[i] = orig + step
            hi = closure().item()
            flat[i] = orig - step
            lo = closure().item()
            flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return grad


def check_gradients(closure, named_params, rel_tol: float = REL_TOL):
    """Compare autograd against finite differences for each parameter group.

    named_params: iterable of (name, tensor) leaves with requires_grad=True.
    Returns {name: relative_error}; raises AssertionError on any violation.
    """
    named_params = list(named_params)
    for _, p in named_params:
        if p.grad is not None:
            p.grad = None
    closure().backward()
    errors = {}
    for name, p in named_params:
        analytic = torch.zeros_like(p) if p.grad is None else p.grad.clone()
        numeric = fd_gradient(closure, p)
        denom = numeric.norm().item()
        if denom < 1e-8:
            assert analytic.norm().item() < 1e-8, (
                f"{name}: autograd nonzero where finite differences vanish"
            )
            errors[name] = 0.0
            continue
        rel = ((analytic - numeric).norm() / denom).item()
        assert rel < rel_tol, f"{name}: relative gradient error {rel:.3e}"
        errors[name] = rel
    return errors
