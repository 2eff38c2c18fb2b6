"""Shared helpers for the test suite: finite differences, error metrics,
and a small-footprint run configuration."""

import torch

from lift3d.config import RunConfig, config_from_dict


def toy_run_config(total_steps=20, resolution=24, samples=24, seed=0, **overrides) -> RunConfig:
    """A reduced configuration sized for fast test runs."""
    data = {
        "seed": seed,
        "field": {"levels": 6, "base_resolution": 8, "finest_resolution": 128,
                  "table_size_log2": 11, "hidden_dim": 32},
        "renderer": {"train_resolution": resolution, "samples_per_ray": samples},
        "camera": {"lambda_start": 0.0, "lambda_end": 0.0, "ramp_steps": max(total_steps // 2, 1)},
        "train": {"total_steps": total_steps, "checkpoint_every": max(total_steps, 1),
                  "shading_start_step": 1000, "shading_probability": 0.0},
        "ranking": {"pair_count": 512},
    }
    cfg = config_from_dict(data)
    for dotted, value in overrides.items():
        section, key = dotted.split("__")
        setattr(getattr(cfg, section), key, value)
    return cfg


def fd_grad(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``f`` at flat tensor ``x``."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.numel()):
        xp = flat.clone()
        xm = flat.clone()
        xp[i] += eps
        xm[i] -= eps
        gf[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * eps)
    return g


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    """Norm-relative error between two tensors."""
    a = a.reshape(-1).double()
    b = b.reshape(-1).double()
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return ((a - b).norm() / denom).item()


def autograd_check(f, x: torch.Tensor, eps: float = 1e-6, tol: float = 1e-4) -> float:
    """Compare autograd and central-difference gradients of scalar ``f``.

    ``x`` must be a float64 leaf tensor. Returns the relative error and
    asserts it is below ``tol``.
    """
    assert x.dtype == torch.float64, "gradient checks run in double precision"
    x = x.detach().clone().requires_grad_(True)
    y = f(x)
    (g_auto,) = torch.autograd.grad(y, x)
    g_fd = fd_grad(lambda v: f(v).item(), x.detach(), eps=eps)
    err = rel_err(g_auto, g_fd)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return err
