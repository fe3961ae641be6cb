"""Helpers shared by the unit and acceptance suites."""

import numpy as np
import torch

from jointflow.flow import VelocityPair, jcfm_loss
from jointflow.model import JointModel, ModelConfig, build_base
from jointflow.world import SceneSpec, Disk


def randomize(module: torch.nn.Module, seed: int = 0, scale: float = 0.2) -> None:
    """Overwrite every parameter, zero-initialized ones included, with Gaussian noise."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))


def grad_check(cfg: ModelConfig, seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Per-tensor relative error between autograd and central differences of the
    joint loss, in float64. Error is max|a - n| / max(max|a|, max|n|)."""
    g = torch.Generator().manual_seed(seed)
    base = build_base(cfg, g)
    model = JointModel(base, g).double()
    randomize(model, seed + 1, scale=0.3)
    for p in model.parameters():
        p.requires_grad_(True)
    b, s = 2, cfg.image_size
    x = torch.randn(b, 3, s, s, generator=g, dtype=torch.float64)
    y = torch.randn(b, 3, s, s, generator=g, dtype=torch.float64)
    target = VelocityPair(torch.randn(b, 3, s, s, generator=g, dtype=torch.float64),
                          torch.randn(b, 3, s, s, generator=g, dtype=torch.float64))
    pair = (torch.tensor([0.3, 0.8]), torch.tensor([0.6, 0.1]))
    cls = torch.tensor([1, cfg.null_class])

    def loss():
        return jcfm_loss(model.forward_joint(x, y, pair, cls), target)

    model.zero_grad()
    loss().backward()
    errors = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            # parameters that do not reach the loss (the last block's context stream) get no grad
            analytic = torch.zeros(p.numel(), dtype=p.dtype) if p.grad is None else p.grad.detach().clone().reshape(-1)
            flat = p.data.view(-1)
            numeric = torch.empty_like(analytic)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                dn = loss().item()
                flat[i] = old
                numeric[i] = (up - dn) / (2 * h)
            denom = max(analytic.abs().max().item(), numeric.abs().max().item())
            errors[name] = 0.0 if denom == 0.0 else (analytic - numeric).abs().max().item() / denom
    return errors


def random_spec(rng: np.random.Generator, n_disks: int, image_size: int = 32) -> SceneSpec:
    """Independent scene sampler: distinct disparities on a 0.05 lattice, so any two differ by >= 0.05."""
    lattice = np.round(np.arange(0.1, 1.0001, 0.05), 10)
    ds = rng.choice(lattice, size=n_disks, replace=False)
    disks = [Disk(float(rng.uniform(0, image_size)), float(rng.uniform(0, image_size)),
                  float(rng.uniform(2, 9)), float(d)) for d in ds]
    return SceneSpec(disks, image_size)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, status, seconds: float, detail: str) -> None:
    """``status`` is a bool (PASS/FAIL) or a literal label such as FLAGGED."""
    label = status if isinstance(status, str) else ("PASS" if status else "FAIL")
    ACCEPTANCE_LINES[number] = f"criterion {number}: {label} [{seconds:.1f} s] {detail}"
