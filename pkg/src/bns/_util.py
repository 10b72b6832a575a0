import math

import torch

DTYPE = torch.float64

# interior clamp for operations that need finite SNR or sigma > 0
EPS_T = 1e-6


def tensor(x):
    """Coerce ``x`` to a float64 tensor without copying existing float64 tensors."""
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


def scalar(x):
    """Python float from a 0-dim tensor or number."""
    if isinstance(x, torch.Tensor):
        return float(x.detach())
    return float(x)


def check_time(t, lo=0.0, hi=1.0, what="t"):
    from .errors import DomainError

    v = scalar(t)
    if not math.isfinite(v):
        raise DomainError(f"{what} must be finite, got {v}")
    if v < lo or v > hi:
        raise DomainError(f"{what}={v} outside [{lo}, {hi}]")
    return v


def fmt17(x):
    """Format a float with 17 significant digits (bit-exact round trip)."""
    x = float(x)
    if math.isnan(x) or math.isinf(x):
        raise ValueError(f"cannot serialize non-finite value {x}")
    return format(x, ".17g")
