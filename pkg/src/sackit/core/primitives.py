"""
Layer-level math: affine normalization (statistics + scale/shift) and
low-rank adapters.

Normalization uses the literal form y = gamma * (x - mu) / (sigma + eps) + beta,
i.e. eps is added to the standard deviation, not to the variance.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn

from .common import DegenerateInputError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

NORM_KINDS = ("layer", "batch", "group")
DEFAULT_EPS = 1e-5
LORA_INIT_STD = 0.02


def _check_kind(kind: str):
    if kind not in NORM_KINDS:
        raise ParameterError(f"Unknown normalization kind '{kind}', expected one of {NORM_KINDS}")


# --- Normalization ---

@dataclass
class NormParams:
    """Per-feature scale/shift of one normalization layer."""
    gamma: torch.Tensor
    beta: torch.Tensor
    eps: float = DEFAULT_EPS
    kind: str = "layer"
    groups: int = 1

    def __post_init__(self):
        _check_kind(self.kind)
        self.gamma = torch.as_tensor(self.gamma)
        self.beta = torch.as_tensor(self.beta)
        if self.gamma.shape != self.beta.shape or self.gamma.dim() != 1:
            raise ShapeError(
                f"gamma {tuple(self.gamma.shape)} and beta {tuple(self.beta.shape)} must be equal-length vectors"
            )
        # eps == 0 is accepted for exact oracle evaluation
        if self.eps < 0:
            raise ParameterError(f"eps must be non-negative, got {self.eps}")
        if self.kind == "group":
            if self.groups < 1 or self.num_features % self.groups != 0:
                raise ParameterError(f"groups={self.groups} must divide C={self.num_features}")

    @property
    def num_features(self) -> int:
        return int(self.gamma.shape[0])


def _safe_std(var: torch.Tensor) -> torch.Tensor:
    # sqrt has an infinite derivative at 0; route zero variance around it
    positive = var > 0
    safe = torch.where(positive, var, torch.ones_like(var))
    return torch.where(positive, torch.sqrt(safe), torch.zeros_like(var))


def compute_stats(x: torch.Tensor, kind: str, groups: int = 1) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Mean and (population) standard deviation over the reduction axes of `kind`.

    - batch: x is (N, C, *spatial), reduce over every axis except C
    - layer: reduce over the last axis (features of one position)
    - group: x is (N, C, *spatial), reduce over C/groups channels and all spatial axes

    Both outputs keep singleton dimensions so they broadcast against x.
    """
    _check_kind(kind)
    x = torch.as_tensor(x)
    if x.numel() == 0:
        raise DegenerateInputError("Cannot compute normalization statistics of an empty tensor")

    if kind == "layer":
        if x.shape[-1] == 0:
            raise DegenerateInputError("Layer normalization over an empty feature axis")
        mu = x.mean(dim=-1, keepdim=True)
        var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
        return mu, _safe_std(var)

    if x.dim() < 2:
        raise DegenerateInputError(f"{kind} normalization needs an (N, C, ...) tensor, got shape {tuple(x.shape)}")

    if kind == "batch":
        dims = [d for d in range(x.dim()) if d != 1]
        mu = x.mean(dim=dims, keepdim=True)
        var = ((x - mu) ** 2).mean(dim=dims, keepdim=True)
        return mu, _safe_std(var)

    n, c = x.shape[0], x.shape[1]
    if groups < 1 or c % groups != 0:
        raise ParameterError(f"groups={groups} must divide C={c}")
    grouped = x.reshape(n, groups, -1)
    mu = grouped.mean(dim=-1, keepdim=True)
    var = ((grouped - mu) ** 2).mean(dim=-1, keepdim=True)
    sigma = _safe_std(var)
    # expand back to per-channel so the result broadcasts against x
    shape = (n, c) + (1,) * (x.dim() - 2)
    mu = mu.repeat_interleave(c // groups, dim=1).reshape(shape)
    sigma = sigma.repeat_interleave(c // groups, dim=1).reshape(shape)
    return mu, sigma


def _affine_view(t: torch.Tensor, x: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "layer" or x.dim() < 2:
        return t
    return t.reshape((1, -1) + (1,) * (x.dim() - 2))


def normalize_affine(x: torch.Tensor, mu, sigma, params: NormParams) -> torch.Tensor:
    """y = gamma * (x - mu) / (sigma + eps) + beta, elementwise."""
    x = torch.as_tensor(x)
    mu = torch.as_tensor(mu, dtype=x.dtype)
    sigma = torch.as_tensor(sigma, dtype=x.dtype)
    gamma = _affine_view(params.gamma.to(x.dtype), x, params.kind)
    beta = _affine_view(params.beta.to(x.dtype), x, params.kind)
    try:
        torch.broadcast_shapes(x.shape, mu.shape, sigma.shape, gamma.shape, beta.shape)
    except RuntimeError as e:
        raise ShapeError(f"Normalization operands do not broadcast against x {tuple(x.shape)}: {e}")
    x_hat = (x - mu) / (sigma + params.eps)
    return gamma * x_hat + beta


class AffineNorm(nn.Module):
    """
    Normalization layer built on compute_stats / normalize_affine.

    Batch kind keeps running statistics for evaluation; `update_running_stats`
    controls whether they keep moving during training.
    """

    def __init__(self, num_features: int, kind: str = "layer", groups: int = 1,
                 eps: float = DEFAULT_EPS, momentum: float = 0.1):
        super().__init__()
        _check_kind(kind)
        if kind == "group" and num_features % groups != 0:
            raise ParameterError(f"groups={groups} must divide C={num_features}")
        self.kind = kind
        self.groups = groups
        self.eps = eps
        self.momentum = momentum
        self.update_running_stats = True
        self.gamma = nn.Parameter(torch.ones(num_features))
        self.beta = nn.Parameter(torch.zeros(num_features))
        if kind == "batch":
            self.register_buffer("running_mean", torch.zeros(num_features))
            self.register_buffer("running_sigma", torch.ones(num_features))

    def params(self) -> NormParams:
        return NormParams(self.gamma, self.beta, eps=self.eps, kind=self.kind, groups=self.groups)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind == "batch" and not self.training:
            view = (1, -1) + (1,) * (x.dim() - 2)
            mu = self.running_mean.reshape(view)
            sigma = self.running_sigma.reshape(view)
        else:
            mu, sigma = compute_stats(x, self.kind, self.groups)
            if self.kind == "batch" and self.update_running_stats:
                with torch.no_grad():
                    m = self.momentum
                    self.running_mean.mul_(1 - m).add_(m * mu.flatten())
                    self.running_sigma.mul_(1 - m).add_(m * sigma.flatten())
        return normalize_affine(x, mu, sigma, self.params())

    def extra_repr(self) -> str:
        return f"{self.gamma.shape[0]}, kind={self.kind}, eps={self.eps}"


# --- LoRA ---

class LoRAAdapter(nn.Module):
    """
    Rank-r update B @ A for a frozen (d_out x d_in) weight.
    B starts at zero so the adapter is an exact no-op until trained.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, scale: float = 1.0,
                 generator: Optional[torch.Generator] = None, dtype=None):
        super().__init__()
        if d_in < 1 or d_out < 1 or rank < 0:
            raise ParameterError(f"Invalid adapter dimensions d_in={d_in}, d_out={d_out}, rank={rank}")
        if scale <= 0:
            raise ParameterError(f"Adapter scale must be positive, got {scale}")
        self.d_in = d_in
        self.d_out = d_out
        self.rank = rank
        self.scale = scale
        a = torch.randn(rank, d_in, generator=generator, dtype=dtype) * LORA_INIT_STD
        self.A = nn.Parameter(a)
        self.B = nn.Parameter(torch.zeros(d_out, rank, dtype=a.dtype))

    @classmethod
    def from_weights(cls, A, B, scale: float = 1.0) -> "LoRAAdapter":
        A = torch.as_tensor(A, dtype=torch.get_default_dtype())
        B = torch.as_tensor(B, dtype=A.dtype)
        if A.dim() != 2 or B.dim() != 2 or B.shape[1] != A.shape[0]:
            raise ShapeError(f"Incompatible adapter matrices A {tuple(A.shape)} and B {tuple(B.shape)}")
        adapter = cls(A.shape[1], B.shape[0], A.shape[0], scale=scale, dtype=A.dtype)
        with torch.no_grad():
            adapter.A.copy_(A)
            adapter.B.copy_(B)
        return adapter

    @property
    def num_params(self) -> int:
        return lora_param_count(self.d_in, self.d_out, self.rank, 1)

    def extra_repr(self) -> str:
        return f"d_in={self.d_in}, d_out={self.d_out}, rank={self.rank}, scale={self.scale}"


def lora_forward(x: torch.Tensor, base_output: torch.Tensor, adapter: LoRAAdapter) -> torch.Tensor:
    """base_output + scale * B (A x), over the last axis."""
    x = torch.as_tensor(x)
    base_output = torch.as_tensor(base_output)
    if x.shape[-1] != adapter.d_in or base_output.shape[-1] != adapter.d_out:
        raise ShapeError(
            f"Adapter expects ({adapter.d_in} -> {adapter.d_out}), got input {tuple(x.shape)} "
            f"and base output {tuple(base_output.shape)}"
        )
    if adapter.rank == 0:
        return base_output
    delta = (x.to(adapter.A.dtype) @ adapter.A.t()) @ adapter.B.t()
    return base_output + adapter.scale * delta.to(base_output.dtype)


def lora_param_count(d_in: int, d_out: int, r: int, n_sites: int) -> int:
    """n_sites * r * (d_in + d_out): weight-only adaptation, biases are not adapted."""
    if min(d_in, d_out, r, n_sites) < 0:
        raise ParameterError("LoRA dimensions, rank and site count must be non-negative")
    return n_sites * r * (d_in + d_out)


def _lora_hook(module: nn.Module, inputs, output):
    return lora_forward(inputs[0], output, module.lora)


def inject_lora(linear: nn.Linear, rank: int, scale: float = 1.0,
                generator: Optional[torch.Generator] = None) -> LoRAAdapter:
    """
    Attach an adapter to `linear` as child module `lora`; the base weight keeps its
    parameter name and is left to the caller to freeze.
    """
    if not isinstance(linear, nn.Linear):
        raise ParameterError(f"LoRA can only wrap nn.Linear layers, got {type(linear).__name__}")
    if hasattr(linear, "lora"):
        return linear.lora
    adapter = LoRAAdapter(linear.in_features, linear.out_features, rank, scale=scale,
                          generator=generator, dtype=linear.weight.dtype)
    linear.add_module("lora", adapter)
    linear.register_forward_hook(_lora_hook)
    logger.debug(f"Injected rank-{rank} adapter on Linear({linear.in_features} -> {linear.out_features})")
    return adapter
