"""EM feature refinement over spatial feature vectors.

Feature vectors Y (one per spatial position) are modelled as a mixture of K
directions on the unit sphere. With unit rows and temperature tau the
objective

    F(Z, mu) = sum_nk Z[n,k] * <y_n, mu_k> / tau  -  sum_nk Z[n,k] log Z[n,k]

is maximized over Z by a softmax over components (E-step) and over unit
bases by the normalized responsibility-weighted mean (M-step), so a run of
alternating steps never decreases it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
from torch import nn

from . import tensor_core as tc
from .blocks import Conv2d
from .errors import ConfigError, DegenerateComponentError, ShapeError

log = logging.getLogger(__name__)

_NORM_EPS = 1e-12
DEGENERATE_MASS = 1e-12


@dataclass(frozen=True)
class EmConfig:
    in_channels: int = 960
    reduced_channels: int = 540
    num_bases: int = 64
    iterations: int = 3
    temperature: float = 1.0

    def __post_init__(self):
        if self.iterations < 1 or self.num_bases < 1:
            raise ConfigError("EM needs iterations >= 1 and num_bases >= 1")
        if not self.temperature > 0:
            raise ConfigError(f"EM temperature must be positive, got {self.temperature}")


@dataclass
class EmState:
    bases: torch.Tensor
    responsibilities: torch.Tensor
    objective_trace: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.objective_trace)


def l2_normalize(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return x / x.norm(dim=axis, keepdim=True).clamp_min(_NORM_EPS)


def e_step(y: torch.Tensor, mu: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """Responsibilities Z[..., n, k] = softmax_k(<y_n, mu_k> / tau) on unit-normalized rows."""
    if y.shape[-1] != mu.shape[-1]:
        raise ShapeError(f"feature axis mismatch: Y has {y.shape[-1]}, bases have {mu.shape[-1]}")
    logits = l2_normalize(y) @ l2_normalize(mu).transpose(-2, -1) / tau
    return tc.softmax(logits, axis=-1)


def m_step(y: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Unit-normalized responsibility-weighted means of the rows of Y, [..., K, C].

    Raises :class:`DegenerateComponentError` when a component has no mass.
    """
    if y.shape[-2] != z.shape[-2]:
        raise ShapeError(f"position axis mismatch: Y has {y.shape[-2]}, Z has {z.shape[-2]}")
    mass = z.sum(dim=-2)
    weighted = z.transpose(-2, -1) @ y
    mu = l2_normalize(weighted / mass.clamp_min(DEGENERATE_MASS)[..., None])
    empty = (mass <= DEGENERATE_MASS)
    if bool(empty.any()):
        idx = torch.nonzero(empty.reshape(-1, empty.shape[-1]).any(0)).flatten().tolist()
        raise DegenerateComponentError(idx, partial=mu)
    return mu


def em_objective(y: torch.Tensor, z: torch.Tensor, mu: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """F(Z, mu) summed over positions (per leading batch index)."""
    sim = l2_normalize(y) @ l2_normalize(mu).transpose(-2, -1) / tau
    entropy = -(z * torch.log(z.clamp_min(torch.finfo(z.dtype).tiny))).sum(dim=(-2, -1))
    return (z * sim).sum(dim=(-2, -1)) + entropy


def _reseed(y: torch.Tensor, mu: torch.Tensor, components: list[int]) -> torch.Tensor:
    """Replace empty components by the feature vectors farthest from all current bases."""
    mu = mu.clone()
    yn = l2_normalize(y)
    for k in components:
        closeness = (yn @ mu.transpose(-2, -1)).amax(dim=-1)
        far = closeness.argmin(dim=-1)
        mu[..., k, :] = yn[torch.arange(y.shape[0]), far] if y.dim() == 3 else yn[far]
    return mu


def em_iterate(y: torch.Tensor, mu0: torch.Tensor, iterations: int, tau: float = 1.0,
               track: bool = True) -> EmState:
    """Run ``iterations`` E/M alternations from ``mu0`` on Y [..., HW, C].

    ``objective_trace[t]`` is F(Z_t, mu_t) after the t-th M-step; batched
    inputs give one trace value per batch item.
    """
    yn = l2_normalize(y)
    mu = l2_normalize(mu0)
    trace = []
    z = None
    for _ in range(iterations):
        z = e_step(yn, mu, tau)
        try:
            mu = m_step(yn, z)
        except DegenerateComponentError as exc:
            log.warning("EM: re-seeding empty components %s from farthest features", exc.components)
            mu = _reseed(yn, exc.partial, exc.components)
        if track:
            with torch.no_grad():
                trace.append(em_objective(yn, z, mu, tau).detach())
    return EmState(mu, z, trace)


def reconstruct(state: EmState) -> torch.Tensor:
    """Each position replaced by its responsibility-weighted mixture of bases: Z @ mu."""
    return state.responsibilities @ state.bases


class EMModule(nn.Module):
    """1x1 channel reduction, EM over positions, rank-K reconstruction plus residual."""

    def __init__(self, cfg: EmConfig = EmConfig()):
        super().__init__()
        self.cfg = cfg
        self.reduce = Conv2d(cfg.in_channels, cfg.reduced_channels, 1, bias=True)
        bases = torch.empty(cfg.num_bases, cfg.reduced_channels)
        nn.init.kaiming_uniform_(bases, a=5 ** 0.5)
        self.bases = nn.Parameter(l2_normalize(bases))
        self.recon_bn = tc.BatchNorm2d(cfg.reduced_channels)
        self.track = False
        self.last_state: EmState | None = None
        self.last_macs = 0

    def reduce_channels(self, x):
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"EM module expects {self.cfg.in_channels} channels (axis 1), got {x.shape[1]}")
        return self.reduce(x)

    def refine(self, r):
        """EM over the positions of the reduced map r [N,C,H,W]; returns X_hat [N,C,H,W]."""
        n, c, h, w = r.shape
        y = r.flatten(2).transpose(1, 2)
        state = em_iterate(y, self.bases, self.cfg.iterations, self.cfg.temperature, track=self.track)
        self.last_state = state
        k = self.cfg.num_bases
        self.last_macs = n * h * w * k * c * (2 * self.cfg.iterations + 1)
        # contiguous: at n == 1 the transposed view has a degenerate batch stride that torch's
        # batch-norm backward mishandles
        return reconstruct(state).transpose(1, 2).reshape(n, c, h, w).contiguous()

    def forward(self, x):
        r = self.reduce_channels(x)
        return r + self.recon_bn(self.refine(r))
