"""Effective receptive field probe.

For random inputs, the summed activation of the spatially central feature
vector of a stage is backpropagated to the input; absolute input gradients
are averaged over samples and summed over colour channels, then scaled so
the peak is 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn


@dataclass
class ErfMap:
    heatmap: np.ndarray  # [H, W], peak 1 unless all zero
    layer_tag: str


def stage_fn(model: nn.Module, stage: str) -> Callable[[torch.Tensor], torch.Tensor]:
    """Feature-map function for a named stage of an EMNet or Backbone."""
    names = model.stage_names()
    if stage not in names:
        raise KeyError(f"invalid stage {stage!r}; valid stages: {', '.join(names)}")
    if hasattr(model, "features"):
        return lambda x: model.features(x, stage)
    return lambda x: model(x, stage)


def erf_map(fn: Callable[[torch.Tensor], torch.Tensor], input_shape=(3, 224, 224), n_samples: int = 16,
            seed: int = 0, layer_tag: str = "", batch_size: int = 16) -> ErfMap:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    acc = torch.zeros(input_shape[1:], dtype=torch.float64)
    done = 0
    while done < n_samples:
        b = min(batch_size, n_samples - done)
        # samples are independent in eval mode, so one backward serves the whole batch
        x = torch.randn((b, *input_shape), generator=gen).requires_grad_(True)
        f = fn(x)
        h, w = f.shape[-2:]
        f[:, :, h // 2, w // 2].sum().backward()
        acc += x.grad.detach().abs().sum(dim=(0, 1)).to(torch.float64)
        done += b
    heat = (acc / n_samples).numpy()
    peak = heat.max()
    if peak > 0:
        heat = heat / peak
    return ErfMap(heat, layer_tag)


def model_erf_map(model: nn.Module, stage: str, n_samples: int = 16, seed: int = 0,
                  input_size: int = 224) -> ErfMap:
    was_training = model.training
    model.eval()
    try:
        return erf_map(stage_fn(model, stage), (3, input_size, input_size), n_samples, seed, stage)
    finally:
        model.train(was_training)


def erf_area(m: ErfMap | np.ndarray, threshold: float = 0.2) -> float:
    """Fraction of pixels at or above ``threshold`` times the peak."""
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    heat = m.heatmap if isinstance(m, ErfMap) else np.asarray(m)
    peak = heat.max()
    if peak <= 0:
        return 0.0
    return float(np.count_nonzero(heat >= threshold * peak)) / heat.size


def write_pgm(path, heat: np.ndarray) -> None:
    """8-bit binary PGM (P5), 255 = peak."""
    peak = heat.max()
    img = np.zeros(heat.shape, np.uint8) if peak <= 0 else np.round(heat / peak * 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    return np.frombuffer(parts[4][: w * h], np.uint8).reshape(h, w).astype(np.float64) / maxval


def write_csv(path, heat: np.ndarray) -> None:
    np.savetxt(path, heat, delimiter=",", fmt="%.6e")


# -- random-weight probe networks --------------------------------------------------


def _randomize_linears(model: nn.Module, seed: int, prefix: str = "") -> None:
    """Glorot-normal weights, N(0, 2 / (fan_in + fan_out)), and zero bias for Linear layers under ``prefix``."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, mod in model.named_modules():
            if isinstance(mod, nn.Linear) and name.startswith(prefix):
                std = (2.0 / (mod.in_features + mod.out_features)) ** 0.5
                mod.weight.copy_(torch.randn(mod.weight.shape, generator=gen) * std)
                if mod.bias is not None:
                    mod.bias.zero_()


def calibrate_batchnorm(model: nn.Module, stage: str, seed: int, batches: int = 4, batch_size: int = 8,
                        input_size: int = 224) -> None:
    """Set running statistics to the cumulative batch statistics of random inputs."""
    gen = torch.Generator().manual_seed(seed)
    saved = {}
    for mod in model.modules():
        if isinstance(mod, nn.BatchNorm2d):
            mod.reset_running_stats()
            saved[mod] = mod.momentum
            mod.momentum = None
    fn = stage_fn(model, stage)
    model.train()
    with torch.no_grad():
        for _ in range(batches):
            fn(torch.randn(batch_size, 3, input_size, input_size, generator=gen))
    for mod, momentum in saved.items():
        mod.momentum = momentum
    model.eval()


def probe_models(seed: int, stage: str = "gam3", kinds=("gam", "none", "se", "cbam"), em: bool = True,
                 input_size: int = 224) -> dict[str, nn.Module]:
    """Random-weight EMNet variants differing only in the module at the attention sites.

    All shared parameters are identical across variants. Linear layers get
    Glorot-normal weights (the training init keeps attention near identity,
    which would make every variant look alike), and batch-norm
    statistics are calibrated on random inputs so activations stay at unit scale.
    """
    from .model import EMNet

    torch.manual_seed(seed)
    ref = EMNet("gam", em, input_size=input_size)
    _randomize_linears(ref, seed)
    shared = ref.state_dict()
    out = {}
    for kind in kinds:
        torch.manual_seed(seed)
        m = EMNet(kind, em, input_size=input_size)
        own = m.state_dict()
        m.load_state_dict({k: v for k, v in shared.items() if k in own and own[k].shape == v.shape}, strict=False)
        if kind not in ("gam", "none"):
            _randomize_linears(m, seed + 1, prefix="backbone.layers.gam")
        calibrate_batchnorm(m, stage, seed, input_size=input_size)
        out[kind] = m
    return out
