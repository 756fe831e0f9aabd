"""Layer specifications and their torch realizations."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import torch
from torch import nn

KINDS = ("conv1d", "batchnorm1d", "gelu", "maxpool1d", "adaptive_avgpool1d", "linear", "layernorm", "dropout", "flatten")

BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        p = self.params
        if self.kind == "conv1d":
            for k in ("in_channels", "out_channels", "kernel"):
                if int(p[k]) < 1:
                    raise ValueError(f"conv1d {k} must be >= 1")
            if int(p.get("stride", 1)) < 1:
                raise ValueError("conv1d stride must be >= 1")
        elif self.kind == "maxpool1d":
            if int(p["kernel"]) < 1 or int(p.get("stride", p["kernel"])) < 1:
                raise ValueError("maxpool1d kernel/stride must be >= 1")
        elif self.kind == "adaptive_avgpool1d":
            if int(p["output_size"]) < 1:
                raise ValueError("adaptive_avgpool1d output_size must be >= 1")
        elif self.kind == "dropout":
            if not 0.0 <= float(p.get("p", 0.5)) < 1.0:
                raise ValueError("dropout p must lie in [0, 1)")
        elif self.kind in ("linear",):
            if int(p["in_features"]) < 1 or int(p["out_features"]) < 1:
                raise ValueError("linear features must be >= 1")
        elif self.kind in ("batchnorm1d", "layernorm"):
            if int(p["features"]) < 1:
                raise ValueError(f"{self.kind} features must be >= 1")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], dict(d.get("params", {})))


def conv1d(cin, cout, k, s=1, padding=None) -> LayerSpec:
    return LayerSpec("conv1d", {"in_channels": cin, "out_channels": cout, "kernel": k, "stride": s,
                                "padding": k // 2 if padding is None else padding})


def batchnorm1d(n) -> LayerSpec:
    return LayerSpec("batchnorm1d", {"features": n})


def gelu() -> LayerSpec:
    return LayerSpec("gelu")


def maxpool1d(k, s=None) -> LayerSpec:
    return LayerSpec("maxpool1d", {"kernel": k, "stride": k if s is None else s})


def adaptive_avgpool1d(n) -> LayerSpec:
    return LayerSpec("adaptive_avgpool1d", {"output_size": n})


def linear(i, o) -> LayerSpec:
    return LayerSpec("linear", {"in_features": i, "out_features": o})


def layernorm(n) -> LayerSpec:
    return LayerSpec("layernorm", {"features": n})


def dropout(p) -> LayerSpec:
    return LayerSpec("dropout", {"p": p})


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


class _Checked(nn.Module):
    """Wraps a temporal layer with input-shape validation."""

    def __init__(self, inner: nn.Module, spec: LayerSpec):
        super().__init__()
        self.inner = inner
        self.spec = spec

    def forward(self, x):
        p = self.spec.params
        if x.dim() != 3:
            raise ValueError(f"{self.spec.kind} expects (batch, channels, time), got {tuple(x.shape)}")
        if self.spec.kind == "conv1d":
            if x.shape[1] != p["in_channels"]:
                raise ValueError(f"conv1d expects {p['in_channels']} channels, got {x.shape[1]}")
            if x.shape[2] + 2 * p.get("padding", 0) < p["kernel"]:
                raise ValueError("conv1d input shorter than kernel")
        elif self.spec.kind == "maxpool1d" and x.shape[2] < p["kernel"]:
            raise ValueError(f"maxpool1d input length {x.shape[2]} shorter than kernel {p['kernel']}")
        elif self.spec.kind == "batchnorm1d" and x.shape[1] != p["features"]:
            raise ValueError(f"batchnorm1d expects {p['features']} channels, got {x.shape[1]}")
        return self.inner(x)


def build_layer(spec: LayerSpec) -> nn.Module:
    p = spec.params
    k = spec.kind
    if k == "conv1d":
        m = nn.Conv1d(p["in_channels"], p["out_channels"], p["kernel"], stride=p.get("stride", 1),
                      padding=p.get("padding", 0))
        return _Checked(m, spec)
    if k == "batchnorm1d":
        return _Checked(nn.BatchNorm1d(p["features"], momentum=BN_MOMENTUM), spec)
    if k == "gelu":
        return nn.GELU(approximate="none")
    if k == "maxpool1d":
        return _Checked(nn.MaxPool1d(p["kernel"], stride=p.get("stride", p["kernel"])), spec)
    if k == "adaptive_avgpool1d":
        return _Checked(nn.AdaptiveAvgPool1d(p["output_size"]), spec)
    if k == "linear":
        return nn.Linear(p["in_features"], p["out_features"])
    if k == "layernorm":
        return nn.LayerNorm(p["features"])
    if k == "dropout":
        return nn.Dropout(p.get("p", 0.5))
    if k == "flatten":
        return nn.Flatten()
    raise AssertionError(k)


def build_stack(specs: list[LayerSpec]) -> nn.Sequential:
    return nn.Sequential(*[build_layer(s) for s in specs])


def layer_forward(layer: nn.Module, x: torch.Tensor, mode: str = "eval") -> torch.Tensor:
    """Run one layer in ``train`` or ``eval`` mode."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    layer.train(mode == "train")
    return layer(x)


def n_trainable(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
