"""The four parametric pieces of the adversarial adaptation game and the
gradient reversal layer that couples them.

F (features) feeds both the class head C and the domain discriminator D;
the curriculum scorer G is a fully independent network that consumes raw
inputs and emits one unbounded score per source sample. D's pre-activation
is clamped to [-15, 15] before the sigmoid so log D and log(1 - D) stay
finite for any finite input.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from .data import Batch

PRESETS = ("mlp_synth", "digits_small")
DISC_CLAMP = 15.0
CHECKPOINT_MAGIC = b"CMSSCKP\x01"


class ShapeError(ValueError):
    """Input shape does not match the architecture spec."""


class GradReverseFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


def grad_reverse(x: torch.Tensor, lam: float) -> torch.Tensor:
    """Identity in the forward pass; scales the backward gradient by -lam."""
    lam = float(lam)
    if not math.isfinite(lam):
        raise ValueError("grad_reverse coefficient must be finite")
    return GradReverseFn.apply(x, lam)


@dataclass(frozen=True)
class ArchitectureSpec:
    """Preset plus the widths needed to rebuild it from text alone."""

    preset: str
    n_classes: int
    input_shape: tuple[int, ...]
    hidden: int = 64
    feature_dim: int = 64

    def __post_init__(self) -> None:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.preset == "digits_small" and len(self.input_shape) != 3:
            raise ShapeError("digits_small expects (C, H, W) input")
        if self.preset == "mlp_synth" and len(self.input_shape) != 1:
            raise ShapeError("mlp_synth expects a flat input shape")

    def resolved_feature_dim(self) -> int:
        if self.preset == "digits_small":
            return 1024
        return self.feature_dim

    def to_text(self) -> str:
        shape = "x".join(str(s) for s in self.input_shape)
        return (
            f"preset={self.preset}\nn_classes={self.n_classes}\n"
            f"input_shape={shape}\nhidden={self.hidden}\nfeature_dim={self.feature_dim}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "ArchitectureSpec":
        kv = dict(line.split("=", 1) for line in text.strip().splitlines())
        return cls(
            preset=kv["preset"],
            n_classes=int(kv["n_classes"]),
            input_shape=tuple(int(s) for s in kv["input_shape"].split("x")),
            hidden=int(kv["hidden"]),
            feature_dim=int(kv["feature_dim"]),
        )


class MlpFeatures(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim), nn.ReLU()
        )

    def forward(self, x):
        return self.net(x)


class ConvFeatures(nn.Module):
    """conv(64,5x5)-pool-conv(64,5x5)-pool-conv(128,5x5)-fc(1024)."""

    def __init__(self, in_shape: tuple[int, int, int]):
        super().__init__()
        c, h, w = in_shape
        self.conv = nn.Sequential(
            nn.Conv2d(c, 64, 5, padding=2),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(64, 64, 5, padding=2),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(64, 128, 5, padding=2),
            nn.ReLU(),
        )
        flat = 128 * (h // 4) * (w // 4)
        self.fc = nn.Sequential(nn.Linear(flat, 1024), nn.ReLU())

    def forward(self, x):
        z = self.conv(x)
        return self.fc(z.flatten(1))


class Discriminator(nn.Module):
    """Binary domain head; output is strictly inside (0, 1)."""

    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def forward(self, x):
        z = self.net(x).squeeze(-1)
        return torch.sigmoid(z.clamp(-DISC_CLAMP, DISC_CLAMP))


class CurriculumScorer(nn.Module):
    """Mirrors the feature preset with a scalar head. The head is
    zero-initialized so every sample starts with an identical score."""

    def __init__(self, features: nn.Module, feature_dim: int):
        super().__init__()
        self.features = features
        self.head = nn.Linear(feature_dim, 1)

    def forward(self, x):
        return self.head(self.features(x)).squeeze(-1)


@dataclass
class ModelBundle:
    spec: ArchitectureSpec
    feature: nn.Module  # F, parameters theta
    classifier: nn.Module  # C, parameters phi
    discriminator: nn.Module  # D, parameters psi
    curriculum: nn.Module  # G, parameters rho

    def groups(self) -> dict[str, nn.Module]:
        return {
            "feature": self.feature,
            "classifier": self.classifier,
            "discriminator": self.discriminator,
            "curriculum": self.curriculum,
        }

    def parameters_of(self, *names: str) -> list[nn.Parameter]:
        mods = self.groups()
        return [p for n in names for p in mods[n].parameters()]

    def dtype(self) -> torch.dtype:
        return next(self.feature.parameters()).dtype

    def to_tensor(self, x: np.ndarray) -> torch.Tensor:
        t = torch.as_tensor(x, dtype=self.dtype())
        if tuple(t.shape[1:]) != self.spec.input_shape:
            raise ShapeError(
                f"input shape {tuple(t.shape[1:])} != spec {self.spec.input_shape}"
            )
        return t


@dataclass(frozen=True)
class ForwardPass:
    features_s: torch.Tensor
    features_t: torch.Tensor
    class_logits_s: torch.Tensor
    d_s: torch.Tensor
    d_t: torch.Tensor
    raw_scores_s: torch.Tensor


def forward_all(bundle: ModelBundle, batch: Batch) -> ForwardPass:
    """Full forward over one batch: discriminator on both halves, class
    logits and curriculum scores on the source half only."""
    xs = bundle.to_tensor(batch.source_x)
    xt = bundle.to_tensor(batch.target_x)
    fs = bundle.feature(xs)
    ft = bundle.feature(xt)
    return ForwardPass(
        features_s=fs,
        features_t=ft,
        class_logits_s=bundle.classifier(fs),
        d_s=bundle.discriminator(fs),
        d_t=bundle.discriminator(ft),
        raw_scores_s=bundle.curriculum(xs),
    )


def _reinit(module: nn.Module, gen: torch.Generator) -> None:
    # Default torch scheme (uniform +-1/sqrt(fan_in)) with an explicit generator.
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            fan_in = m.weight.shape[1] * (
                m.weight.shape[2] * m.weight.shape[3] if m.weight.ndim == 4 else 1
            )
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)


def init_parameters(
    spec: ArchitectureSpec, seed: int, dtype: torch.dtype = torch.float32
) -> ModelBundle:
    """Deterministically initialized bundle. G's scalar head is zeroed so
    first-iteration curriculum weights are exactly uniform."""
    d_f = spec.resolved_feature_dim()
    if spec.preset == "mlp_synth":
        feature: nn.Module = MlpFeatures(spec.input_shape[0], spec.hidden, d_f)
        g_body: nn.Module = MlpFeatures(spec.input_shape[0], spec.hidden, d_f)
        disc_hidden = spec.hidden
    else:
        feature = ConvFeatures(spec.input_shape)  # type: ignore[arg-type]
        g_body = ConvFeatures(spec.input_shape)  # type: ignore[arg-type]
        disc_hidden = 512
    classifier = nn.Linear(d_f, spec.n_classes)
    discriminator = Discriminator(d_f, disc_hidden)
    curriculum = CurriculumScorer(g_body, d_f)

    gen = torch.Generator().manual_seed(seed)
    for mod in (feature, classifier, discriminator, curriculum):
        _reinit(mod, gen)
    with torch.no_grad():
        curriculum.head.weight.zero_()
        curriculum.head.bias.zero_()

    bundle = ModelBundle(spec, feature, classifier, discriminator, curriculum)
    for mod in bundle.groups().values():
        mod.to(dtype)
    return bundle


# ---------------------------------------------------------------------------
# Checkpoints: versioned container of named little-endian arrays plus the
# architecture text and RNG bookkeeping; round-trips bit-exactly.


def _dtype_code(dtype: np.dtype) -> str:
    return {np.dtype("float32"): "<f4", np.dtype("float64"): "<f8"}[np.dtype(dtype)]


def save_checkpoint(
    path: str | Path,
    bundle: ModelBundle,
    momentum: dict[str, np.ndarray] | None = None,
    extra: dict[str, Any] | None = None,
) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    for gname, mod in bundle.groups().items():
        for pname, p in mod.named_parameters():
            arrays.append((f"model/{gname}/{pname}", p.detach().numpy()))
    for name, buf in (momentum or {}).items():
        arrays.append((f"momentum/{name}", np.asarray(buf)))

    index = []
    blobs = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        code = _dtype_code(arr.dtype)
        arr = arr.astype(code, copy=False)
        index.append({"name": name, "shape": list(arr.shape), "dtype": code})
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"arch": bundle.spec.to_text(), "arrays": index, "extra": extra or {}},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(
    path: str | Path,
) -> tuple[ModelBundle, dict[str, np.ndarray], dict[str, Any]]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen])
    spec = ArchitectureSpec.from_text(header["arch"])

    offset = 12 + hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype=dt, count=count, offset=offset)
        arrays[entry["name"]] = arr.reshape(entry["shape"])
        offset += arr.nbytes

    dtype = torch.float64 if any(
        e["dtype"] == "<f8" for e in header["arrays"]
    ) else torch.float32
    bundle = init_parameters(spec, seed=0, dtype=dtype)
    with torch.no_grad():
        for gname, mod in bundle.groups().items():
            for pname, p in mod.named_parameters():
                p.copy_(torch.from_numpy(arrays[f"model/{gname}/{pname}"].copy()))

    momentum = {
        name[len("momentum/") :]: arr.copy()
        for name, arr in arrays.items()
        if name.startswith("momentum/")
    }
    return bundle, momentum, header["extra"]
