"""Encoder-decoder segmentation network with mergeable batch normalization."""
import copy
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F


@dataclass(frozen=True)
class Architecture:
    """Serializable description of a :class:`UNet`.

    ``levels`` resolutions with ``blocks_per_level`` conv blocks each on the
    encoder side, one middle block at the coarsest resolution, and a mirrored
    decoder. The default full profile has 5 levels x 3 blocks, i.e. 15
    encoder blocks from 128x128 down to 8x8.
    """

    num_classes: int = 4
    in_channels: int = 1
    base_channels: int = 32
    channel_mult: tuple = (1, 2, 2, 4, 4)
    blocks_per_level: int = 3
    input_size: tuple = (128, 128)

    @property
    def levels(self):
        return len(self.channel_mult)

    def to_dict(self):
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channel_mult"] = tuple(d["channel_mult"])
        d["input_size"] = tuple(d["input_size"])
        return cls(**d)


PROFILES = {
    "full": dict(base_channels=32, channel_mult=(1, 2, 2, 4, 4), blocks_per_level=3,
                 input_size=(128, 128)),
    "tiny": dict(base_channels=8, channel_mult=(1, 2, 4), blocks_per_level=1,
                 input_size=(64, 64)),
}


def architecture_for(profile="full", num_classes=4, **overrides):
    kw = dict(PROFILES[profile])
    kw.update(overrides)
    return Architecture(num_classes=num_classes, **kw)


class MergeableBatchNorm2d(nn.BatchNorm2d):
    """BatchNorm2d that can blend stored and current-batch statistics.

    With ``merge_rho`` set, normalization uses
    ``rho * running + (1 - rho) * batch`` for both mean and variance, and the
    running buffers are left untouched. Gradients flow through the batch part.
    """

    def __init__(self, num_features, **kwargs):
        super().__init__(num_features, **kwargs)
        self.merge_rho = None
        self.last_batch_stats = None

    def forward(self, x):
        if self.merge_rho is None:
            return super().forward(x)
        rho = float(self.merge_rho)
        dims = (0, 2, 3)
        mean_b = x.mean(dim=dims)
        var_b = x.var(dim=dims, unbiased=False)
        self.last_batch_stats = (mean_b.detach().clone(), var_b.detach().clone())
        mean = rho * self.running_mean + (1.0 - rho) * mean_b
        var = rho * self.running_var + (1.0 - rho) * var_b
        shape = (1, -1, 1, 1)
        out = (x - mean.view(shape)) / torch.sqrt(var.view(shape) + self.eps)
        if self.affine:
            out = out * self.weight.view(shape) + self.bias.view(shape)
        return out


class ConvBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.norm = MergeableBatchNorm2d(cout)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class UNet(nn.Module):
    def __init__(self, arch: Architecture):
        super().__init__()
        self.arch = arch
        chans = [arch.base_channels * m for m in arch.channel_mult]
        self.encoder = nn.ModuleList()
        cin = arch.in_channels
        for c in chans:
            blocks = []
            for _ in range(arch.blocks_per_level):
                blocks.append(ConvBlock(cin, c))
                cin = c
            self.encoder.append(nn.Sequential(*blocks))
        self.middle = ConvBlock(cin, cin)
        self.decoder = nn.ModuleList()
        for c in reversed(chans):
            blocks = [ConvBlock(cin + c, c)]
            for _ in range(arch.blocks_per_level - 1):
                blocks.append(ConvBlock(c, c))
            self.decoder.append(nn.Sequential(*blocks))
            cin = c
        self.head = nn.Conv2d(cin, arch.num_classes, 1)

    def forward(self, x):
        skips = []
        for i, stage in enumerate(self.encoder):
            x = stage(x)
            skips.append(x)
            if i < len(self.encoder) - 1:
                x = F.max_pool2d(x, 2)
        x = self.middle(x)
        for i, stage in enumerate(self.decoder):
            skip = skips[-1 - i]
            if x.shape[-2:] != skip.shape[-2:]:
                x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = stage(torch.cat([x, skip], dim=1))
        return self.head(x)


def build_model(arch: Architecture, seed=0, dtype=torch.float32):
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = UNet(arch)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)


def norm_layers(model):
    return [(name, m) for name, m in model.named_modules() if isinstance(m, nn.BatchNorm2d)]


def set_bn_merge(model, rho):
    """Enable (``rho`` in [0, 1]) or disable (``None``) statistics merging."""
    if rho is not None and not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    for _, m in norm_layers(model):
        if not isinstance(m, MergeableBatchNorm2d):
            raise TypeError("model has a normalization layer that cannot merge statistics")
        m.merge_rho = rho


def running_statistics(model):
    return {name: (m.running_mean.detach().clone(), m.running_var.detach().clone())
            for name, m in norm_layers(model)}


@torch.no_grad()
def batch_statistics(model, x):
    """Per-layer batch mean and biased variance seen while forwarding ``x``.

    Collected with merging at rho=0, i.e. each layer normalizes with the
    statistics of its own input.
    """
    previous = {name: m.merge_rho for name, m in norm_layers(model)}
    set_bn_merge(model, 0.0)
    try:
        model(x)
        stats = {name: m.last_batch_stats for name, m in norm_layers(model)}
    finally:
        for name, m in norm_layers(model):
            m.merge_rho = previous[name]
    return stats


def merge_bn_statistics(model, source_stats, target_stats, rho):
    """Return a copy of ``model`` whose running statistics are the convex blend
    ``rho * source + (1 - rho) * target``, layer by layer."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    merged = copy.deepcopy(model)
    for name, m in norm_layers(merged):
        if name not in source_stats or name not in target_stats:
            raise KeyError(f"missing statistics for normalization layer {name!r}")
        (mu_s, var_s), (mu_t, var_t) = source_stats[name], target_stats[name]
        if mu_s.shape != m.running_mean.shape or mu_t.shape != m.running_mean.shape:
            raise ValueError(f"statistics shape mismatch for layer {name!r}")
        m.running_mean.copy_(rho * mu_s + (1.0 - rho) * mu_t)
        m.running_var.copy_(rho * var_s + (1.0 - rho) * var_t)
    return merged


class NonFiniteOutputError(RuntimeError):
    pass


def _as_batch(x, model):
    param = next(model.parameters())
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
    t = t.to(dtype=param.dtype)
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[:, None]
    return t


def forward(model, gmr_slice, mode="eval"):
    """Run the network on one slice or a stack; returns logits (…, C, H, W)."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    x = _as_batch(gmr_slice, model)
    expected = tuple(model.arch.input_size)
    if tuple(x.shape[-2:]) != expected:
        raise ValueError(f"input size {tuple(x.shape[-2:])} does not match architecture {expected}")
    model.train(mode == "train")
    logits = model(x)
    if not torch.all(torch.isfinite(logits)):
        raise NonFiniteOutputError("network produced non-finite logits")
    if np.ndim(gmr_slice) == 2:
        return logits[0]
    return logits
