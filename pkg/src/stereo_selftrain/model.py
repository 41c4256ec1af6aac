"""A small recurrent stereo network with RAFT-style iterative refinement.

Shared convolutional features at 1/``downsample_factor`` resolution feed a
1-D all-pairs correlation volume along each scanline. Each iteration looks
up a local window of correlations around the current disparity estimate,
encodes it together with the estimate, runs a convolutional GRU, and adds a
predicted increment. Every iterate is upsampled to full resolution, so the
returned trace is directly comparable across iterations.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import DisparityMap, PredictionTrace, StereoSample
from .errors import StructureMismatchError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DISPARITY_MARGIN = 1.5


@dataclass
class ModelConfig:
    feature_channels: int = 32
    hidden_channels: int = 48
    context_channels: int = 32
    downsample_factor: int = 4
    n_iters: int = 8
    max_disparity: float = 64.0
    corr_levels: int = 2
    corr_radius: int = 3

    def __post_init__(self):
        if self.n_iters < 2:
            raise ValueError("n_iters must be >= 2")
        if self.downsample_factor not in (2, 4):
            raise ValueError("downsample_factor must be 2 or 4")
        if self.max_disparity <= 0:
            raise ValueError("max_disparity must be positive")


def _conv(cin, cout, k=3, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


class FeatureEncoder(nn.Module):
    def __init__(self, out_channels, downsample_factor):
        super().__init__()
        mid = out_channels // 2
        self.conv1 = _conv(3, mid, 3, stride=2)
        self.conv2 = _conv(mid, out_channels, 3, stride=2 if downsample_factor == 4 else 1)
        self.conv3 = _conv(out_channels, out_channels, 3)

    def forward(self, x):
        x = F.relu(F.instance_norm(self.conv1(x)))
        x = F.relu(F.instance_norm(self.conv2(x)))
        return F.relu(F.instance_norm(self.conv3(x)))


class ConvGRU(nn.Module):
    def __init__(self, hidden, inp):
        super().__init__()
        self.convz = _conv(hidden + inp, hidden)
        self.convr = _conv(hidden + inp, hidden)
        self.convq = _conv(hidden + inp, hidden)

    def forward(self, h, x):
        hx = torch.cat([h, x], dim=1)
        z = torch.sigmoid(self.convz(hx))
        r = torch.sigmoid(self.convr(hx))
        q = torch.tanh(self.convq(torch.cat([r * h, x], dim=1)))
        return (1 - z) * h + z * q


class UpdateBlock(nn.Module):
    def __init__(self, corr_channels, hidden, context, max_disp_lowres):
        super().__init__()
        self.max_disp_lowres = max_disp_lowres
        self.convc = _conv(corr_channels, 32, 1)
        self.convd = _conv(1, 16, 3)
        self.convm = _conv(48, 31, 3)
        self.gru = ConvGRU(hidden, 32 + context)
        self.head1 = _conv(hidden, 32, 3)
        self.head2 = _conv(32, 1, 3)

    def forward(self, hidden, context, corr, disp):
        c = F.relu(self.convc(corr))
        d = F.relu(self.convd(disp / self.max_disp_lowres))
        m = F.relu(self.convm(torch.cat([c, d], dim=1)))
        x = torch.cat([m, disp / self.max_disp_lowres, context], dim=1)
        hidden = self.gru(hidden, x)
        delta = self.head2(F.relu(self.head1(hidden)))
        return hidden, delta


class CorrPyramid:
    """Scanline correlation volume with average-pooled coarser levels."""

    def __init__(self, fmap_l, fmap_r, levels, radius):
        b, c, h, w = fmap_l.shape
        corr = torch.einsum("bchi,bchj->bhij", fmap_l, fmap_r) / c ** 0.5
        corr = corr.reshape(b * h * w, 1, 1, w)
        self.pyramid = [corr]
        for _ in range(levels - 1):
            corr = F.avg_pool2d(corr, kernel_size=(1, 2), stride=(1, 2))
            self.pyramid.append(corr)
        self.radius = radius
        self.shape = (b, h, w)

    def lookup(self, disp):
        b, h, w = self.shape
        r = self.radius
        x0 = torch.arange(w, dtype=disp.dtype, device=disp.device).view(1, 1, w) - disp[:, 0]
        offsets = torch.arange(-r, r + 1, dtype=disp.dtype, device=disp.device)
        out = []
        for lvl, corr in enumerate(self.pyramid):
            wl = corr.shape[-1]
            x = x0.reshape(-1, 1) / 2 ** lvl + offsets.view(1, -1)
            gx = 2 * x / max(wl - 1, 1) - 1
            grid = torch.stack([gx, torch.zeros_like(gx)], dim=-1).view(-1, 1, 2 * r + 1, 2)
            sampled = F.grid_sample(corr, grid, mode="bilinear", padding_mode="zeros",
                                    align_corners=True)
            out.append(sampled.view(b, h, w, 2 * r + 1).permute(0, 3, 1, 2))
        return torch.cat(out, dim=1)


@dataclass
class RefinementState:
    """Recurrent state after some iterations, enough to resume refinement."""

    disp_lowres: torch.Tensor
    hidden: torch.Tensor


class IterativeStereoNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        ds = config.downsample_factor
        self.encoder = FeatureEncoder(config.feature_channels, ds)
        self.fmap_head = _conv(config.feature_channels, config.feature_channels, 1)
        self.context_head = _conv(config.feature_channels,
                                  config.hidden_channels + config.context_channels, 3)
        corr_channels = config.corr_levels * (2 * config.corr_radius + 1)
        self.max_disp_lowres = DISPARITY_MARGIN * config.max_disparity / ds
        self.update = UpdateBlock(corr_channels, config.hidden_channels,
                                  config.context_channels, config.max_disparity / ds)

    def _check_size(self, h, w):
        ds = self.config.downsample_factor
        min_w = ds * 2 ** self.config.corr_levels
        if h < 2 * ds or w < min_w:
            raise ValueError(
                f"image {h}x{w} too small for downsample factor {ds} "
                f"(need height >= {2 * ds}, width >= {min_w})"
            )

    def forward(self, left, right, iters: Optional[int] = None,
                state: Optional[RefinementState] = None, return_state: bool = False):
        """Run ``iters`` refinement steps on (B, 3, H, W) images in [0, 1].

        Returns the list of full-resolution iterates, each (B, 1, H, W), and
        optionally the final ``RefinementState``.
        """
        iters = self.config.n_iters if iters is None else iters
        b, _, H, W = left.shape
        self._check_size(H, W)
        ds = self.config.downsample_factor
        ph, pw = (-H) % ds, (-W) % ds
        x = torch.cat([left, right], dim=0) * 2 - 1
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        feats = self.encoder(x)
        fmaps = self.fmap_head(feats)
        fmap_l, fmap_r = fmaps[:b], fmaps[b:]
        corr = CorrPyramid(fmap_l, fmap_r, self.config.corr_levels, self.config.corr_radius)

        ctx = self.context_head(feats[:b])
        hidden_init, context = torch.split(
            ctx, [self.config.hidden_channels, self.config.context_channels], dim=1)
        context = F.relu(context)
        if state is None:
            hidden = torch.tanh(hidden_init)
            disp = torch.zeros_like(fmap_l[:, :1])
        else:
            hidden, disp = state.hidden, state.disp_lowres

        preds = []
        for _ in range(iters):
            hidden, delta = self.update(hidden, context, corr.lookup(disp), disp)
            disp = (disp + delta).clamp(0.0, self.max_disp_lowres)
            up = ds * F.interpolate(disp, scale_factor=ds, mode="bilinear", align_corners=False)
            preds.append(up[..., :H, :W])
        if return_state:
            return preds, RefinementState(disp, hidden)
        return preds


def init_parameters(config: ModelConfig, seed: int) -> IterativeStereoNet:
    """Deterministically initialised network; same seed gives identical weights."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = IterativeStereoNet(config)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def sample_to_tensors(sample: StereoSample, dtype=torch.float32):
    left = torch.from_numpy(np.array(sample.left)).permute(2, 0, 1)[None]
    right = torch.from_numpy(np.array(sample.right)).permute(2, 0, 1)[None]
    if left.shape[1] == 1:
        left, right = left.expand(-1, 3, -1, -1), right.expand(-1, 3, -1, -1)
    return left.to(dtype), right.to(dtype)


@torch.no_grad()
def infer(model: IterativeStereoNet, sample: StereoSample, n_iters: Optional[int] = None) -> PredictionTrace:
    n_iters = model.config.n_iters if n_iters is None else n_iters
    if n_iters < 2:
        raise ValueError("n_iters must be >= 2 for a prediction trace")
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        left, right = sample_to_tensors(sample, dtype)
        preds = model(left, right, n_iters)
    finally:
        model.train(was_training)
    return PredictionTrace(tuple(DisparityMap(p[0, 0].float().numpy()) for p in preds))


def supervised_sequence_loss(preds, gt, valid, gamma: float = 0.9) -> torch.Tensor:
    """Sum over iterates of ``gamma**(n-k) * mean_valid |P^k - gt|``.

    ``preds`` is a list of (B, 1, H, W) tensors (or an (n, ...) tensor), and
    gt/valid are broadcastable to each iterate.
    """
    n = len(preds)
    if n == 0:
        raise ValueError("empty prediction trace")
    valid = valid.to(torch.bool)
    if preds[0].shape != gt.shape or valid.shape != gt.shape:
        raise ValueError(
            f"shape mismatch: pred {tuple(preds[0].shape)}, gt {tuple(gt.shape)}, "
            f"valid {tuple(valid.shape)}"
        )
    count = valid.sum().clamp(min=1)
    loss = preds[0].new_zeros(())
    for k, p in enumerate(preds, start=1):
        weight = gamma ** (n - k)
        if weight == 0:
            continue
        loss = loss + weight * ((p - gt).abs() * valid).sum() / count
    return loss


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def check_same_structure(a: nn.Module, b: nn.Module):
    pa, pb = dict(a.named_parameters()), dict(b.named_parameters())
    ba, bb = dict(a.named_buffers()), dict(b.named_buffers())
    if pa.keys() != pb.keys() or ba.keys() != bb.keys():
        missing = sorted(set(pa) ^ set(pb) | set(ba) ^ set(bb))
        raise StructureMismatchError(f"parameter names differ: {missing[:5]}")
    for name in list(pa) + list(ba):
        ta = pa.get(name, ba.get(name))
        tb = pb.get(name, bb.get(name))
        if ta.shape != tb.shape:
            raise StructureMismatchError(
                f"{name}: shape {tuple(ta.shape)} vs {tuple(tb.shape)}")


def load_state(model: nn.Module, state_dict: dict):
    """Load weights after checking name and shape agreement."""
    own = model.state_dict()
    if own.keys() != state_dict.keys():
        diff = sorted(set(own) ^ set(state_dict))
        raise StructureMismatchError(f"checkpoint parameter names differ: {diff[:5]}")
    for name, tensor in own.items():
        if tuple(tensor.shape) != tuple(state_dict[name].shape):
            raise StructureMismatchError(
                f"{name}: checkpoint shape {tuple(state_dict[name].shape)}, "
                f"model shape {tuple(tensor.shape)}")
    model.load_state_dict(state_dict)


def save_checkpoint(path, model: IterativeStereoNet, **extra):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "state_dict": model.state_dict(),
    }
    payload.update(extra)
    torch.save(payload, path)


def read_checkpoint(path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "state_dict" not in payload:
        raise StructureMismatchError(f"{path} is not a model checkpoint")
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise StructureMismatchError(f"unsupported checkpoint version {version}")
    return payload


def load_checkpoint(path, config: Optional[ModelConfig] = None):
    """Load a model from ``path``.

    When ``config`` is given the checkpoint must fit a model built from it;
    otherwise the stored config is used. Returns (model, payload).
    """
    payload = read_checkpoint(path)
    config = config or ModelConfig(**payload["model_config"])
    model = IterativeStereoNet(config)
    load_state(model, payload["state_dict"])
    return model, payload
