"""Hybrid feature extractor: MBConv local extractor, bridge, mask-free Transformer."""

import torch
import torch.nn as nn
from einops import rearrange

from thermoloc.errors import ShapeError


def conv_out(size, kernel, stride):
    """Output length of a convolution padded by ``kernel // 2``."""
    pad = kernel // 2
    return (size + 2 * pad - kernel) // stride + 1


class SqueezeExcite(nn.Module):
    def __init__(self, channels, reduced):
        super().__init__()
        self.reduce = nn.Conv2d(channels, reduced, 1)
        self.act = nn.SiLU()
        self.expand = nn.Conv2d(reduced, channels, 1)

    def forward(self, x):
        s = x.mean(dim=(2, 3), keepdim=True)
        s = self.expand(self.act(self.reduce(s)))
        return x * torch.sigmoid(s)


class MBConv(nn.Module):
    """Inverted residual block: expand, depthwise conv, SE gate, project, dropout.

    The identity skip is only added when ``stride == 1`` and the channel count
    is unchanged; otherwise the block returns the inner path alone.
    """

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        hidden = spec.in_channels * spec.expansion
        if spec.expansion != 1:
            self.expand = nn.Sequential(
                nn.Conv2d(spec.in_channels, hidden, 1, bias=False),
                nn.BatchNorm2d(hidden),
                nn.SiLU(),
            )
        else:
            self.expand = nn.Identity()
        self.depthwise = nn.Sequential(
            nn.Conv2d(hidden, hidden, spec.kernel, stride=spec.stride,
                      padding=spec.kernel // 2, groups=hidden, bias=False),
            nn.BatchNorm2d(hidden),
            nn.SiLU(),
        )
        self.se = SqueezeExcite(hidden, max(1, spec.in_channels // spec.se_reduction))
        self.project = nn.Sequential(
            nn.Conv2d(hidden, spec.out_channels, 1, bias=False),
            nn.BatchNorm2d(spec.out_channels),
        )
        self.dropout = nn.Dropout(spec.dropout_rate)
        self.use_residual = spec.stride == 1 and spec.in_channels == spec.out_channels

    def inner(self, x):
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"MBConv expects {self.spec.in_channels} channels, got {x.shape[1]}"
            )
        return self.dropout(self.project(self.se(self.depthwise(self.expand(x)))))

    def forward(self, x):
        out = self.inner(x)
        if self.use_residual:
            out = out + x
        return out


class LocalExtractor(nn.Module):
    """Stem convolution followed by the configured MBConv stages."""

    def __init__(self, cfg, in_channels=1, dropout=0.0):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, cfg.stem_channels, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(cfg.stem_channels),
            nn.SiLU(),
        )
        blocks = []
        channels = cfg.stem_channels
        for stage in cfg.stage_specs:
            for spec in stage.blocks(channels, dropout):
                blocks.append(MBConv(spec))
            channels = stage.out_channels
        self.blocks = nn.Sequential(*blocks)
        self.out_channels = channels

    def describe(self, input_size):
        """Shape table ``[(layer, (C, H, W)), ...]`` for an input of ``(H, W)``."""
        h, w = input_size
        rows = [("input", (self.stem[0].in_channels, h, w))]
        h, w = conv_out(h, 3, 2), conv_out(w, 3, 2)
        rows.append(("stem", (self.cfg.stem_channels, h, w)))
        for i, block in enumerate(self.blocks):
            s = block.spec
            h, w = conv_out(h, s.kernel, s.stride), conv_out(w, s.kernel, s.stride)
            kind = f"MBConv{s.expansion} k{s.kernel} s{s.stride}"
            rows.append((f"block{i} {kind}", (s.out_channels, h, w)))
        return rows

    def output_shape(self, input_size):
        return self.describe(input_size)[-1][1]

    def forward(self, x):
        h, w = x.shape[-2:]
        if min(h, w) < 2:
            raise ShapeError(f"input {tuple(x.shape[-2:])} is too small for the extractor")
        return self.blocks(self.stem(x))


def fixed_mask_indices(n_tokens, fraction, seed=0):
    """Deterministic subset of ``floor(fraction * n)`` token positions (never all)."""
    count = min(int(fraction * n_tokens), n_tokens - 1)
    gen = torch.Generator().manual_seed(seed)
    return torch.sort(torch.randperm(n_tokens, generator=gen)[:count]).values


class Bridge(nn.Module):
    """Turn a ``(B, C, H, W)`` feature map into ``(B, N, d_model)`` tokens.

    ``shape_first`` embeds each spatial position's channel vector,
    ``patch_first`` embeds flattened non-overlapping ``p x p`` patches, and
    ``vint_like`` is ``shape_first`` with a fixed subset of tokens replaced by a
    learned mask token.
    """

    def __init__(self, mode, channels, feature_hw, d_model, patch_size=2,
                 mask_fraction=0.5, positional_embedding=True):
        super().__init__()
        self.mode = mode
        self.patch_size = patch_size
        self.feature_hw = tuple(feature_hw)
        h, w = self.feature_hw
        if mode == "patch_first":
            if h % patch_size or w % patch_size:
                raise ShapeError(
                    f"patch size {patch_size} does not divide feature map {h}x{w}"
                )
            self.n_tokens = (h // patch_size) * (w // patch_size)
            self.embed = nn.Linear(channels * patch_size**2, d_model)
        else:
            self.n_tokens = h * w
            self.embed = nn.Linear(channels, d_model)
        if mode == "vint_like":
            self.mask_token = nn.Parameter(torch.zeros(1, 1, d_model))
            nn.init.trunc_normal_(self.mask_token, std=0.02)
            self.register_buffer("mask_index", fixed_mask_indices(self.n_tokens, mask_fraction))
        if positional_embedding:
            self.pos_embedding = nn.Parameter(torch.zeros(1, self.n_tokens, d_model))
            nn.init.trunc_normal_(self.pos_embedding, std=0.02)
        else:
            self.pos_embedding = None

    def forward(self, fm):
        if tuple(fm.shape[-2:]) != self.feature_hw:
            raise ShapeError(
                f"bridge built for a {self.feature_hw} feature map, got {tuple(fm.shape[-2:])}"
            )
        if self.mode == "patch_first":
            p = self.patch_size
            tokens = rearrange(fm, "b c (h p1) (w p2) -> b (h w) (p1 p2 c)", p1=p, p2=p)
        else:
            tokens = rearrange(fm, "b c h w -> b (h w) c")
        tokens = self.embed(tokens)
        if self.mode == "vint_like" and self.mask_index.numel():
            tokens = tokens.clone()
            tokens[:, self.mask_index] = self.mask_token.to(tokens.dtype)
        if self.pos_embedding is not None:
            tokens = tokens + self.pos_embedding
        return tokens


class Attention(nn.Module):
    """Multi-head self-attention with a single fused QKV projection.

    Inputs are layer-normalized first. No mask is applied unless one is
    passed explicitly (ablation only).
    """

    def __init__(self, d_model, n_heads, dropout=0.0):
        super().__init__()
        self.n_heads = n_heads
        self.scale = (d_model // n_heads) ** -0.5
        self.norm = nn.LayerNorm(d_model)
        self.to_qkv = nn.Linear(d_model, 3 * d_model)
        self.attn_drop = nn.Dropout(dropout)
        self.to_out = nn.Linear(d_model, d_model)

    def qkv(self, x):
        q, k, v = self.to_qkv(x).chunk(3, dim=-1)
        return [rearrange(t, "b n (h d) -> b h n d", h=self.n_heads) for t in (q, k, v)]

    def attend(self, x, mask=None):
        """Softmax attention weights ``(B, h, N, N)`` and values ``(B, h, N, d_h)``."""
        q, k, v = self.qkv(self.norm(x))
        dots = torch.matmul(q, k.transpose(-1, -2)) * self.scale
        if mask is not None:
            dots = dots + mask
        return dots.softmax(dim=-1), v

    def forward(self, x, mask=None):
        attn, v = self.attend(x, mask)
        out = rearrange(torch.matmul(self.attn_drop(attn), v), "b h n d -> b n (h d)")
        return self.to_out(out)


class FeedForward(nn.Module):
    def __init__(self, d_model, hidden, dropout=0.0):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.fc1 = nn.Linear(d_model, hidden)
        self.act = nn.GELU()
        self.dropout = nn.Dropout(dropout)
        self.fc2 = nn.Linear(hidden, d_model)

    def forward(self, o):
        return self.fc2(self.dropout(self.act(self.fc1(self.norm(o)))))


class TransformerBlock(nn.Module):
    def __init__(self, d_model, n_heads, mlp_ratio=4, dropout=0.0,
                 attention_dropout=0.0, standard_residual=False):
        super().__init__()
        self.attn = Attention(d_model, n_heads, attention_dropout)
        self.ff = FeedForward(d_model, mlp_ratio * d_model, dropout)
        self.standard_residual = standard_residual

    def forward(self, y, mask=None):
        a = self.attn(y, mask)
        if self.standard_residual:
            x = y + a
            return x + self.ff(x)
        # z = f(attn(y) + y) + attn(y) + y
        return self.ff(a + y) + a + y


class Transformer(nn.Module):
    """``depth`` blocks followed by a final LayerNorm."""

    def __init__(self, d_model, depth, n_heads, mlp_ratio=4, dropout=0.0,
                 attention_dropout=0.0, standard_residual=False):
        super().__init__()
        self.blocks = nn.ModuleList([
            TransformerBlock(d_model, n_heads, mlp_ratio, dropout, attention_dropout,
                             standard_residual)
            for _ in range(depth)
        ])
        self.norm = nn.LayerNorm(d_model)

    def forward(self, y, mask=None):
        for block in self.blocks:
            y = block(y, mask)
        return self.norm(y)


def key_mask(n_tokens, fraction, dtype=torch.float32):
    """Additive ``(N, N)`` mask hiding a fixed subset of keys from every query."""
    mask = torch.zeros(n_tokens, n_tokens, dtype=dtype)
    mask[:, fixed_mask_indices(n_tokens, fraction, seed=1)] = float("-inf")
    return mask


def pool_tokens(tokens):
    return tokens.mean(dim=-2)


class Backbone(nn.Module):
    """Image ``(B, 1, H, W)`` to pooled feature vector ``(B, d_model)``."""

    def __init__(self, cfg, dropout=0.0):
        super().__init__()
        self.cfg = cfg
        self.local = LocalExtractor(cfg, dropout=dropout)
        c, h, w = self.local.output_shape(cfg.input_size)
        self.bridge = Bridge(cfg.bridge_mode, c, (h, w), cfg.d_model, cfg.patch_size,
                             cfg.mask_fraction, cfg.positional_embedding)
        self.transformer = Transformer(cfg.d_model, cfg.depth, cfg.n_heads, cfg.mlp_ratio,
                                       dropout, cfg.attention_dropout, cfg.standard_residual)
        if cfg.use_mask:
            self.register_buffer("attn_mask", key_mask(self.bridge.n_tokens, cfg.mask_fraction))
        else:
            self.attn_mask = None

    def describe(self):
        rows = self.local.describe(self.cfg.input_size)
        rows.append((f"bridge {self.cfg.bridge_mode}", (self.bridge.n_tokens, self.cfg.d_model)))
        rows.append((f"transformer x{self.cfg.depth}", (self.bridge.n_tokens, self.cfg.d_model)))
        rows.append(("pool", (self.cfg.d_model,)))
        return rows

    def tokens(self, image):
        if tuple(image.shape[-2:]) != self.cfg.input_size:
            raise ShapeError(
                f"model expects {self.cfg.input_size} images, got {tuple(image.shape[-2:])}"
            )
        mask = None if self.attn_mask is None else self.attn_mask.to(image.dtype)
        return self.transformer(self.bridge(self.local(image)), mask)

    def forward(self, image):
        return pool_tokens(self.tokens(image))
