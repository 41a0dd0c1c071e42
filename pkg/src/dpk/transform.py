"""Training-only transformation modules that build hybrid features.

Student and teacher feature maps are cut into k x k patches and projected to
d-dimensional tokens, encoded by small pre-LN transformers, stitched
together under a token mask, and decoded back to the teacher's feature-map
shape. None of this runs at inference time; every module defined here counts
its forward calls so tests can prove the deployed student never touches it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

VARIANTS = ("encoder_decoder", "mlp_decoder", "conv")
FILLERS = ("teacher", "zero", "learnable")

MAX_TOKENS = 64
MAX_DIM = 256

_calls = {"forward": 0}


class ConfigurationError(ValueError):
    """Incompatible shapes or options detected while building modules."""


def transform_call_count() -> int:
    return _calls["forward"]


def reset_transform_calls() -> None:
    _calls["forward"] = 0


class TrainingOnly(nn.Module):
    """Marker base: parameters of these modules never ship with the student."""

    training_only = True

    def __call__(self, *args, **kwargs):
        _calls["forward"] += 1
        return super().__call__(*args, **kwargs)


@dataclass(frozen=True)
class TransformParams:
    variant: str = "encoder_decoder"
    patch_size: int | None = None
    dim: int | None = None
    encoder_blocks: int = 6
    decoder_blocks: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.encoder_blocks < 0 or self.decoder_blocks < 0:
            raise ConfigurationError("block counts must be >= 0")
        if self.heads < 1:
            raise ConfigurationError("heads must be >= 1")


def default_patch_size(height: int, width: int, max_tokens: int = MAX_TOKENS) -> int:
    """Largest k dividing both sides with at most ``max_tokens`` patches."""
    common = math.gcd(height, width)
    divisors = [k for k in range(1, common + 1) if common % k == 0]
    for k in divisors:
        if (height // k) * (width // k) <= max_tokens:
            return k
    return divisors[-1]


def default_dim(teacher_channels: int) -> int:
    return min(teacher_channels, MAX_DIM)


def check_patch_size(height: int, width: int, k: int) -> tuple[int, int]:
    if k < 1 or height % k or width % k:
        raise ConfigurationError(f"patch size {k} does not divide a {height}x{width} feature map")
    return height // k, width // k


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.xavier_uniform_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class PatchEmbed(TrainingOnly):
    """k x k convolution with stride k, flattened to (B, N, d) tokens."""

    def __init__(self, in_channels: int, dim: int, patch_size: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_channels, dim, kernel_size=patch_size, stride=patch_size)
        w = self.proj.weight.data
        nn.init.xavier_uniform_(w.view(w.shape[0], -1))
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_patch_size(x.shape[-2], x.shape[-1], self.patch_size)
        return self.proj(x).flatten(2).transpose(1, 2)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-LN transformer block: x + attn(LN(x)), then x + mlp(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0, eps: float = 1e-6):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=eps)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=eps)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TokenEncoder(TrainingOnly):
    """Adds a learnable 1-D position table, then runs ``depth`` blocks."""

    def __init__(self, num_tokens: int, dim: int, depth: int, heads: int,
                 mlp_ratio: float = 4.0, eps: float = 1e-6):
        super().__init__()
        self.pos_embed = nn.Parameter(torch.zeros(1, num_tokens, dim))
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio, eps) for _ in range(depth))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks.apply(_init_weights)

    def forward(self, tokens):
        if tokens.shape[1:] != self.pos_embed.shape[1:]:
            raise ValueError(
                f"expected tokens of shape (B, {self.pos_embed.shape[1]}, {self.pos_embed.shape[2]}), "
                f"got {tuple(tokens.shape)}"
            )
        x = tokens + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return x


class TokenDecoder(TrainingOnly):
    """Hybrid tokens -> (B, C_t, H, W) through its own position table and blocks."""

    def __init__(self, grid: tuple[int, int], dim: int, depth: int, heads: int,
                 out_channels: int, patch_size: int, mlp_ratio: float = 4.0, eps: float = 1e-6):
        super().__init__()
        self.grid = grid
        self.patch_size = patch_size
        self.out_channels = out_channels
        n = grid[0] * grid[1]
        self.pos_embed = nn.Parameter(torch.zeros(1, n, dim))
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio, eps) for _ in range(depth))
        self.norm = nn.LayerNorm(dim, eps=eps) if depth > 0 else nn.Identity()
        self.head = nn.Linear(dim, out_channels * patch_size**2)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.apply(_init_weights)

    def forward(self, hybrid):
        x = hybrid + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        x = self.head(self.norm(x))
        return unpatchify(x, self.grid, self.patch_size, self.out_channels)


def unpatchify(tokens: torch.Tensor, grid, patch_size: int, channels: int) -> torch.Tensor:
    """(B, N, C*k*k) tokens -> (B, C, rows*k, cols*k) map."""
    b = tokens.shape[0]
    rows, cols = grid
    k = patch_size
    x = tokens.reshape(b, rows, cols, channels, k, k)
    return x.permute(0, 3, 1, 4, 2, 5).reshape(b, channels, rows * k, cols * k)


def stitch(student: torch.Tensor, teacher: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Teacher tokens where ``mask`` is True, student tokens elsewhere.

    The teacher side is detached, so it never receives gradient, and the
    student receives none at masked positions.
    """
    if student.shape != teacher.shape:
        raise ValueError(f"token shapes differ: {tuple(student.shape)} vs {tuple(teacher.shape)}")
    mask = _flat_mask(mask, student)
    return torch.where(mask.unsqueeze(-1), teacher.detach(), student)


def fill_masked(
    student: torch.Tensor,
    mask: torch.Tensor,
    filler: str = "teacher",
    teacher: torch.Tensor | None = None,
    learnable_token: torch.Tensor | None = None,
) -> torch.Tensor:
    """Replace masked student tokens with teacher tokens, zeros or a learned token."""
    if filler == "teacher":
        if teacher is None:
            raise ConfigurationError("filler='teacher' needs teacher tokens")
        return stitch(student, teacher, mask)
    mask = _flat_mask(mask, student).unsqueeze(-1)
    if filler == "zero":
        return torch.where(mask, torch.zeros((), dtype=student.dtype), student)
    if filler == "learnable":
        if learnable_token is None:
            raise ConfigurationError("filler='learnable' needs a mask token")
        return torch.where(mask, learnable_token.reshape(1, 1, -1).to(student.dtype), student)
    raise ConfigurationError(f"unknown filler {filler!r}; expected one of {FILLERS}")


def _flat_mask(mask, tokens):
    mask = torch.as_tensor(mask, dtype=torch.bool)
    mask = mask.reshape(mask.shape[0], -1)
    if mask.shape != tokens.shape[:2]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match tokens {tuple(tokens.shape[:2])}")
    return mask


class StageTransform(TrainingOnly):
    """Hybrid-feature builder for one distilled stage.

    Args:
        student_shape: (C_s, H, W) of the student stage output.
        teacher_shape: (C_t, H, W) of the teacher stage output.
        params: module configuration; ``patch_size`` and ``dim`` default to
            :func:`default_patch_size` and :func:`default_dim`.
    """

    def __init__(self, student_shape, teacher_shape, params: TransformParams = TransformParams()):
        super().__init__()
        cs, h, w = student_shape
        ct, ht, wt = teacher_shape
        if (h, w) != (ht, wt):
            raise ConfigurationError(
                f"student map {h}x{w} and teacher map {ht}x{wt} differ spatially"
            )
        k = params.patch_size or default_patch_size(h, w)
        d = params.dim or default_dim(ct)
        self.grid = check_patch_size(h, w, k)
        self.patch_size = k
        self.dim = d
        self.variant = params.variant
        self.target_shape = (ct, h, w)
        n = self.grid[0] * self.grid[1]

        self.student_embed = PatchEmbed(cs, d, k)
        self.teacher_embed = PatchEmbed(ct, d, k)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
        nn.init.trunc_normal_(self.mask_token, std=0.02)

        if params.variant == "conv":
            self.head = ConvHead(d, self.grid, self.target_shape)
            return
        enc_depth = params.encoder_blocks if params.variant == "encoder_decoder" else 0
        self.student_encoder = TokenEncoder(n, d, enc_depth, params.heads, params.mlp_ratio, params.ln_eps)
        self.teacher_encoder = TokenEncoder(n, d, enc_depth, params.heads, params.mlp_ratio, params.ln_eps)
        self.decoder = TokenDecoder(
            self.grid, d, params.decoder_blocks, params.heads, ct, k, params.mlp_ratio, params.ln_eps
        )

    def tokens(self, student_feat, teacher_feat):
        s = self.student_embed(student_feat)
        t = self.teacher_embed(teacher_feat.detach())
        if self.variant != "conv":
            s, t = self.student_encoder(s), self.teacher_encoder(t)
        return s, t

    def forward(self, student_feat, teacher_feat, mask, filler: str = "teacher"):
        s, t = self.tokens(student_feat, teacher_feat)
        hybrid = fill_masked(s, mask, filler, teacher=t, learnable_token=self.mask_token)
        if self.variant == "conv":
            return self.head(hybrid)
        return self.decoder(hybrid)


class ConvHead(TrainingOnly):
    """Three 3x3 convolutions, 2x2 average pooling and a linear map to the target."""

    def __init__(self, dim: int, grid, target_shape):
        super().__init__()
        self.grid = grid
        self.target_shape = target_shape
        self.convs = nn.Sequential(
            *(m for _ in range(3) for m in (nn.Conv2d(dim, dim, 3, padding=1), nn.ReLU()))
        )
        rows, cols = grid
        pooled = rows >= 2 and cols >= 2
        self.pool = nn.AvgPool2d(2, ceil_mode=True) if pooled else nn.Identity()
        pr, pc = (math.ceil(rows / 2), math.ceil(cols / 2)) if pooled else (rows, cols)
        self.fc = nn.Linear(dim * pr * pc, math.prod(target_shape))

    def forward(self, tokens):
        b, n, d = tokens.shape
        x = tokens.transpose(1, 2).reshape(b, d, *self.grid)
        x = self.pool(self.convs(x)).flatten(1)
        return self.fc(x).reshape(b, *self.target_shape)


def patchify(feature_map: torch.Tensor, embed: PatchEmbed) -> torch.Tensor:
    return embed(feature_map)


def encode(tokens: torch.Tensor, encoder: TokenEncoder) -> torch.Tensor:
    return encoder(tokens)


def decode(hybrid: torch.Tensor, decoder: TokenDecoder, target_shape) -> torch.Tensor:
    c, h, w = target_shape
    rows, cols = decoder.grid
    k = decoder.patch_size
    if (c, h, w) != (decoder.out_channels, rows * k, cols * k):
        raise ConfigurationError(
            f"decoder produces {(decoder.out_channels, rows * k, cols * k)}, target is {(c, h, w)}"
        )
    return decoder(hybrid)
