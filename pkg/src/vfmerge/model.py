"""The mini merged-model architecture.

One shared ViT backbone feeds two heads: an image-text alignment head
(transformer layers + max-pool + layernorm + MLP projection into the shared
embedding space) and a promptable mask head (prompt encoder + two-way
cross-attention decoder with 4x learned upsampling). A frozen table of
orthogonal class embeddings stands in for the text encoder.

Shapes use: B batch, C channels, H=W image pixels, G = H / patch_size grid,
D backbone width, E shared embedding dim.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .errors import ConfigError, InputError

FG, BG = 1, 0  # point labels


@dataclass
class GeometricPrompt:
    """Points / boxes / optional low-res mask prior, in pixel coordinates.

    points: (x, y, label) with label 1=foreground, 0=background.
    boxes: (x0, y0, x1, y1) with x0<=x1, y0<=y1.
    mask_prior: float grid at 4x the patch grid of the target resolution.
    """

    points: list[tuple[float, float, int]] = field(default_factory=list)
    boxes: list[tuple[float, float, float, float]] = field(default_factory=list)
    mask_prior: torch.Tensor | None = None

    def validate(self, resolution: int) -> None:
        if not self.points and not self.boxes and self.mask_prior is None:
            raise InputError("empty prompt: need at least one point, box or mask prior")
        for x, y, label in self.points:
            if not (0 <= x <= resolution and 0 <= y <= resolution):
                raise InputError(f"point ({x}, {y}) outside image of size {resolution}")
            if label not in (FG, BG):
                raise InputError(f"point label must be 0 or 1, got {label}")
        for x0, y0, x1, y1 in self.boxes:
            if not (0 <= x0 <= x1 <= resolution and 0 <= y0 <= y1 <= resolution):
                raise InputError(f"box ({x0}, {y0}, {x1}, {y1}) invalid for size {resolution}")


def interpolate_pos_embed(pos_grid: torch.Tensor, target: int) -> torch.Tensor:
    """Bilinearly resample a (Gb, Gb, D) positional grid to (target, target, D).

    Corner-aligned; the identity case returns the input unchanged.
    """
    gb = pos_grid.shape[0]
    if gb == target:
        return pos_grid
    grid = pos_grid.permute(2, 0, 1).unsqueeze(0)  # 1,D,Gb,Gb
    if gb == 1:
        return pos_grid.expand(target, target, -1).contiguous()
    out = F.interpolate(grid, size=(target, target), mode="bilinear", align_corners=True)
    return out.squeeze(0).permute(1, 2, 0).contiguous()


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, out: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out or dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Attention(nn.Module):
    """Multi-head attention over token sequences (self- or cross-attention)."""

    def __init__(self, dim: int, num_heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigError("attention dim must be divisible by num_heads")
        self.num_heads = num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim or dim, dim)
        self.v = nn.Linear(kv_dim or dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, q, k=None, v=None):
        k = q if k is None else k
        v = k if v is None else v
        b, nq, d = q.shape
        h = self.num_heads
        qh = self.q(q).view(b, nq, h, d // h).transpose(1, 2)
        kh = self.k(k).view(b, k.shape[1], h, d // h).transpose(1, 2)
        vh = self.v(v).view(b, v.shape[1], h, d // h).transpose(1, 2)
        out = F.scaled_dot_product_attention(qh, kh, vh)
        out = out.transpose(1, 2).reshape(b, nq, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    """Pre-norm ViT block; shared by the backbone and the alignment head."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class Backbone(nn.Module):
    """Patchify + positional embedding + transformer stack -> patch features."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(
            cfg.in_channels, cfg.embed_dim, kernel_size=cfg.patch_size, stride=cfg.patch_size
        )
        self.pos_embed = nn.Parameter(
            torch.zeros(cfg.base_grid, cfg.base_grid, cfg.embed_dim)
        )
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio)
            for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """image (B,C,H,W) -> patch features (B,G,G,D)."""
        b, c, h, w = image.shape
        if h != w:
            raise InputError(f"image must be square, got {h}x{w}")
        if h % self.cfg.patch_size != 0:
            raise InputError(
                f"resolution {h} not divisible by patch size {self.cfg.patch_size}"
            )
        g = h // self.cfg.patch_size
        x = self.patch_embed(image)  # B,D,G,G
        x = x.permute(0, 2, 3, 1)  # B,G,G,D
        x = x + interpolate_pos_embed(self.pos_embed, g).to(x.dtype)
        x = x.reshape(b, g * g, -1)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        return x.reshape(b, g, g, -1)


class ClipHead(nn.Module):
    """Alignment head: k transformer layers, max-pool, layernorm, MLP projection.

    The layernorm + projection are shared between the pooled path and the
    per-patch path, so patch embeddings live in the same space as the pooled
    image embedding.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio)
            for _ in range(cfg.clip_head_depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)
        h = cfg.clip_proj_hidden
        self.proj = nn.Sequential(
            nn.Linear(cfg.embed_dim, h),
            nn.GELU(),
            nn.Linear(h, h),
            nn.GELU(),
            nn.Linear(h, cfg.text_embed_dim),
        )

    def forward(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """feats (B,G,G,D) -> (patch_embeds (B,G,G,E), pooled (B,E) unit-norm)."""
        b, g, g2, d = feats.shape
        x = feats.reshape(b, g * g2, d)
        for blk in self.blocks:
            x = blk(x)
        pooled = self.proj(self.norm(x.max(dim=1).values))
        pooled = F.normalize(pooled, dim=-1)
        patch = self.proj(self.norm(x)).reshape(b, g, g2, -1)
        return patch, pooled


class RandomFourierPE(nn.Module):
    """Frozen random-Fourier positional encoding of [0,1]^2 coordinates."""

    def __init__(self, dim: int, seed: int, scale: float = 1.0):
        super().__init__()
        rng = np.random.default_rng(seed)
        mat = rng.normal(0.0, scale, size=(2, dim // 2)).astype(np.float32)
        self.register_buffer("freqs", torch.from_numpy(mat))

    def encode(self, coords: torch.Tensor) -> torch.Tensor:
        """coords (..., 2) in [0,1] -> (..., dim)."""
        proj = (2 * math.pi) * coords.to(self.freqs.dtype) @ self.freqs
        return torch.cat([proj.sin(), proj.cos()], dim=-1)

    def grid(self, g: int) -> torch.Tensor:
        """(g, g, dim) encoding of cell centers."""
        centers = (torch.arange(g, dtype=self.freqs.dtype) + 0.5) / g
        yy, xx = torch.meshgrid(centers, centers, indexing="ij")
        return self.encode(torch.stack([xx, yy], dim=-1))


class LayerNorm2d(nn.Module):
    """Channel-wise layernorm for (B,C,H,W) maps."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + 1e-6)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


# sparse token types: bg point, fg point, box top-left corner, box bottom-right
NUM_PROMPT_TYPES = 4
BOX_TL, BOX_BR = 2, 3


class PromptEncoder(nn.Module):
    """Geometric prompts -> sparse tokens and a dense grid embedding."""

    def __init__(self, cfg: ModelConfig, pe: RandomFourierPE):
        super().__init__()
        self.cfg = cfg
        self.pe = pe
        self.type_embed = nn.Embedding(NUM_PROMPT_TYPES, cfg.embed_dim)
        self.no_mask_embed = nn.Embedding(1, cfg.embed_dim)
        chans = min(16, cfg.embed_dim)
        self.mask_downscale = nn.Sequential(
            nn.Conv2d(1, chans // 2, kernel_size=2, stride=2),
            LayerNorm2d(chans // 2),
            nn.GELU(),
            nn.Conv2d(chans // 2, chans, kernel_size=2, stride=2),
            LayerNorm2d(chans),
            nn.GELU(),
            nn.Conv2d(chans, cfg.embed_dim, kernel_size=1),
        )

    def forward(
        self, prompt: GeometricPrompt, resolution: int
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode one prompt at a given image resolution.

        Returns sparse tokens (T, D) — one per point, two per box — and a
        dense embedding (G, G, D) from the mask prior (or the learned
        no-mask embedding broadcast when absent).
        """
        prompt.validate(resolution)
        dtype = self.type_embed.weight.dtype
        g = resolution // self.cfg.patch_size
        tokens = []
        for x, y, label in prompt.points:
            coord = torch.tensor([x / resolution, y / resolution], dtype=dtype)
            tokens.append(self.pe.encode(coord) + self.type_embed.weight[label])
        for x0, y0, x1, y1 in prompt.boxes:
            tl = torch.tensor([x0 / resolution, y0 / resolution], dtype=dtype)
            br = torch.tensor([x1 / resolution, y1 / resolution], dtype=dtype)
            tokens.append(self.pe.encode(tl) + self.type_embed.weight[BOX_TL])
            tokens.append(self.pe.encode(br) + self.type_embed.weight[BOX_BR])
        sparse = (
            torch.stack(tokens)
            if tokens
            else torch.zeros(0, self.cfg.embed_dim, dtype=dtype)
        )
        if prompt.mask_prior is None:
            dense = self.no_mask_embed.weight.reshape(1, 1, -1).expand(g, g, -1)
        else:
            prior = torch.as_tensor(prompt.mask_prior, dtype=dtype)
            if prior.shape != (4 * g, 4 * g):
                raise InputError(
                    f"mask prior must be {4 * g}x{4 * g} for resolution {resolution}, "
                    f"got {tuple(prior.shape)}"
                )
            dense = self.mask_downscale(prior[None, None]).squeeze(0).permute(1, 2, 0)
        return sparse, dense.contiguous()


class TwoWayBlock(nn.Module):
    """Token self-attention plus bidirectional token<->image cross-attention."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.self_attn = Attention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_t2i = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.norm3 = nn.LayerNorm(dim)
        self.cross_i2t = Attention(dim, num_heads)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens, image, image_pe):
        tokens = self.norm1(tokens + self.self_attn(tokens))
        tokens = self.norm2(tokens + self.cross_t2i(tokens, image + image_pe, image))
        tokens = self.norm3(tokens + self.mlp(tokens))
        image = self.norm4(image + self.cross_i2t(image + image_pe, tokens, tokens))
        return tokens, image


class MaskDecoder(nn.Module):
    """Two-way cross-attention rounds + transposed-conv upsampling.

    Emits a single mask at 4x the patch grid; no mask-quality token.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.mask_token = nn.Parameter(torch.zeros(1, d))
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        self.blocks = nn.ModuleList(
            TwoWayBlock(d, cfg.decoder_heads, cfg.decoder_mlp_ratio)
            for _ in range(cfg.decoder_rounds)
        )
        self.final_t2i = Attention(d, cfg.decoder_heads)
        self.final_norm = nn.LayerNorm(d)
        up = max(d // 4, 1)
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(d, max(d // 2, 1), kernel_size=2, stride=2),
            LayerNorm2d(max(d // 2, 1)),
            nn.GELU(),
            nn.ConvTranspose2d(max(d // 2, 1), up, kernel_size=2, stride=2),
            nn.GELU(),
        )
        self.hyper = Mlp(d, d, up)

    def forward(
        self,
        feats: torch.Tensor,
        sparse: torch.Tensor,
        dense: torch.Tensor,
        image_pe: torch.Tensor,
    ) -> torch.Tensor:
        """feats (B,G,G,D), sparse (B,T,D), dense (B,G,G,D) -> logits (B,4G,4G)."""
        b, g, _, d = feats.shape
        image = (feats + dense).reshape(b, g * g, d)
        pe = image_pe.reshape(1, g * g, d).to(feats.dtype).expand(b, -1, -1)
        tokens = torch.cat(
            [self.mask_token.to(feats.dtype).unsqueeze(0).expand(b, -1, -1), sparse], dim=1
        )
        for blk in self.blocks:
            tokens, image = blk(tokens, image, pe)
        tokens = self.final_norm(tokens + self.final_t2i(tokens, image + pe, image))
        mask_embed = self.hyper(tokens[:, 0])  # B,up
        maps = image.reshape(b, g, g, d).permute(0, 3, 1, 2)
        up = self.upscale(maps)  # B,up,4G,4G
        logits = torch.einsum("bc,bchw->bhw", mask_embed, up)
        return logits


def build_text_table(cfg: ModelConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Frozen class-embedding table: K orthonormal class rows plus a
    background row, and a bank of fixed template perturbations.

    Deterministic in cfg.text_seed alone, so teachers, students and
    evaluations all share the identical table.
    """
    k, e = cfg.num_classes, cfg.text_embed_dim
    if k + 1 > e:
        raise ConfigError(f"need text_embed_dim >= num_classes + 1, got {e} < {k + 1}")
    rng = np.random.default_rng(cfg.text_seed)
    raw = rng.normal(size=(e, k + 1))
    q, r = np.linalg.qr(raw)
    q = q * np.sign(np.diag(r))  # fix QR sign ambiguity
    base = np.ascontiguousarray(q.T, dtype=np.float32)  # (K+1, E) orthonormal rows
    templates = rng.normal(size=(cfg.num_templates, e)).astype(np.float32)
    return torch.from_numpy(base), torch.from_numpy(templates)


class TextTable(nn.Module):
    """Frozen surrogate for the text encoder: class id -> unit embedding.

    Rows 0..K-1 are the shape classes; row K is a background embedding used
    only by dense prediction class sets. Buffers only — never trainable.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        base, templates = build_text_table(cfg)
        self.register_buffer("base", base)
        self.register_buffer("templates", templates)
        self.template_scale = cfg.template_scale

    @property
    def num_classes(self) -> int:
        return self.base.shape[0] - 1

    @property
    def background_id(self) -> int:
        return self.num_classes

    def class_embedding(self, class_id: int, templates: bool = True) -> torch.Tensor:
        """Unit-norm embedding; template-averaged variant mirrors prompt
        ensembling, the raw row is the training target."""
        row = self.base[class_id]
        if not templates:
            return row
        variants = F.normalize(row.unsqueeze(0) + self.template_scale * self.templates, dim=-1)
        return F.normalize(variants.mean(dim=0), dim=-1)

    def embeddings(self, class_ids, templates: bool = True) -> torch.Tensor:
        return torch.stack([self.class_embedding(i, templates) for i in class_ids])


class MergedModel(nn.Module):
    """Shared backbone + alignment head + prompt encoder + mask decoder.

    Forward passes are read-only; ``backbone_forward`` counts invocations so
    single-pass pipelines can be asserted.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.clip_head = ClipHead(cfg)
        self.pe = RandomFourierPE(cfg.embed_dim, seed=cfg.text_seed + 1)
        self.prompt_encoder = PromptEncoder(cfg, self.pe)
        self.mask_decoder = MaskDecoder(cfg)
        self.text_table = TextTable(cfg)
        self.forward_counter = 0

    # --- core ops -------------------------------------------------------

    def backbone_forward(self, image: torch.Tensor) -> torch.Tensor:
        """(B,C,H,W) or (C,H,W) -> (B,G,G,D) or (G,G,D) patch features."""
        single = image.dim() == 3
        if single:
            image = image.unsqueeze(0)
        self.forward_counter += 1
        feats = self.backbone(image)
        return feats.squeeze(0) if single else feats

    def clip_head_forward(self, feats: torch.Tensor):
        """Patch features -> (patch_embeds, pooled unit-norm embedding)."""
        single = feats.dim() == 3
        if single:
            feats = feats.unsqueeze(0)
        patch, pooled = self.clip_head(feats)
        if single:
            return patch.squeeze(0), pooled.squeeze(0)
        return patch, pooled

    def prompt_encode(self, prompt: GeometricPrompt, resolution: int):
        return self.prompt_encoder(prompt, resolution)

    def mask_decode(
        self, feats: torch.Tensor, sparse: torch.Tensor, dense: torch.Tensor
    ) -> torch.Tensor:
        """Patch features + prompt embeddings -> mask logits at 4x patch grid."""
        single = feats.dim() == 3
        if single:
            feats, sparse, dense = feats.unsqueeze(0), sparse.unsqueeze(0), dense.unsqueeze(0)
        if feats.shape[1:3] != dense.shape[1:3]:
            raise InputError(
                f"feats grid {tuple(feats.shape[1:3])} != dense grid {tuple(dense.shape[1:3])}"
            )
        image_pe = self.pe.grid(feats.shape[1])
        logits = self.mask_decoder(feats, sparse, dense, image_pe)
        return logits.squeeze(0) if single else logits

    def embed_image(self, image: torch.Tensor) -> torch.Tensor:
        """Image -> pooled unit-norm embedding (one backbone pass)."""
        feats = self.backbone_forward(image)
        return self.clip_head_forward(feats)[1]

    def predict_mask(self, image: torch.Tensor, prompt: GeometricPrompt) -> torch.Tensor:
        """Image + prompt -> mask logits at 4x patch grid (single image)."""
        resolution = image.shape[-1]
        feats = self.backbone_forward(image)
        sparse, dense = self.prompt_encode(prompt, resolution)
        if feats.dim() == 4:
            feats = feats.squeeze(0)
        return self.mask_decode(feats, sparse, dense)

    # --- parameter groups -------------------------------------------------

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "backbone": list(self.backbone.parameters()),
            "clip_head": list(self.clip_head.parameters()),
            "prompt_encoder": list(self.prompt_encoder.parameters()),
            "mask_decoder": list(self.mask_decoder.parameters()),
        }


def init_clip_head_from_backbone(model: MergedModel, seed: int = 0) -> MergedModel:
    """Copy the last backbone layer's weights into every alignment-head layer.

    The projection MLP is re-initialized from ``seed``; the backbone itself is
    untouched. Head layers must be shape-compatible with backbone layers.
    """
    last = model.backbone.blocks[-1]
    src = last.state_dict()
    for blk in model.clip_head.blocks:
        dst = blk.state_dict()
        for name, tensor in src.items():
            if name not in dst or dst[name].shape != tensor.shape:
                raise ConfigError(f"head layer incompatible with backbone layer at {name}")
        blk.load_state_dict({k: v.clone() for k, v in src.items()})
    gen = torch.Generator().manual_seed(seed)
    for mod in model.clip_head.proj:
        if isinstance(mod, nn.Linear):
            nn.init.trunc_normal_(mod.weight, std=0.02, generator=gen)
            nn.init.zeros_(mod.bias)
    model.clip_head.norm.reset_parameters()
    return model


def state_bytes(module: nn.Module, prefix: str = "") -> bytes:
    """Concatenated little-endian bytes of a module's state, for freeze asserts."""
    chunks = []
    for name, tensor in sorted(module.state_dict().items()):
        if prefix and not name.startswith(prefix):
            continue
        chunks.append(name.encode())
        chunks.append(tensor.detach().cpu().contiguous().numpy().tobytes())
    return b"".join(chunks)
