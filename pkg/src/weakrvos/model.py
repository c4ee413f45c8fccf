"""Network: toy visual/language encoders, cross-modal attention in both directions,
language-guided dynamic filters, FPN fusion, the pixel-embedding head, and the
dynamic 1x1-convolution segmentation head.

Segmentation works by generating a small stack of 1x1 conv weights from the
language features of a frame and sliding it over that frame's (or, during
training, another frame's) enhanced visual features. All parameters are
initialized from a seeded generator so runs are exactly reproducible.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DataError

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64                      # C, shared by both modalities
    encoder_channels: Optional[tuple[int, int, int, int]] = None  # strides 4/8/16/32
    n_attn_heads: int = 4
    filter_layers: int = 3
    filter_hidden: int = 8
    blcl_dim: int = 32                       # D, pixel-embedding width
    fpn_out_channels: int = 32
    enh_channels: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.encoder_channels is None:
            self.encoder_channels = (32, 64, 128, self.embed_dim)
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        if len(self.encoder_channels) != 4:
            raise DataError("encoder_channels must list 4 stage widths")
        if self.encoder_channels[-1] != self.embed_dim:
            raise DataError("deepest encoder stage must match embed_dim so visual "
                            "tokens and word features share a width")
        if self.embed_dim % self.n_attn_heads != 0:
            raise DataError(f"embed_dim {self.embed_dim} not divisible by "
                            f"n_attn_heads {self.n_attn_heads}")
        if self.filter_layers < 1:
            raise DataError("filter_layers must be >= 1")
        if self.vocab_size < 1:
            raise DataError("vocab_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "embed_dim": self.embed_dim,
            "encoder_channels": list(self.encoder_channels),
            "n_attn_heads": self.n_attn_heads, "filter_layers": self.filter_layers,
            "filter_hidden": self.filter_hidden, "blcl_dim": self.blcl_dim,
            "fpn_out_channels": self.fpn_out_channels,
            "enh_channels": self.enh_channels, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("encoder_channels") is not None:
            d["encoder_channels"] = tuple(d["encoder_channels"])
        return cls(**d)


@dataclass
class LanguageFeatures:
    word_feats: torch.Tensor     # [L, C]
    sentence_feat: torch.Tensor  # [C]


@dataclass
class FeatureBundle:
    """Everything the pipeline produces for one frame."""

    f1: torch.Tensor             # [c1, H/4,  W/4]
    f2: torch.Tensor             # [c2, H/8,  W/8]
    f3: torch.Tensor             # [c3, H/16, W/16]
    f4: torch.Tensor             # [C,  H/32, W/32]
    f_hat: torch.Tensor          # language-aware stride-32 grid [C, H/32, W/32]
    r_hat: torch.Tensor          # vision-aware word features [L, C]
    f_fpn: torch.Tensor          # fused stride-4 grid [fpn_out, H/4, W/4]
    h: torch.Tensor              # pixel embeddings [D, H/4, W/4]
    f_enh: torch.Tensor          # segmentation features [enh, H/4, W/4]


@dataclass
class ClipForward:
    bundles: list[FeatureBundle]
    language: LanguageFeatures
    r_s_proj: torch.Tensor       # sentence feature projected to D
    filters: torch.Tensor        # [T, P]
    logits: torch.Tensor         # own-frame mask logits [T, H/4, W/4]


# ---------------------------------------------------------------------------
# dynamic filter plumbing

def filter_layer_dims(in_channels: int, hidden: int, layers: int) -> list[tuple[int, int]]:
    """(in, out) widths of each 1x1 conv in the dynamic stack, ending in 1 channel."""
    if layers == 1:
        return [(in_channels, 1)]
    dims = [(in_channels, hidden)]
    dims += [(hidden, hidden)] * (layers - 2)
    dims.append((hidden, 1))
    return dims


def filter_param_count(in_channels: int, hidden: int, layers: int) -> int:
    return sum(i * o + o for i, o in filter_layer_dims(in_channels, hidden, layers))


def split_filter(filt: torch.Tensor,
                 dims: Sequence[tuple[int, int]]) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Slice a flat parameter vector into (weight [out,in], bias [out]) pairs."""
    expected = sum(i * o + o for i, o in dims)
    if filt.numel() != expected:
        raise ValueError(f"filter has {filt.numel()} params, layout needs {expected}")
    layers, ofs = [], 0
    for i, o in dims:
        w = filt[ofs:ofs + i * o].reshape(o, i)
        ofs += i * o
        b = filt[ofs:ofs + o]
        ofs += o
        layers.append((w, b))
    return layers


def segment(feat: torch.Tensor, filt: torch.Tensor,
            dims: Sequence[tuple[int, int]]) -> torch.Tensor:
    """Apply a dynamic 1x1 conv stack to a [C, h, w] grid; returns [h, w] logits.

    The filter may come from any frame: applying frame tau's filter to frame t's
    features is the cross-frame prediction used by the cross-frame loss.
    """
    c, h, w = feat.shape
    if c != dims[0][0]:
        raise ValueError(f"feature width {c} does not match filter input width {dims[0][0]}")
    x = feat.reshape(c, h * w)
    layers = split_filter(filt, dims)
    for idx, (wgt, bias) in enumerate(layers):
        x = wgt @ x + bias[:, None]
        if idx < len(layers) - 1:
            x = F.gelu(x)
    return x.reshape(h, w)


# ---------------------------------------------------------------------------
# modules

class CrossAttention(nn.Module):
    """x + multihead(softmax(f_q(x) f_k(y)^T / sqrt(C)) f_v(y)).

    Scale is 1/sqrt(C) over the full width (not per-head). No output projection,
    so a zeroed value projection gives exact pass-through of the queries.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.dim, self.heads = dim, heads
        self.head_dim = dim // heads
        self.fq = nn.Linear(dim, dim)
        self.fk = nn.Linear(dim, dim)
        self.fv = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        n, m = x.shape[0], y.shape[0]
        q = self.fq(x).reshape(n, self.heads, self.head_dim).transpose(0, 1)
        k = self.fk(y).reshape(m, self.heads, self.head_dim).transpose(0, 1)
        v = self.fv(y).reshape(m, self.heads, self.head_dim).transpose(0, 1)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.dim), dim=-1)
        out = (attn @ v).transpose(0, 1).reshape(n, self.dim)
        return x + out


class VisualEncoder(nn.Module):
    """Four strided conv stages producing grids at strides 4/8/16/32."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        stages, in_ch = [], 3
        for i, ch in enumerate(cfg.encoder_channels):
            stride, k, pad = (4, 5, 2) if i == 0 else (2, 3, 1)
            stages.append(nn.Sequential(
                nn.Conv2d(in_ch, ch, k, stride=stride, padding=pad),
                nn.GELU(),
                nn.Conv2d(ch, ch, 3, padding=1),
                nn.GELU(),
            ))
            in_ch = ch
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.shape[-2] % 32 or x.shape[-1] % 32:
            raise DataError(f"input spatial size {tuple(x.shape[-2:])} "
                            "must be divisible by 32")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class LanguageEncoder(nn.Module):
    """Embedding table + one residual self-attention block + learned softmax pooling."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.vocab_size = cfg.vocab_size
        self.embed = nn.Embedding(cfg.vocab_size, cfg.embed_dim)
        self.self_attn = CrossAttention(cfg.embed_dim, cfg.n_attn_heads)
        self.pool_score = nn.Linear(cfg.embed_dim, 1)

    def forward(self, tokens: torch.Tensor) -> LanguageFeatures:
        if tokens.numel() == 0:
            raise DataError("empty token sequence")
        if int(tokens.min()) < 0 or int(tokens.max()) >= self.vocab_size:
            raise DataError(f"token id out of range for vocabulary of size "
                            f"{self.vocab_size}: {tokens.tolist()}")
        w = self.embed(tokens)
        w = self.self_attn(w, w)
        scores = torch.softmax(self.pool_score(w).squeeze(-1), dim=0)
        return LanguageFeatures(word_feats=w, sentence_feat=scores @ w)


class DynamicFilterGenerator(nn.Module):
    """Softmax-weighted word fusion into the sentence feature, then an MLP that
    emits the flat dynamic-filter parameter vector."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.weight_score = nn.Linear(cfg.embed_dim, 1)
        n_params = filter_param_count(cfg.enh_channels, cfg.filter_hidden,
                                      cfg.filter_layers)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.embed_dim, cfg.embed_dim),
            nn.GELU(),
            nn.Linear(cfg.embed_dim, n_params),
        )

    def word_weights(self, r_hat: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.weight_score(r_hat).squeeze(-1), dim=0)

    def forward(self, r_hat: torch.Tensor, r_s: torch.Tensor) -> torch.Tensor:
        lam = self.word_weights(r_hat)
        fused = r_s + lam @ r_hat
        return self.mlp(fused)


class FpnFuse(nn.Module):
    """Top-down pathway: lateral 1x1 projections, 2x nearest upsampling, adds,
    and a final 3x3 smoothing conv; all linear so zero inputs give zero output."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2, c3, _ = cfg.encoder_channels
        out = cfg.fpn_out_channels
        self.lateral_top = nn.Conv2d(cfg.embed_dim, out, 1)
        self.lateral3 = nn.Conv2d(c3, out, 1)
        self.lateral2 = nn.Conv2d(c2, out, 1)
        self.lateral1 = nn.Conv2d(c1, out, 1)
        self.smooth = nn.Conv2d(out, out, 3, padding=1)

    def forward(self, f_hat: torch.Tensor, f1: torch.Tensor, f2: torch.Tensor,
                f3: torch.Tensor) -> torch.Tensor:
        def up2(x):
            return F.interpolate(x.unsqueeze(0), scale_factor=2, mode="nearest").squeeze(0)

        x = self.lateral_top(f_hat.unsqueeze(0)).squeeze(0)
        x = up2(x) + self.lateral3(f3.unsqueeze(0)).squeeze(0)
        x = up2(x) + self.lateral2(f2.unsqueeze(0)).squeeze(0)
        x = up2(x) + self.lateral1(f1.unsqueeze(0)).squeeze(0)
        return self.smooth(x.unsqueeze(0)).squeeze(0)


class BlclHead(nn.Module):
    """Two 3x3 convs mapping fused features to the D-dim pixel embedding grid."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.conv1 = nn.Conv2d(cfg.fpn_out_channels, cfg.blcl_dim, 3, padding=1)
        self.conv2 = nn.Conv2d(cfg.blcl_dim, cfg.blcl_dim, 3, padding=1)

    def forward(self, f_fpn: torch.Tensor) -> torch.Tensor:
        x = F.gelu(self.conv1(f_fpn.unsqueeze(0)))
        return self.conv2(x).squeeze(0)


class EnhanceHead(nn.Module):
    """conv(F_fpn) concatenated with the pixel embeddings, then two convs back
    down to enh_channels."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        out = cfg.fpn_out_channels
        self.pre = nn.Conv2d(out, out, 3, padding=1)
        self.reduce1 = nn.Conv2d(out + cfg.blcl_dim, cfg.enh_channels, 3, padding=1)
        self.reduce2 = nn.Conv2d(cfg.enh_channels, cfg.enh_channels, 3, padding=1)

    def forward(self, f_fpn: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        x = F.gelu(self.pre(f_fpn.unsqueeze(0)))
        x = torch.cat([x, h.unsqueeze(0)], dim=1)
        x = F.gelu(self.reduce1(x))
        return self.reduce2(x).squeeze(0)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Seeded uniform fan-in init for weights, zeros for biases/1-d params."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in module.named_parameters():
            if p.dim() >= 2:
                fan_in = p.shape[1] * math.prod(p.shape[2:])
                bound = 1.0 / math.sqrt(fan_in)
                p.uniform_(-bound, bound, generator=gen)
            else:
                p.zero_()


class RvosNet(nn.Module):
    """The full per-frame pipeline with shared parameters across frames."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.visual = VisualEncoder(cfg)
        self.language = LanguageEncoder(cfg)
        self.l2v = CrossAttention(cfg.embed_dim, cfg.n_attn_heads)
        self.v2l = CrossAttention(cfg.embed_dim, cfg.n_attn_heads)
        self.filter_gen = DynamicFilterGenerator(cfg)
        self.fpn = FpnFuse(cfg)
        self.embed_head = BlclHead(cfg)
        self.enhance_head = EnhanceHead(cfg)
        self.lv_proj = nn.Linear(cfg.embed_dim, cfg.blcl_dim)
        self.filter_dims = filter_layer_dims(cfg.enh_channels, cfg.filter_hidden,
                                             cfg.filter_layers)
        init_parameters(self, cfg.seed)

    # -- per-op entry points ------------------------------------------------

    def encode_visual(self, frames: torch.Tensor) -> list[torch.Tensor]:
        """[3,H,W] -> list of [c,h,w]; [T,3,H,W] -> list of [T,c,h,w]."""
        single = frames.dim() == 3
        x = frames.unsqueeze(0) if single else frames
        feats = self.visual(x)
        return [f.squeeze(0) if single else f for f in feats]

    def encode_language(self, tokens: Union[Sequence[int], torch.Tensor]) -> LanguageFeatures:
        if not torch.is_tensor(tokens):
            tokens = torch.as_tensor(list(tokens), dtype=torch.long)
        return self.language(tokens)

    def l2v_attention(self, f_tokens: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
        return self.l2v(f_tokens, r)

    def v2l_attention(self, r: torch.Tensor, f_tokens: torch.Tensor) -> torch.Tensor:
        return self.v2l(r, f_tokens)

    def make_dynamic_filter(self, r_hat: torch.Tensor, r_s: torch.Tensor) -> torch.Tensor:
        return self.filter_gen(r_hat, r_s)

    def fpn_fuse(self, f_hat, f1, f2, f3) -> torch.Tensor:
        return self.fpn(f_hat, f1, f2, f3)

    def blcl_head(self, f_fpn: torch.Tensor) -> torch.Tensor:
        return self.embed_head(f_fpn)

    def enhance(self, f_fpn: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        return self.enhance_head(f_fpn, h)

    def segment(self, feat: torch.Tensor, filt: torch.Tensor) -> torch.Tensor:
        return segment(feat, filt, self.filter_dims)

    # -- pipeline -----------------------------------------------------------

    def forward_frame(self, f1, f2, f3, f4,
                      lang: LanguageFeatures) -> tuple[FeatureBundle, torch.Tensor]:
        c, h32, w32 = f4.shape
        f_tokens = f4.reshape(c, h32 * w32).T               # [HW, C]
        f_hat = self.l2v(f_tokens, lang.word_feats).T.reshape(c, h32, w32)
        r_hat = self.v2l(lang.word_feats, f_tokens)
        f_fpn = self.fpn(f_hat, f1, f2, f3)
        emb = self.embed_head(f_fpn)
        f_enh = self.enhance_head(f_fpn, emb)
        filt = self.filter_gen(r_hat, lang.sentence_feat)
        bundle = FeatureBundle(f1=f1, f2=f2, f3=f3, f4=f4, f_hat=f_hat,
                               r_hat=r_hat, f_fpn=f_fpn, h=emb, f_enh=f_enh)
        return bundle, filt

    def forward_clip(self, frames: torch.Tensor,
                     tokens: Union[Sequence[int], torch.Tensor]) -> ClipForward:
        lang = self.encode_language(tokens)
        feats = self.visual(frames)
        bundles, filters, logits = [], [], []
        for t in range(frames.shape[0]):
            bundle, filt = self.forward_frame(feats[0][t], feats[1][t],
                                              feats[2][t], feats[3][t], lang)
            bundles.append(bundle)
            filters.append(filt)
            logits.append(segment(bundle.f_enh, filt, self.filter_dims))
        return ClipForward(
            bundles=bundles, language=lang,
            r_s_proj=self.lv_proj(lang.sentence_feat),
            filters=torch.stack(filters), logits=torch.stack(logits),
        )


# ---------------------------------------------------------------------------
# checkpoints: a versioned JSON map, byte-stable for identical parameters

def encode_array(t: torch.Tensor) -> dict:
    arr = t.detach().cpu().contiguous().to(torch.float32).numpy()
    return {"shape": list(arr.shape),
            "data": base64.b64encode(arr.astype("<f4").tobytes()).decode("ascii")}


def decode_array(d: dict) -> torch.Tensor:
    raw = base64.b64decode(d["data"])
    arr = np.frombuffer(raw, dtype="<f4").reshape(d["shape"]).copy()
    return torch.from_numpy(arr)


def save_checkpoint(net: RvosNet, path: Union[str, Path],
                    extra: Optional[dict] = None) -> Path:
    doc = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config": net.cfg.to_dict(),
        "params": {name: encode_array(p) for name, p in net.named_parameters()},
        "rng": {"seed": net.cfg.seed},
        "extra": extra if extra is not None else {},
    }
    path = Path(path)
    path.write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n",
                    encoding="utf-8")
    return path


def load_checkpoint(path: Union[str, Path]) -> tuple[RvosNet, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"checkpoint {path} is not valid JSON: {e}") from None
    if doc.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise DataError(f"checkpoint schema_version {doc.get('schema_version')} "
                        f"unsupported (expected {CHECKPOINT_SCHEMA_VERSION})")
    cfg = ModelConfig.from_dict(doc["config"])
    net = RvosNet(cfg)
    own = dict(net.named_parameters())
    saved = doc["params"]
    if set(own) != set(saved):
        missing = sorted(set(own) ^ set(saved))
        raise DataError(f"checkpoint parameter names do not match model: {missing}")
    with torch.no_grad():
        for name, p in own.items():
            t = decode_array(saved[name])
            if tuple(t.shape) != tuple(p.shape):
                raise DataError(f"checkpoint param {name} has shape {tuple(t.shape)}, "
                                f"model expects {tuple(p.shape)}")
            p.copy_(t)
    return net, doc.get("extra", {})
