"""Age-robust identity conditioning.

Three pieces feed the denoiser: a global identity embedding from a small
recognition encoder, age-suppressed facial tokens from a patch encoder with
mask-based token reweighting, and a stacked cross-attention fusion module
that merges both into a fixed set of identity tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (DimensionMismatchError, NoValidReferenceError,
                     UntrainedEncoderError)
from .seeds import derive_seed, np_rng
from . import synthlab


# ---------------------------------------------------------------------------
# domain types

@dataclass
class ReferenceEntry:
    image: np.ndarray       # (H,W,3) float in [0,1]
    organ_mask: np.ndarray  # (H,W) bool
    valid: bool = True


@dataclass
class ReferenceSet:
    entries: List[ReferenceEntry] = field(default_factory=list)

    def __post_init__(self):
        if len(self.entries) > 5:
            raise ValueError("a reference set holds at most 5 entries")

    def valid_entries(self) -> List[ReferenceEntry]:
        return [e for e in self.entries if e.valid]

    def require_valid(self) -> List[ReferenceEntry]:
        valid = self.valid_entries()
        if not valid:
            raise NoValidReferenceError("reference set has no valid entries")
        return valid


@dataclass
class PatchWeightMap:
    weights: np.ndarray      # (p,p) float64, unit mean
    beta: float
    pooled_mask: np.ndarray  # (p,p) float64 in [0,1]


@dataclass
class FacialTokens:
    tokens: torch.Tensor  # (p*p, d_v)
    n_refs_used: int


@dataclass
class FusedIdentityTokens:
    tokens: torch.Tensor  # (n, d_c)


# ---------------------------------------------------------------------------
# mask pooling and patch reweighting

def pool_mask(mask: np.ndarray, p: int) -> np.ndarray:
    """Max-pool a binary mask onto the p x p patch grid.

    The pooling kernel is the patch size (image side divided by p), so a
    grid cell is 1 exactly when its patch contains any mask pixel.
    """
    mask = np.asarray(mask)
    h, w = mask.shape
    if h % p != 0 or w % p != 0:
        raise DimensionMismatchError(f"mask side ({h},{w}) not divisible by grid {p}")
    kh, kw = h // p, w // p
    blocks = mask.reshape(p, kh, p, kw)
    return blocks.max(axis=(1, 3)).astype(np.float64)


def patch_weights(m: np.ndarray, beta: float) -> PatchWeightMap:
    """Linear gain on organ patches followed by unit-mean normalization."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    m = np.asarray(m, dtype=np.float64)
    if m.min() < 0.0 or m.max() > 1.0:
        raise ValueError("pooled mask values must lie in [0,1]")
    numerator = 1.0 + beta * m
    w = numerator / numerator.mean()
    # the algebra guarantees 1/(1+beta) <= w <= 1+beta; clip float dust
    w = np.clip(w, 1.0 / (1.0 + beta), 1.0 + beta)
    return PatchWeightMap(weights=w, beta=float(beta), pooled_mask=m)


def reweight_tokens(tokens: torch.Tensor, weights: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Scale token rows by their patch weights (tokens already carry positions)."""
    w = torch.as_tensor(np.asarray(weights).reshape(-1), dtype=tokens.dtype,
                        device=tokens.device)
    if tokens.shape[-2] != w.shape[0]:
        raise DimensionMismatchError(
            f"{tokens.shape[-2]} tokens vs {w.shape[0]} weights")
    return tokens * w.unsqueeze(-1)


# ---------------------------------------------------------------------------
# encoders

def _to_chw(image: np.ndarray | torch.Tensor) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        return image
    return torch.from_numpy(np.asarray(image, dtype=np.float32)).permute(2, 0, 1)


class IdentityEncoder(nn.Module):
    """Small convolutional recognition encoder emitting unit-norm embeddings."""

    def __init__(self, d_id: int = 64):
        super().__init__()
        self.d_id = d_id
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.GroupNorm(4, 16), nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.GroupNorm(8, 32), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.GroupNorm(8, 64), nn.SiLU(),
            nn.AdaptiveAvgPool2d(4),
        )
        self.head = nn.Linear(64 * 16, d_id)
        self.register_buffer("trained_steps", torch.zeros((), dtype=torch.long))

    @property
    def is_trained(self) -> bool:
        return int(self.trained_steps.item()) > 0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.net(x)
        e = self.head(h.flatten(1))
        return F.normalize(e, dim=-1)


def embed_identity(encoder: IdentityEncoder, image: np.ndarray,
                   allow_untrained: bool = False) -> np.ndarray:
    if not encoder.is_trained and not allow_untrained:
        raise UntrainedEncoderError("identity encoder has no trained weights")
    encoder.eval()
    with torch.no_grad():
        e = encoder(_to_chw(image).unsqueeze(0))
    return e.squeeze(0).numpy()


def aggregate_global(encoder: IdentityEncoder, refs: ReferenceSet,
                     allow_untrained: bool = False) -> np.ndarray:
    """Mean of valid reference embeddings, re-normalized to unit length."""
    valid = refs.require_valid()
    embs = [embed_identity(encoder, e.image, allow_untrained=allow_untrained)
            for e in valid]
    mean = np.mean(embs, axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        return mean  # degenerate cancellation; leave as zeros
    return mean / norm


class PatchEncoder(nn.Module):
    """ViT-style token mixer over a p x p patch grid.

    The facial tokens are read from the penultimate layer (the block before
    the final one), mirroring penultimate-feature extraction from large
    visual encoders.
    """

    def __init__(self, resolution: int = 32, p: int = 8, d_v: int = 32, n_blocks: int = 2):
        super().__init__()
        if resolution % p != 0:
            raise DimensionMismatchError(f"resolution {resolution} not divisible by p={p}")
        self.p = p
        self.resolution = resolution
        self.patch = resolution // p
        patch_dim = 3 * self.patch * self.patch
        self.proj = nn.Linear(patch_dim, d_v)
        self.pos = nn.Parameter(torch.zeros(p * p, d_v))
        self.blocks = nn.ModuleList()
        for _ in range(n_blocks):
            self.blocks.append(nn.ModuleDict({
                "norm1": nn.LayerNorm(d_v),
                "qkv": nn.Linear(d_v, 3 * d_v, bias=False),
                "attn_out": nn.Linear(d_v, d_v),
                "norm2": nn.LayerNorm(d_v),
                "mlp": nn.Sequential(nn.Linear(d_v, 4 * d_v), nn.SiLU(), nn.Linear(4 * d_v, d_v)),
            }))

    def patchify(self, image: np.ndarray | torch.Tensor) -> torch.Tensor:
        """(H,W,3) image -> (p*p, patch_dim) row-major patch tokens with positions."""
        x = _to_chw(image)
        c, h, w = x.shape
        k = self.patch
        t = x.reshape(c, self.p, k, self.p, k).permute(1, 3, 0, 2, 4)
        tokens = t.reshape(self.p * self.p, c * k * k)
        return self.proj(tokens) + self.pos

    def _block(self, blk, x: torch.Tensor) -> torch.Tensor:
        h = blk["norm1"](x)
        q, k, v = blk["qkv"](h).chunk(3, dim=-1)
        scale = q.shape[-1] ** -0.5
        attn = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
        x = x + blk["attn_out"](attn @ v)
        return x + blk["mlp"](blk["norm2"](x))

    def forward(self, tokens: torch.Tensor, penultimate: bool = True) -> torch.Tensor:
        depth = len(self.blocks) - 1 if penultimate else len(self.blocks)
        for blk in list(self.blocks)[:depth]:
            tokens = self._block(blk, tokens)
        return tokens


def encode_facial(patch_encoder: PatchEncoder, refs: ReferenceSet, beta: float,
                  use_mask: bool = True) -> FacialTokens:
    """Penultimate patch features, mask-reweighted, averaged over valid refs."""
    valid = refs.require_valid()
    acc = None
    for entry in valid:
        tokens = patch_encoder.patchify(entry.image)
        if use_mask:
            m = pool_mask(entry.organ_mask, patch_encoder.p)
            w = patch_weights(m, beta).weights
            tokens = reweight_tokens(tokens, w)
        feats = patch_encoder(tokens)
        acc = feats if acc is None else acc + feats
    return FacialTokens(tokens=acc / len(valid), n_refs_used=len(valid))


# ---------------------------------------------------------------------------
# fusion

class IDFusion(nn.Module):
    """Learnable queries attending to the global embedding then the facial
    tokens, stacked L times, projected to the denoiser token dimension."""

    def __init__(self, d_id: int = 64, d_v: int = 32, d_c: int = 64,
                 n_queries: int = 8, n_layers: int = 2,
                 use_global: bool = True, use_facial: bool = True):
        super().__init__()
        self.use_global = use_global
        self.use_facial = use_facial
        self.n_queries = n_queries
        self.d_c = d_c
        self.queries = nn.Parameter(torch.randn(n_queries, d_c) * 0.02)
        self.lift_global = nn.Linear(d_id, d_c)
        self.lift_facial = nn.Linear(d_v, d_c)
        self.layers = nn.ModuleList()
        for _ in range(n_layers):
            self.layers.append(nn.ModuleDict({
                "norm_g": nn.LayerNorm(d_c),
                "q_g": nn.Linear(d_c, d_c, bias=False),
                "k_g": nn.Linear(d_c, d_c, bias=False),
                "v_g": nn.Linear(d_c, d_c, bias=False),
                "o_g": nn.Linear(d_c, d_c),
                "norm_f": nn.LayerNorm(d_c),
                "q_f": nn.Linear(d_c, d_c, bias=False),
                "k_f": nn.Linear(d_c, d_c, bias=False),
                "v_f": nn.Linear(d_c, d_c, bias=False),
                "o_f": nn.Linear(d_c, d_c),
                "norm_ffn": nn.LayerNorm(d_c),
                "ffn": nn.Sequential(nn.Linear(d_c, 4 * d_c), nn.SiLU(), nn.Linear(4 * d_c, d_c)),
            }))
        self.proj_out = nn.Linear(d_c, d_c)

    @staticmethod
    def _attend(q, k, v):
        scale = q.shape[-1] ** -0.5
        attn = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
        return attn @ v

    def forward(self, f_global: torch.Tensor, f_facial: torch.Tensor | None,
                drop_facial: torch.Tensor | bool = False) -> torch.Tensor:
        """f_global: (B, d_id); f_facial: (B, p*p, d_v) or None.

        drop_facial: per-instance bool tensor (B,) or a scalar flag. Dropped
        instances take exactly zero contribution from the facial branch.
        """
        batch = f_global.shape[0]
        q = self.queries.unsqueeze(0).expand(batch, -1, -1)
        g_tok = self.lift_global(f_global).unsqueeze(1)  # (B,1,d_c)
        f_tok = self.lift_facial(f_facial) if (f_facial is not None and self.use_facial) else None
        if isinstance(drop_facial, bool):
            keep = torch.full((batch,), 0.0 if drop_facial else 1.0, dtype=q.dtype)
        else:
            keep = 1.0 - drop_facial.to(q.dtype)
        keep = keep.view(batch, 1, 1)
        for layer in self.layers:
            if self.use_global:
                h = layer["norm_g"](q)
                q = q + layer["o_g"](self._attend(layer["q_g"](h), layer["k_g"](g_tok), layer["v_g"](g_tok)))
            if f_tok is not None:
                h = layer["norm_f"](q)
                q = q + keep * layer["o_f"](self._attend(layer["q_f"](h), layer["k_f"](f_tok), layer["v_f"](f_tok)))
            q = q + layer["ffn"](layer["norm_ffn"](q))
        return self.proj_out(q)


def id_fusion(module: IDFusion, f_global: np.ndarray | torch.Tensor,
              f_facial: FacialTokens | None, drop_facial: bool = False) -> FusedIdentityTokens:
    module.eval()
    with torch.no_grad():
        g = torch.as_tensor(np.asarray(f_global), dtype=torch.float32).unsqueeze(0)
        f = f_facial.tokens.unsqueeze(0) if f_facial is not None else None
        out = module(g, f, drop_facial=drop_facial)
    return FusedIdentityTokens(tokens=out.squeeze(0))


# ---------------------------------------------------------------------------
# identity encoder training

class _CosineMarginHead(nn.Module):
    """Additive cosine-margin classifier over identity labels."""

    def __init__(self, d_id: int, n_classes: int, scale: float, margin: float):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_classes, d_id) * 0.05)
        self.scale = scale
        self.margin = margin

    def forward(self, emb: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        w = F.normalize(self.weight, dim=-1)
        cos = emb @ w.t()
        onehot = F.one_hot(labels, cos.shape[1]).to(cos.dtype)
        logits = self.scale * (cos - self.margin * onehot)
        return F.cross_entropy(logits, labels)


def _load_training_images(manifest: synthlab.DatasetManifest):
    images, degraded, labels, ages = [], [], [], []
    ids = sorted({r.identity_id for r in manifest.records})
    index = {i: k for k, i in enumerate(ids)}
    for r in manifest.records:
        images.append(synthlab.load_image(manifest.resolve(r.gt_path)))
        degraded.append(synthlab.load_image(manifest.resolve(r.degraded_path)))
        labels.append(index[r.identity_id])
        ages.append(r.age_years)
    return (np.stack(images), np.stack(degraded),
            np.asarray(labels), np.asarray(ages), ids)


def train_identity_encoder(manifest: synthlab.DatasetManifest, steps: int, seed: int,
                           d_id: int = 64, batch: int = 32, lr: float = 1e-3,
                           margin: float = 0.2, scale: float = 16.0,
                           augment_prob: float = 0.5) -> IdentityEncoder:
    """Train the recognition encoder with a margin-based metric objective.

    Images of one identity share a label across all ages, which forces the
    embedding to ignore age texture. Half the crops are swapped for their
    degraded counterparts for robustness to restoration artifacts.
    """
    images, degraded, labels, _, ids = _load_training_images(manifest)
    if len(ids) < 2:
        raise ValueError("identity encoder training needs >= 2 identities")
    torch.manual_seed(derive_seed(seed, "id-encoder-init"))
    encoder = IdentityEncoder(d_id=d_id)
    head = _CosineMarginHead(d_id, len(ids), scale=scale, margin=margin)
    opt = torch.optim.AdamW(list(encoder.parameters()) + list(head.parameters()), lr=lr)

    clean = torch.from_numpy(images).permute(0, 3, 1, 2)
    dirty = torch.from_numpy(degraded).permute(0, 3, 1, 2)
    labels_t = torch.from_numpy(labels)
    encoder.train()
    for step in range(steps):
        rng = np_rng(seed, "id-encoder-batch", step)
        idx = rng.integers(0, len(labels), size=min(batch, len(labels)))
        use_degraded = rng.random(len(idx)) < augment_prob
        x = torch.where(torch.from_numpy(use_degraded).view(-1, 1, 1, 1),
                        dirty[idx], clean[idx])
        loss = head(encoder(x), labels_t[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    encoder.trained_steps += steps
    encoder.eval()
    return encoder


def identity_separation(encoder: IdentityEncoder, manifest: synthlab.DatasetManifest,
                        allow_untrained: bool = False,
                        max_pairs: int = 2000, seed: int = 0) -> dict:
    """Same-identity cross-age vs different-identity cosine statistics."""
    images, _, labels, ages, _ = _load_training_images(manifest)
    encoder.eval()
    with torch.no_grad():
        if not encoder.is_trained and not allow_untrained:
            raise UntrainedEncoderError("identity encoder has no trained weights")
        embs = encoder(torch.from_numpy(images).permute(0, 3, 1, 2)).numpy()
    rng = np_rng(seed, "separation-pairs")
    same, diff = [], []
    n = len(labels)
    for _ in range(max_pairs):
        i, j = rng.integers(0, n, 2)
        if i == j:
            continue
        cos = float(embs[i] @ embs[j])
        if labels[i] == labels[j] and ages[i] != ages[j]:
            same.append(cos)
        elif labels[i] != labels[j]:
            diff.append(cos)
    same_mean = float(np.mean(same)) if same else float("nan")
    diff_mean = float(np.mean(diff)) if diff else float("nan")
    return {"same_identity_cross_age": same_mean,
            "different_identity": diff_mean,
            "separation": same_mean - diff_mean,
            "n_same": len(same), "n_diff": len(diff)}
