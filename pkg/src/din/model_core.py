"""Encoders, key/value fusion, the answer condition generator and the proto-answer classifier."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F

PAD, UNK = "<pad>", "<unk>"


class Tokenizer:
    """Lowercase whitespace tokenizer over a corpus-built vocabulary."""

    def __init__(self, words: Iterable[str]):
        self.itos = [PAD, UNK] + sorted(set(words) - {PAD, UNK})
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def from_questions(cls, questions: Iterable[str]):
        return cls(w for q in questions for w in q.lower().split())

    def __len__(self):
        return len(self.itos)

    @property
    def pad_id(self):
        return self.stoi[PAD]

    @property
    def unk_id(self):
        return self.stoi[UNK]

    def encode(self, question: str) -> list[int]:
        toks = question.lower().split()
        if not toks:
            raise ValueError("empty question")
        return [self.stoi.get(w, self.unk_id) for w in toks]

    def batch(self, questions: list[str]):
        ids = [self.encode(q) for q in questions]
        n = max(len(x) for x in ids)
        out = torch.full((len(ids), n), self.pad_id, dtype=torch.long)
        for i, x in enumerate(ids):
            out[i, : len(x)] = torch.tensor(x)
        return out, out == self.pad_id


def attention(q, k, v, heads=1, key_padding_mask=None):
    """Scaled dot-product attention on (B, n, d) tensors; mask is True at padded keys."""
    B, nq, d = q.shape
    nk = k.shape[1]
    dh = d // heads
    q = q.view(B, nq, heads, dh).transpose(1, 2)
    k = k.view(B, nk, heads, dh).transpose(1, 2)
    v = v.view(B, nk, heads, dh).transpose(1, 2)
    scores = q @ k.transpose(-2, -1) / math.sqrt(dh)
    if key_padding_mask is not None:
        scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
    out = scores.softmax(-1) @ v
    return out.transpose(1, 2).reshape(B, nq, d)


class SelfAttention(nn.Module):
    def __init__(self, d, heads=1):
        super().__init__()
        if d % heads:
            raise ValueError("width must be divisible by the head count")
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d, bias=False)
        self.out = nn.Linear(d, d, bias=False)

    def forward(self, x, key_padding_mask=None):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        return self.out(attention(q, k, v, self.heads, key_padding_mask))


class Block(nn.Module):
    """Pre-norm transformer block with bias-free projections (maps 0 to 0 at init)."""

    def __init__(self, d, heads=1, mlp_ratio=2):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(
            nn.Linear(d, mlp_ratio * d, bias=False), nn.GELU(), nn.Linear(mlp_ratio * d, d, bias=False)
        )

    def forward(self, x, key_padding_mask=None):
        x = x + self.attn(self.ln1(x), key_padding_mask)
        return x + self.mlp(self.ln2(x))


class VisionEncoder(nn.Module):
    def __init__(self, image_size=8, channels=1, patch=4, d=64, depth=2, heads=1, patch_bias=True):
        super().__init__()
        if image_size % patch:
            raise ValueError("image size must be a multiple of the patch size")
        self.image_size, self.channels, self.patch = image_size, channels, patch
        n = (image_size // patch) ** 2
        self.proj = nn.Linear(patch * patch * channels, d, bias=patch_bias)
        self.pos = nn.Parameter(torch.zeros(1, n, d))
        self.blocks = nn.ModuleList(Block(d, heads) for _ in range(depth))

    def patchify(self, images):
        """(B, H, W, C) -> (B, n_patches, p*p*C), row-major over the patch grid."""
        B, H, W, C = images.shape
        if (H, W, C) != (self.image_size, self.image_size, self.channels):
            raise ValueError(f"expected {self.image_size}x{self.image_size}x{self.channels} images, got {H}x{W}x{C}")
        p = self.patch
        x = images.reshape(B, H // p, p, W // p, p, C).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(B, (H // p) * (W // p), p * p * C)

    def forward(self, images):
        x = self.proj(self.patchify(images)) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return x


class TextEncoder(nn.Module):
    def __init__(self, vocab_size, d=64, depth=2, heads=1, max_len=32):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, d)
        self.pos = nn.Parameter(torch.zeros(1, max_len, d))
        self.blocks = nn.ModuleList(Block(d, heads) for _ in range(depth))

    def forward(self, token_ids, pad_mask=None):
        x = self.embed(token_ids) + self.pos[:, : token_ids.shape[1]]
        for blk in self.blocks:
            x = blk(x, pad_mask)
        return x


class KVFusion(nn.Module):
    """Concatenate image and question tokens, then project to keys and values."""

    def __init__(self, d, bias=False):
        super().__init__()
        self.key = nn.Linear(d, d, bias=bias)
        self.value = nn.Linear(d, d, bias=bias)

    def forward(self, fv, fq, q_mask=None):
        if fv.shape[-1] != fq.shape[-1]:
            raise ValueError("image and question features differ in width")
        x = torch.cat([fv, fq], dim=1)
        mask = None
        if q_mask is not None:
            mask = torch.cat([torch.zeros(fv.shape[:2], dtype=torch.bool, device=fv.device), q_mask], 1)
        return self.key(x), self.value(x), mask


@dataclass
class ConditionPack:
    f_fused: torch.Tensor  # (B, L, d)
    f_cond: torch.Tensor  # (B, L) logits
    cond_prob: torch.Tensor  # softmax(f_cond)


class AnswerConditionGenerator(nn.Module):
    """Learnable answer queries: self-attention, cross-attention to K/V, FFN, per-class readout."""

    def __init__(self, num_classes, d=64, heads=1, mlp_ratio=2):
        super().__init__()
        self.heads = heads
        self.answer_embed = nn.Parameter(torch.randn(num_classes, d) * 0.02)
        self.ln_self = nn.LayerNorm(d)
        self.self_attn = SelfAttention(d, heads)
        self.ln_cross = nn.LayerNorm(d)
        self.q_proj = nn.Linear(d, d, bias=False)
        self.out_proj = nn.Linear(d, d, bias=False)
        self.ln_ff = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, mlp_ratio * d), nn.GELU(), nn.Linear(mlp_ratio * d, d))
        # per-class reduction d -> 1
        self.readout_w = nn.Parameter(torch.randn(num_classes, d) / math.sqrt(d))
        self.readout_b = nn.Parameter(torch.zeros(num_classes))

    def queries(self, batch: int):
        e = self.answer_embed.unsqueeze(0).expand(batch, -1, -1)
        return e + self.self_attn(self.ln_self(e))

    def cross_attend(self, query, keys, values, mask=None):
        q = self.q_proj(self.ln_cross(query))
        return query + self.out_proj(attention(q, keys, values, self.heads, mask))

    def forward(self, keys, values, mask=None) -> ConditionPack:
        h = self.cross_attend(self.queries(keys.shape[0]), keys, values, mask)
        fused = h + self.ff(self.ln_ff(h))
        f_cond = (fused * self.readout_w).sum(-1) + self.readout_b
        if not torch.isfinite(f_cond).all():
            raise FloatingPointError("non-finite ACG activations")
        return ConditionPack(fused, f_cond, f_cond.softmax(-1))


@dataclass
class ProtoAnswer:
    logits: torch.Tensor
    probs: torch.Tensor

    @property
    def confidence(self):
        return self.probs.max(-1).values

    @property
    def arg(self):
        return self.probs.argmax(-1)


class ProtoClassifier(nn.Module):
    """One linear layer over the condition logits (or, optionally, the fused features)."""

    def __init__(self, num_classes, d=64, source="cond"):
        super().__init__()
        if source not in ("cond", "fused"):
            raise ValueError(f"unknown classifier source {source!r}")
        self.source = source
        if source == "cond":
            self.linear = nn.Linear(num_classes, num_classes)
            with torch.no_grad():
                self.linear.weight.copy_(torch.eye(num_classes))
                self.linear.bias.zero_()
        else:
            self.weight = nn.Parameter(torch.randn(num_classes, d) / math.sqrt(d))
            self.bias = nn.Parameter(torch.zeros(num_classes))

    def forward(self, cond: ConditionPack) -> ProtoAnswer:
        if self.source == "cond":
            logits = self.linear(cond.f_cond)
        else:
            logits = (cond.f_fused * self.weight).sum(-1) + self.bias
        return ProtoAnswer(logits, logits.softmax(-1))


def proto_classify(classifier: ProtoClassifier, cond: ConditionPack) -> ProtoAnswer:
    return classifier(cond)


class DiNModel(nn.Module):
    """Encoders + fusion + ACG + proto classifier + denoiser."""

    def __init__(self, num_classes, text_vocab_size, *, d=64, depth=2, heads=1, image_size=8,
                 channels=1, patch=4, denoiser_hidden=128, classifier_source="cond"):
        super().__init__()
        from .diffusion import Denoiser

        self.vision = VisionEncoder(image_size, channels, patch, d, depth, heads)
        self.text = TextEncoder(text_vocab_size, d, depth, heads)
        self.fusion = KVFusion(d)
        self.acg = AnswerConditionGenerator(num_classes, d, heads)
        self.classifier = ProtoClassifier(num_classes, d, classifier_source)
        self.denoiser = Denoiser(num_classes, denoiser_hidden)

    def condition(self, images, token_ids, pad_mask=None) -> ConditionPack:
        fv = self.vision(images)
        fq = self.text(token_ids, pad_mask)
        keys, values, mask = self.fusion(fv, fq, pad_mask)
        return self.acg(keys, values, mask)

    def forward(self, images, token_ids, pad_mask=None):
        cond = self.condition(images, token_ids, pad_mask)
        return cond, self.classifier(cond)


def encode_image(model: DiNModel, image) -> torch.Tensor:
    """Features for a single H x W x C image -> (n_patches, d)."""
    x = torch.as_tensor(image, dtype=next(model.parameters()).dtype)
    return model.vision(x.unsqueeze(0))[0]


def encode_question(model: DiNModel, tokenizer: Tokenizer, question: str) -> torch.Tensor:
    ids = torch.tensor([tokenizer.encode(question)])
    return model.text(ids)[0]


def fuse_to_kv(fusion: KVFusion, fv, fq):
    keys, values, _ = fusion(fv.unsqueeze(0), fq.unsqueeze(0))
    return keys[0], values[0]


def acg_forward(acg: AnswerConditionGenerator, keys, values) -> ConditionPack:
    cond = acg(keys.unsqueeze(0), values.unsqueeze(0))
    return ConditionPack(cond.f_fused[0], cond.f_cond[0], cond.cond_prob[0])
