"""Miniature decoder-only transformer policy.

Consumes [instruction | base image | wrist image | (optional crop) | action
prefix] under an exactly-causal mask, emits next-token logits at action
positions and reconstructive tokens (a linear projection of the final hidden
states at image positions) that condition the diffusion denoiser.

The instruction segment is always padded to a fixed width with PAD tokens, so
image tokens sit at the same absolute positions in every sequence. PAD acts
as a learned null token; the mask stays purely causal.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .simworld import ContinuousAction
from .tokenizers import (
    ACT_START_ID,
    PAD_ID,
    ActionCodec,
    PatchEmbedder,
    ShapeMismatch,
    TextVocab,
    VocabLayout,
)


class SequenceTooLong(Exception):
    pass


class NonFiniteActivation(Exception):
    """Numerical overflow guard tripped during a training forward pass."""


class AttentionNotRetained(Exception):
    pass


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    ffn_mult: int = 4
    vocab_size: int = field(default_factory=lambda: VocabLayout().vocab_size)
    max_seq_len: int = 256
    dropout: float = 0.0
    recon_head_dim: int = 32
    instr_len: int = 48
    image_size: int = 64
    patch_size: int = 8
    use_crop_input: bool = False
    crop_size: int = 32

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.max_seq_len < self.instr_len + 2 * self.n_image_tokens // 2 + 4:
            raise ValueError("max_seq_len too small for instruction + images + actions")

    @property
    def tokens_per_view(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_image_tokens(self) -> int:
        return 2 * self.tokens_per_view

    @property
    def crop_tokens(self) -> int:
        return (self.crop_size // self.patch_size) ** 2 if self.use_crop_input else 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TokenSequence:
    """Assembled single-sequence model input with segment bookkeeping."""

    embeddings: torch.Tensor            # (L, d_model)
    segment: list[str]                  # per-position tag
    mask: torch.Tensor                  # (L, L) bool, True where attendable
    spans: dict[str, tuple[int, int]]   # segment name -> [start, end)

    @property
    def image_span(self) -> tuple[int, int]:
        return (self.spans["img_base"][0], self.spans["img_wrist"][1])

    def __len__(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class BackboneOutput:
    action_logits: torch.Tensor           # (n_act_positions, vocab)
    h_R: torch.Tensor                     # (n_image_tokens, k)
    attn: Optional[torch.Tensor] = None   # (layers, heads, L, L)

    def attention(self) -> torch.Tensor:
        if self.attn is None:
            raise AttentionNotRetained("forward was run without attention retention")
        return self.attn


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor, retain: bool):
        b, L, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=2)

        def heads(t):
            return t.view(b, L, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = heads(q), heads(k), heads(v)
        scores = (q @ k.transpose(-2, -1)) / (self.head_dim ** 0.5)
        scores = scores.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = weights @ v
        out = out.transpose(1, 2).contiguous().view(b, L, d)
        return self.drop(self.proj(out)), (weights.detach() if retain else None)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = SelfAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.ffn_mult * cfg.d_model),
            nn.GELU(),
            nn.Linear(cfg.ffn_mult * cfg.d_model, cfg.d_model),
            nn.Dropout(cfg.dropout),
        )

    def forward(self, x, mask, retain):
        a, w = self.attn(self.ln1(x), mask, retain)
        x = x + a
        x = x + self.ffn(self.ln2(x))
        return x, w


class VLAModel(nn.Module):
    """Backbone + embedders + action/reconstruction heads."""

    def __init__(self, config: ModelConfig, layout: Optional[VocabLayout] = None):
        super().__init__()
        self.config = config
        self.layout = layout or VocabLayout()
        if self.layout.vocab_size != config.vocab_size:
            raise ValueError(
                f"vocab mismatch: layout says {self.layout.vocab_size}, "
                f"config says {config.vocab_size}"
            )
        views = {"base": config.image_size, "wrist": config.image_size}
        if config.use_crop_input:
            views["crop"] = config.crop_size
        self.embedder = PatchEmbedder(config.d_model, views, config.patch_size)
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Parameter(torch.zeros(config.max_seq_len, config.d_model))
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model)
        self.action_head = nn.Linear(config.d_model, config.vocab_size)
        self.recon_head = nn.Linear(config.d_model, config.recon_head_dim)
        self.apply(self._init)
        nn.init.normal_(self.pos_emb, std=0.02)
        causal = torch.tril(torch.ones(config.max_seq_len, config.max_seq_len, dtype=torch.bool))
        self.register_buffer("causal_mask", causal, persistent=False)

    @staticmethod
    def _init(m):
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, std=0.02)

    # ------------------------------------------------------------------
    # sequence assembly

    def pad_instruction(self, instr_ids: list[int]) -> list[int]:
        if len(instr_ids) > self.config.instr_len:
            raise SequenceTooLong(
                f"instruction has {len(instr_ids)} ids, budget is {self.config.instr_len}"
            )
        return list(instr_ids) + [PAD_ID] * (self.config.instr_len - len(instr_ids))

    def assemble_sequence(
        self,
        instr_ids: list[int],
        base_image: np.ndarray,
        wrist_image: np.ndarray,
        action_prefix_ids: list[int],
        crop_image: Optional[np.ndarray] = None,
    ) -> TokenSequence:
        """Embed and concatenate segments in the mandated order; causal mask."""
        cfg = self.config
        dev = self.pos_emb.device
        ids = torch.tensor(self.pad_instruction(instr_ids), dtype=torch.long, device=dev)
        parts = [self.tok_emb(ids)]
        segs = ["instr"] * cfg.instr_len
        spans = {"instr": (0, cfg.instr_len)}

        def embed_view(img, view):
            t = torch.from_numpy(np.ascontiguousarray(img)).to(dev)
            return self.embedder(t.unsqueeze(0), view).squeeze(0)

        start = cfg.instr_len
        for name, img in (("img_base", base_image), ("img_wrist", wrist_image)):
            view = name.removeprefix("img_")
            tok = embed_view(img, view)
            parts.append(tok)
            segs += [name] * tok.shape[0]
            spans[name] = (start, start + tok.shape[0])
            start += tok.shape[0]
        if cfg.use_crop_input:
            if crop_image is None:
                raise ShapeMismatch("model was built with use_crop_input but no crop was given")
            tok = embed_view(crop_image, "crop")
            parts.append(tok)
            segs += ["img_crop"] * tok.shape[0]
            spans["img_crop"] = (start, start + tok.shape[0])
            start += tok.shape[0]
        if action_prefix_ids:
            act = torch.tensor(action_prefix_ids, dtype=torch.long, device=dev)
            parts.append(self.tok_emb(act))
            segs += ["act"] * len(action_prefix_ids)
        spans["act"] = (start, start + len(action_prefix_ids))
        L = start + len(action_prefix_ids)
        if L > cfg.max_seq_len:
            raise SequenceTooLong(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
        emb = torch.cat(parts, dim=0) + self.pos_emb[:L]
        return TokenSequence(
            embeddings=emb,
            segment=segs,
            mask=self.causal_mask[:L, :L],
            spans=spans,
        )

    # ------------------------------------------------------------------
    # forward

    def _run(self, x: torch.Tensor, retain: bool) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
        b, L, _ = x.shape
        mask = self.causal_mask[:L, :L]
        attns = []
        for block in self.blocks:
            x, w = block(x, mask, retain)
            if retain:
                attns.append(w)
        x = self.ln_f(x)
        if self.training and not torch.isfinite(x).all():
            raise NonFiniteActivation("non-finite activation in backbone forward")
        attn = torch.stack(attns, dim=1) if retain else None  # (B, layers, heads, L, L)
        return x, attn

    def forward(self, seq: TokenSequence, retain_attention: bool = False) -> BackboneOutput:
        h, attn = self._run(seq.embeddings.unsqueeze(0), retain_attention)
        h = h.squeeze(0)
        i0, i1 = seq.image_span
        a0, a1 = seq.spans["act"]
        return BackboneOutput(
            action_logits=self.action_head(h[a0:a1]),
            h_R=self.recon_head(h[i0:i1]),
            attn=attn.squeeze(0) if attn is not None else None,
        )

    def forward_batch(
        self,
        instr_ids: torch.Tensor,            # (B, instr_len) long
        base: torch.Tensor,                 # (B, 64, 64, 3) uint8
        wrist: torch.Tensor,
        act_ids: torch.Tensor,              # (B, A) long
        crop: Optional[torch.Tensor] = None,
        retain_attention: bool = False,
    ) -> dict:
        cfg = self.config
        if instr_ids.shape[1] != cfg.instr_len:
            raise ShapeMismatch(f"instr_ids width {instr_ids.shape[1]} != {cfg.instr_len}")
        parts = [self.tok_emb(instr_ids), self.embedder(base, "base"), self.embedder(wrist, "wrist")]
        if cfg.use_crop_input:
            if crop is None:
                raise ShapeMismatch("model was built with use_crop_input but no crop was given")
            parts.append(self.embedder(crop, "crop"))
        act_start = cfg.instr_len + cfg.n_image_tokens + cfg.crop_tokens
        parts.append(self.tok_emb(act_ids))
        x = torch.cat(parts, dim=1)
        L = x.shape[1]
        if L > cfg.max_seq_len:
            raise SequenceTooLong(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
        x = x + self.pos_emb[:L]
        h, attn = self._run(x, retain_attention)
        i0 = cfg.instr_len
        i1 = i0 + cfg.n_image_tokens
        return {
            "action_logits": self.action_head(h[:, act_start:]),
            "h_R": self.recon_head(h[:, i0:i1]),
            "attn": attn,
            "act_start": act_start,
        }

    # ------------------------------------------------------------------
    # decoding

    def mask_to_action_range(self, logits: torch.Tensor) -> torch.Tensor:
        """Force decoding to stay inside the action-id slice of the vocab."""
        lo, hi = self.layout.action_offset, self.layout.vocab_size
        out = logits.clone()
        out[..., :lo] = float("-inf")
        out[..., hi:] = float("-inf")
        return out

    @torch.no_grad()
    def greedy_decode_batch(
        self,
        instr_ids: torch.Tensor,
        base: torch.Tensor,
        wrist: torch.Tensor,
        n_steps: int,
        crop: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Fixed-shape autoregressive greedy decode.

        The action segment always holds ACT_START + (n_steps - 1) slots;
        future slots are PAD until filled, which keeps every pass the same
        shape so earlier logits are bit-identical across steps (causality).
        """
        b = instr_ids.shape[0]
        dev = instr_ids.device
        act_ids = torch.full((b, n_steps), PAD_ID, dtype=torch.long, device=dev)
        act_ids[:, 0] = ACT_START_ID
        for i in range(n_steps):
            out = self.forward_batch(instr_ids, base, wrist, act_ids, crop=crop)
            logits = self.mask_to_action_range(out["action_logits"][:, i])
            nxt = logits.argmax(dim=-1)
            if i + 1 < n_steps:
                act_ids[:, i + 1] = nxt
            else:
                last = nxt
        decoded = torch.cat([act_ids[:, 1:], last.unsqueeze(1)], dim=1)
        return decoded


def predict_actions(
    model: VLAModel,
    base_image: np.ndarray,
    wrist_image: np.ndarray,
    instruction: str,
    vocab: Optional[TextVocab] = None,
    codec: Optional[ActionCodec] = None,
    decode: str = "greedy",
    crop_image: Optional[np.ndarray] = None,
) -> ContinuousAction:
    """Autoregressive greedy action prediction for a single observation."""
    if decode != "greedy":
        raise ValueError(f"unsupported decode mode {decode!r}")
    vocab = vocab or TextVocab(model.layout)
    codec = codec or ActionCodec(model.layout)
    was_training = model.training
    model.eval()
    try:
        instr = torch.tensor([model.pad_instruction(vocab.encode(instruction))], dtype=torch.long)
        base = torch.from_numpy(np.ascontiguousarray(base_image)).unsqueeze(0)
        wrist = torch.from_numpy(np.ascontiguousarray(wrist_image)).unsqueeze(0)
        crop = None
        if crop_image is not None:
            crop = torch.from_numpy(np.ascontiguousarray(crop_image)).unsqueeze(0)
        ids = model.greedy_decode_batch(instr, base, wrist, n_steps=4, crop=crop)
    finally:
        if was_training:
            model.train()
    return codec.detokenize(ids[0].tolist())


def attention_maps(model: VLAModel, seq: TokenSequence) -> torch.Tensor:
    """(layers, heads, L, L) attention weights for a single sequence."""
    with torch.no_grad():
        out = model.forward(seq, retain_attention=True)
    return out.attention()
