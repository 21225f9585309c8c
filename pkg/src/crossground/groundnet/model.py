"""Grounding network: word GRU, cross-attention localization, 2D branch, heads, loss.

Tensors are batch-first: words ``(B, n, d)``, proposals ``(B, m, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from crossground.embeddings import hash_project
from crossground.groundnet.proposals import feature_columns

HEADS = ("2d", "3d", "2d3d")
LOSS_WEIGHTS = {"cls": 0.1, "loc": 0.3, "det": 10.0}
UNK = "<unk>"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 128
    c: int = 728
    m: int = 256
    n_heads: int = 4
    n_layers: int = 2
    word_dim: int = 300
    ffn_dim: int = 256
    use_color: bool = False
    use_normal: bool = True
    joint_train: bool = True
    L_det_enabled: bool = False
    init_seed: int = 0

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ModelError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.m < 1 or self.d < 1 or self.c < 2 or self.n_layers < 0 or self.word_dim < 1:
            raise ModelError("model dimensions must be positive")

    @property
    def descriptor_columns(self) -> np.ndarray:
        return feature_columns(self.use_color, self.use_normal)


@dataclass
class Outputs:
    log_s: dict  # head -> (B, m) log-probabilities, -inf on padding
    cls_logits: torch.Tensor | None = None  # (B, m, n_classes)
    attention: list = field(default_factory=list)

    def scores(self, head: str) -> torch.Tensor:
        return self.log_s[head].exp()


def masked_log_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if not bool(mask.any(dim=-1).all()):
        raise ModelError("every proposal is masked")
    logits = logits.masked_fill(~mask, float("-inf"))
    return torch.log_softmax(logits, dim=-1)


class CrossAttentionBlock(nn.Module):
    """Proposals attend to words; residual + layer norm, then a feed-forward."""

    def __init__(self, d: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.norm1 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, d))
        self.norm2 = nn.LayerNorm(d)

    def attend(self, x, words, word_mask):
        b, m, d = x.shape
        n = words.shape[1]
        h = self.n_heads
        q = self.q(x).view(b, m, h, d // h).transpose(1, 2)
        k = self.k(words).view(b, n, h, d // h).transpose(1, 2)
        v = self.v(words).view(b, n, h, d // h).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(d // h)  # (b, h, m, n)
        logits = logits.masked_fill(~word_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, m, d)
        return self.out(ctx), attn

    def forward(self, x, words, word_mask, prop_mask):
        a, attn = self.attend(x, words, word_mask)
        a = a * prop_mask[..., None].to(a.dtype)
        x = self.norm1(x + a)
        x = self.norm2(x + self.ffn(x))
        return x, attn


def _mlp(d_in: int, d_hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.GELU(), nn.Linear(d_hidden, d_out))


class GroundingModel(nn.Module):
    def __init__(self, config: ModelConfig, vocab: Sequence[str], class_names: Sequence[str]):
        super().__init__()
        self.config = config
        self.vocab = [UNK] + [w for w in vocab if w != UNK]
        self.class_names = list(class_names)
        self._index = {w: i for i, w in enumerate(self.vocab)}
        self._class_index = {c: i for i, c in enumerate(self.class_names)}
        d = config.d
        gen = torch.Generator().manual_seed(config.init_seed)

        self.word_table = nn.Embedding(len(self.vocab), config.word_dim)
        self.gru = nn.GRU(config.word_dim, d, num_layers=1, batch_first=True)
        self.desc_proj = nn.Linear(len(config.descriptor_columns), d)
        self.blocks = nn.ModuleList(
            CrossAttentionBlock(d, config.n_heads, config.ffn_dim) for _ in range(config.n_layers)
        )
        self.proj_2d = nn.Linear(config.c, d)
        self.null_2d = nn.Parameter(torch.zeros(d))
        self.mlp_cls = _mlp(d, d, max(1, len(self.class_names)))
        self.mlp_loc = nn.ModuleDict({h: _mlp(d, d, 1) for h in HEADS})
        self._init(gen)

    def _init(self, gen: torch.Generator):
        # word vectors: hash projections (GloVe-sized, hermetic)
        with torch.no_grad():
            table = np.stack([hash_project(w, self.config.word_dim, self.config.init_seed) for w in self.vocab])
            self.word_table.weight.copy_(torch.from_numpy(table))
            for name, p in self.named_parameters():
                if name.startswith("word_table"):
                    continue
                if p.ndim >= 2:
                    bound = 1.0 / math.sqrt(p.shape[1])
                    p.copy_(torch.empty(p.shape, dtype=torch.float64).uniform_(-bound, bound, generator=gen))
                elif "norm" in name and name.endswith("weight"):
                    p.fill_(1.0)
                elif name.startswith("gru"):
                    bound = 1.0 / math.sqrt(self.config.d)
                    p.copy_(torch.empty(p.shape, dtype=torch.float64).uniform_(-bound, bound, generator=gen))
                else:
                    p.zero_()

    # -- vocabularies ---------------------------------------------------------

    def token_ids(self, tokens: Sequence[str]) -> list[int]:
        return [self._index.get(t, 0) for t in tokens]

    def class_id(self, name: str) -> int:
        return self._class_index.get(name, -1)

    @property
    def dtype(self):
        return self.proj_2d.weight.dtype

    # -- stages -----------------------------------------------------------------

    def encode_words(self, token_ids: torch.Tensor) -> torch.Tensor:
        """GRU states (B, n, d) over word vectors; padding positions are ignored downstream."""
        states, _ = self.gru(self.word_table(token_ids))
        return states

    def proposal_features(self, descriptors: torch.Tensor) -> torch.Tensor:
        cols = torch.as_tensor(self.config.descriptor_columns)
        return self.desc_proj(descriptors[..., cols])

    def localize(self, words, word_mask, features, prop_mask, return_attention: bool = False):
        x = features
        attention = []
        for block in self.blocks:
            x, attn = block(x, words, word_mask, prop_mask)
            attention.append(attn)
        return (x, attention) if return_attention else x

    def project_2d(self, fused: torch.Tensor, missing: torch.Tensor) -> torch.Tensor:
        """(..., m, c) fused image features -> (..., m, d); rows flagged missing get the null vector."""
        o = self.proj_2d(fused)
        return torch.where(missing[..., None], self.null_2d.expand_as(o), o)

    def project_2d_weighted(self, view_weights, frame_embeddings, missing):
        """Same as ``project_2d`` on ``view_weights @ frame_embeddings``.

        Projects the (B, F, c) frame embeddings first; exact because the
        weights of a non-missing proposal sum to one.
        """
        projected = self.proj_2d(frame_embeddings)  # (B, F, d)
        o = view_weights @ projected  # (B, m, d)
        return torch.where(missing[..., None], self.null_2d.expand_as(o), o)

    def head_logits(self, o: torch.Tensor, head: str) -> torch.Tensor:
        # literal Softmax(GELU(MLP(o))): GELU sits on the scalar logit
        return F.gelu(self.mlp_loc[head](o).squeeze(-1))

    def classify(self, o, prop_mask, head: str = "2d3d") -> torch.Tensor:
        return masked_log_softmax(self.head_logits(o, head), prop_mask)

    def forward(self, batch) -> Outputs:
        words = self.encode_words(batch.token_ids)
        f = self.proposal_features(batch.descriptors)
        o_3d, attention = self.localize(words, batch.word_mask, f, batch.prop_mask, return_attention=True)
        o_2d = self.project_2d_weighted(batch.view_weights, batch.frame_embeddings, batch.missing)
        log_s = {
            "2d": self.classify(o_2d, batch.prop_mask, "2d"),
            "3d": self.classify(o_3d, batch.prop_mask, "3d"),
            "2d3d": self.classify(o_2d + o_3d, batch.prop_mask, "2d3d"),
        }
        return Outputs(log_s, self.mlp_cls(f), attention)


def combine_loss(l_cls, l_loc_parts: Sequence, l_det, joint_train: bool = True):
    """0.1 * L_cls + 0.3 * L_loc + 10 * L_det.

    ``l_loc_parts`` is ``(2d, 3d, 2d3d)``; without joint training only the
    fused term counts.
    """
    l_loc = sum(l_loc_parts) if joint_train else l_loc_parts[-1]
    return LOSS_WEIGHTS["cls"] * l_cls + LOSS_WEIGHTS["loc"] * l_loc + LOSS_WEIGHTS["det"] * l_det


def loss_total(outputs: Outputs, batch, config: ModelConfig):
    """Returns ``(total, parts)``; parts are detached floats for logging."""
    target = batch.loc_target
    rows = torch.arange(len(target))
    loc = [-(outputs.log_s[h][rows, target]).mean() for h in HEADS]

    if outputs.cls_logits is not None and batch.cls_target is not None and bool((batch.cls_target >= 0).any()):
        n_classes = outputs.cls_logits.shape[-1]
        l_cls = F.cross_entropy(outputs.cls_logits.reshape(-1, n_classes), batch.cls_target.reshape(-1), ignore_index=-1)
    else:
        l_cls = loc[0].new_zeros(())
    # no trainable detector: the detection term is identically zero
    l_det = loc[0].new_zeros(())
    total = combine_loss(l_cls, loc, l_det, config.joint_train)
    parts = {
        "L_cls": l_cls.item(),
        "L_loc_2d": loc[0].item(),
        "L_loc_3d": loc[1].item(),
        "L_loc_2d3d": loc[2].item(),
        "L_det": l_det.item(),
        "total": total.item(),
    }
    return total, parts
