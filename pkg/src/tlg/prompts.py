"""Prompt bank, text encoding and the branch-specific multimodal adapters.

The bank pairs every foreground category with a fine-grained attribute
prompt and its two most likely co-occurring backgrounds.  The shipped banks
were curated offline with a chat assistant; nothing here queries one.
"""

from __future__ import annotations

import csv
import hashlib
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import torch
from torch import nn

from .errors import PromptBankError

BUILTIN_BANKS = ("synthetic", "pascal", "coco")


@dataclass(frozen=True)
class PromptRecord:
    category_id: int
    category_name: str
    fine_grained_prompt: str
    background_prompts: tuple[str, str]

    @property
    def foreground_prompt(self) -> str:
        return f"a photo of a {self.category_name}"


class PromptBank(Mapping):
    def __init__(self, records: Sequence[PromptRecord]):
        self._records = {r.category_id: r for r in records}
        if len(self._records) != len(records):
            raise PromptBankError("duplicate category ids in prompt bank")

    def __getitem__(self, category_id):
        return self._records[category_id]

    def __iter__(self):
        return iter(sorted(self._records))

    def __len__(self):
        return len(self._records)

    def by_name(self, name: str) -> PromptRecord:
        for r in self._records.values():
            if r.category_name == name:
                return r
        raise KeyError(name)


def _bank_path(bank_file) -> Path:
    if str(bank_file) in BUILTIN_BANKS:
        return Path(str(resources.files("tlg") / "data" / f"prompts_{bank_file}.csv"))
    return Path(bank_file)


def read_bank_file(bank_file) -> list[dict]:
    path = _bank_path(bank_file)
    if not path.is_file():
        raise PromptBankError(f"prompt bank file not found: {path}")
    with path.open(newline="") as fh:
        rows = [r for r in csv.DictReader(fh, skipinitialspace=True)]
    need = {"category_id", "category_name", "fine_grained_prompt", "bg1", "bg2"}
    if rows and not need <= set(rows[0]):
        raise PromptBankError(f"{path}: columns must be {sorted(need)}")
    return rows


def build_prompt_bank(categories, bank_file="synthetic") -> PromptBank:
    """Validated bank for ``categories`` (names in id order, or an id -> name mapping)."""
    if not isinstance(categories, Mapping):
        categories = dict(enumerate(categories))
    by_name = {}
    for row in read_bank_file(bank_file):
        by_name[row["category_name"].strip()] = row
    records = []
    for cid, name in sorted(categories.items()):
        row = by_name.get(name)
        if row is None:
            raise PromptBankError(f"prompt bank {bank_file} has no entry for category {cid} ({name})")
        bgs = (row["bg1"].strip(), row["bg2"].strip())
        if not all(bgs) or bgs[0] == bgs[1]:
            raise PromptBankError(f"category {name}: background prompts must be non-empty and distinct, got {bgs}")
        fine = (row.get("fine_grained_prompt") or "").strip() or f"a photo of a {name}"
        records.append(PromptRecord(int(cid), name, fine, bgs))
    return PromptBank(records)


@dataclass(frozen=True)
class TextEmbedding:
    matrix: torch.Tensor  # (n_prompts, d_text), rows unit norm
    source: str = "stub"


class TextEncoder(Protocol):
    def __call__(self, prompts: Sequence[str]) -> torch.Tensor: ...


_TOKEN = re.compile(r"[a-z0-9]+")


def _bucket(feature: str, d: int) -> tuple[int, float]:
    h = hashlib.blake2b(feature.encode(), digest_size=8).digest()
    idx = int.from_bytes(h[:4], "little") % d
    sign = 1.0 if h[4] & 1 else -1.0
    return idx, sign


def stub_encode(prompt: str, d_text: int = 64) -> torch.Tensor:
    """Signed feature hashing of word unigrams, word bigrams and character trigrams."""
    words = _TOKEN.findall(prompt.lower())
    feats = [f"w:{w}" for w in words] + [f"b:{a}_{b}" for a, b in zip(words, words[1:])]
    for w in words:
        padded = f"#{w}#"
        feats += [f"c:{padded[i:i + 3]}" for i in range(len(padded) - 2)]
    v = torch.zeros(d_text, dtype=torch.float64)
    for f in feats:
        weight = 2.0 if f.startswith("w:") else 1.0
        idx, sign = _bucket(f, d_text)
        v[idx] += sign * weight
    return v


def encode_text(prompts: Sequence[str], d_text: int = 64, encoder: TextEncoder | None = None) -> TextEmbedding:
    """Unit-norm embeddings; the hashing stub unless an external ``encoder`` is given."""
    prompts = list(prompts)
    if not prompts:
        raise PromptBankError("no prompts to encode")
    for p in prompts:
        if not isinstance(p, str) or not p.strip():
            raise PromptBankError(f"empty prompt in {prompts!r}")
    if encoder is None:
        m = torch.stack([stub_encode(p, d_text) for p in prompts])
        source = "stub"
    else:
        with torch.no_grad():
            m = torch.as_tensor(encoder(prompts), dtype=torch.float64)
        source = "external"
    m = m / m.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return TextEmbedding(m, source)


@dataclass(frozen=True)
class MatchResult:
    category_index: int
    foreground: torch.Tensor
    backgrounds: torch.Tensor  # (2, d_text)


def match_indices(summary: torch.Tensor, fg_embeddings: torch.Tensor) -> torch.Tensor:
    """Row of ``fg_embeddings`` with the highest cosine to each summary; ties -> lowest index."""
    s = summary / summary.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    sims = s @ fg_embeddings.T
    # argmax returns the first maximal index on ties
    best = sims.max(dim=-1, keepdim=True).values
    hit = (sims >= best).to(torch.int64)
    return hit.argmax(dim=-1)


def max_match(query_visual_summary: torch.Tensor, fg_embeddings: torch.Tensor,
              bg_embeddings: torch.Tensor) -> MatchResult:
    """bg_embeddings: (N, 2, d_text), linked row-wise to ``fg_embeddings`` (N, d_text)."""
    idx = int(match_indices(query_visual_summary[None], fg_embeddings)[0])
    return MatchResult(idx, fg_embeddings[idx], bg_embeddings[idx])


class Adapter(nn.Module):
    """Bottleneck fusion of a visual map with a tiled text vector.

    output = rho * up(relu(down(concat(visual, text)))) + (1 - rho) * visual
    """

    def __init__(self, visual_channels: int, cond_dim: int, ratio: int = 4, rho_init: float = 0.2):
        super().__init__()
        hidden = max(1, visual_channels // ratio)
        self.cond_dim = cond_dim
        self.down = nn.Conv2d(visual_channels + cond_dim, hidden, 1)
        self.up = nn.Conv2d(hidden, visual_channels, 1)
        self.rho = nn.Parameter(torch.tensor(float(rho_init)))

    def bottleneck(self, visual, cond):
        B, _, H, W = visual.shape
        tiled = cond[:, :, None, None].expand(B, self.cond_dim, H, W)
        return self.up(torch.relu(self.down(torch.cat([visual, tiled], dim=1))))

    def forward(self, visual, cond):
        if cond.shape[-1] != self.cond_dim:
            raise ValueError(f"conditioning width {cond.shape[-1]} != {self.cond_dim}")
        return self.rho * self.bottleneck(visual, cond) + (1 - self.rho) * visual


def adapt_support(visual, gain_embedding, adapter: Adapter):
    return adapter(visual, gain_embedding)


def adapt_query(visual, fg_embedding, bg_embeddings, adapter: Adapter):
    """bg_embeddings (B, 2, d): the two backgrounds are averaged into one vector."""
    bg = bg_embeddings.mean(dim=1)
    bg = bg / bg.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return adapter(visual, torch.cat([fg_embedding, bg], dim=-1))


class HeterogeneousCLIP(nn.Module):
    """Matched text conditioning for both branches.

    Text embeddings are fixed buffers.  ``match_source='label'`` matches on
    the episode's image-level label (the weak supervision available in this
    setting); ``'visual'`` matches on a projection of the pooled query map.
    """

    def __init__(self, bank: PromptBank, channels: int, d_text: int = 64, ratio: int = 4,
                 rho_init: float = 0.2, match_source: str = "label", encoder: TextEncoder | None = None):
        super().__init__()
        ids = list(bank)
        if ids != list(range(len(ids))):
            raise PromptBankError("prompt bank ids must be 0..N-1")
        recs = [bank[i] for i in ids]
        enc = lambda ps: encode_text(ps, d_text, encoder).matrix.to(torch.get_default_dtype())  # noqa: E731
        self.register_buffer("fg", enc([r.foreground_prompt for r in recs]))
        self.register_buffer("gain", enc([r.fine_grained_prompt for r in recs]))
        bg = enc([b for r in recs for b in r.background_prompts])
        self.register_buffer("bg", bg.view(len(recs), 2, d_text))
        self.match_source = match_source
        self.support_adapter = Adapter(channels, d_text, ratio, rho_init)
        self.query_adapter = Adapter(channels, 2 * d_text, ratio, rho_init)
        if match_source == "visual":
            self.summary_proj = nn.Linear(channels, d_text, bias=False)
            self.summary_proj.requires_grad_(False)

    def match(self, visual_q: torch.Tensor, category_id: torch.Tensor) -> torch.Tensor:
        if self.match_source == "label":
            summary = self.fg[category_id]
        else:
            summary = self.summary_proj(visual_q.mean(dim=(-2, -1)))
        return match_indices(summary, self.fg)

    def forward(self, visual_s, visual_q, category_id, shots: int):
        idx = self.match(visual_q, category_id)
        gain = self.gain[idx].repeat_interleave(shots, dim=0)
        ms = adapt_support(visual_s, gain, self.support_adapter)
        mq = adapt_query(visual_q, self.fg[idx], self.bg[idx], self.query_adapter)
        return ms, mq, idx
