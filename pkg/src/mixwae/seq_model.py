"""Recurrent utterance encoder, context encoder and conditional decoder.

The utterance encoder is a bidirectional GRU whose final forward/backward
states are concatenated and projected back to hidden_size; one instance is
shared between context turns and responses. The context encoder is a vanilla
GRU over per-utterance encodings. The decoder is a GRU whose initial state is
an affine map of [z; h(c)] and whose input at every step is the previous token
embedding concatenated with [z; h(c)] (re-injected to keep the latent on the
path).
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .corpus import PAD_ID, BOS_ID, EOS_ID


@dataclass
class ModelConfig:
    vocab_size: int = 0
    hidden_size: int = 300
    latent_dim: int = 200
    embedding_dim: int = 200
    k_exemplars: int = 4
    n_prior_components: int = 0      # 0 -> k_exemplars + 1
    ffn_hidden: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    critic_lr: float = 5e-5
    clip: float = 0.01               # WGAN weight clamp for the critic
    critic_steps: int = 5
    max_decode_len: int = 40
    max_context_turns: int = 10
    max_utterance_len: int = 40
    posterior_sampling: str = "weighted_sum"   # or "categorical"
    seed: int = 0

    def __post_init__(self):
        if self.n_prior_components <= 0:
            # same number of prior and posterior components by default
            self.n_prior_components = self.k_exemplars + 1

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class EncoderOutput:
    """Context representation plus response representations (gold first)."""
    h_c: torch.Tensor          # (B, hidden)
    h_r: list = field(default_factory=list)  # list of (B, hidden)


def _check_token_range(tokens, vocab_size):
    if tokens.numel() and int(tokens.max()) >= vocab_size:
        raise ValueError(
            f"token id {int(tokens.max())} out of range for vocab of {vocab_size}")


class UtteranceEncoder(nn.Module):
    def __init__(self, embedding, hidden_size):
        super().__init__()
        self.embedding = embedding
        self.hidden_size = hidden_size
        self.gru = nn.GRU(embedding.embedding_dim, hidden_size,
                          batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * hidden_size, hidden_size)

    def forward(self, tokens, lengths):
        """tokens (B, L) padded with PAD_ID; lengths (B,) true lengths."""
        _check_token_range(tokens, self.embedding.num_embeddings)
        if (lengths <= 0).any():
            raise ValueError("utterances must be non-empty")
        emb = self.embedding(tokens)
        packed = pack_padded_sequence(emb, lengths.cpu(), batch_first=True,
                                      enforce_sorted=False)
        _, h_n = self.gru(packed)          # (2, B, H)
        fused = torch.cat([h_n[0], h_n[1]], dim=-1)
        return self.proj(fused)            # (B, H)

    def encode_one(self, token_ids):
        tokens = torch.tensor([token_ids], dtype=torch.long)
        lengths = torch.tensor([len(token_ids)])
        return self.forward(tokens, lengths)[0]


class ContextEncoder(nn.Module):
    def __init__(self, hidden_size):
        super().__init__()
        self.hidden_size = hidden_size
        self.gru = nn.GRU(hidden_size, hidden_size, batch_first=True)

    def forward(self, turn_encodings, n_turns):
        """turn_encodings (B, T, H); n_turns (B,) true turn counts >= 1."""
        if (n_turns <= 0).any():
            raise ValueError("contexts must have at least one turn")
        packed = pack_padded_sequence(turn_encodings, n_turns.cpu(),
                                      batch_first=True, enforce_sorted=False)
        _, h_n = self.gru(packed)          # (1, B, H)
        return h_n[0]


class Decoder(nn.Module):
    """GRU decoder conditioned on [z; h(c)] at the initial state and every step."""

    def __init__(self, embedding, hidden_size, latent_dim, max_decode_len=40):
        super().__init__()
        self.embedding = embedding
        self.hidden_size = hidden_size
        self.latent_dim = latent_dim
        self.max_decode_len = max_decode_len
        cond = latent_dim + hidden_size
        self.init_state = nn.Linear(cond, hidden_size)
        self.gru = nn.GRU(embedding.embedding_dim + cond, hidden_size,
                          batch_first=True)
        self.readout = nn.Linear(hidden_size, embedding.num_embeddings)
        # near-zero logits at init keep the first-batch loss at ~log|V|
        nn.init.normal_(self.readout.weight, std=0.02)
        nn.init.zeros_(self.readout.bias)

    def _initial(self, z, h_c):
        cond = torch.cat([z, h_c], dim=-1)
        return torch.tanh(self.init_state(cond)).unsqueeze(0), cond

    def teacher_forced(self, z, h_c, targets, lengths):
        """Per-step log-probs of targets (with EOS) under teacher forcing.

        targets (B, L) holds [w1..wn, EOS, PAD..]; inputs are [BOS, w1..wn].
        Returns (token_logps (B, L), mask (B, L)) where mask marks real steps.
        """
        if targets is None:
            raise ValueError("teacher-forced decoding requires a target")
        _check_token_range(targets, self.embedding.num_embeddings)
        B, L = targets.shape
        bos = torch.full((B, 1), BOS_ID, dtype=torch.long, device=targets.device)
        inputs = torch.cat([bos, targets[:, :-1]], dim=1)
        state, cond = self._initial(z, h_c)
        emb = self.embedding(inputs)
        step_cond = cond.unsqueeze(1).expand(B, L, cond.shape[-1])
        out, _ = self.gru(torch.cat([emb, step_cond], dim=-1), state)
        logits = self.readout(out)                       # (B, L, V)
        logps = F.log_softmax(logits, dim=-1)
        token_logps = logps.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
        mask = (torch.arange(L, device=targets.device).unsqueeze(0)
                < lengths.unsqueeze(1)).to(token_logps.dtype)
        return token_logps, mask

    def generate(self, z, h_c, mode="greedy", max_len=None, rng=None):
        """Emit token ids until EOS or max_len; greedy or ancestral sampling."""
        if mode not in ("greedy", "sample"):
            raise ValueError(f"unknown generation mode {mode!r}")
        max_len = max_len or self.max_decode_len
        B = z.shape[0]
        device = z.device
        state, cond = self._initial(z, h_c)
        tok = torch.full((B, 1), BOS_ID, dtype=torch.long, device=device)
        done = torch.zeros(B, dtype=torch.bool, device=device)
        seqs = [[] for _ in range(B)]
        for _ in range(max_len):
            emb = self.embedding(tok)
            out, state = self.gru(
                torch.cat([emb, cond.unsqueeze(1)], dim=-1), state)
            logits = self.readout(out.squeeze(1))
            if mode == "greedy":
                nxt = logits.argmax(dim=-1)
            else:
                probs = F.softmax(logits, dim=-1)
                nxt = torch.multinomial(probs, 1, generator=rng).squeeze(-1)
            for b in range(B):
                if not done[b]:
                    if int(nxt[b]) == EOS_ID:
                        done[b] = True
                    else:
                        seqs[b].append(int(nxt[b]))
            if bool(done.all()):
                break
            tok = nxt.unsqueeze(1)
        return seqs


def sequence_nll(token_logps, mask):
    """(sum of -logp over real steps per sequence, token counts)."""
    return -(token_logps * mask).sum(dim=1), mask.sum(dim=1)


def per_token_nll(token_logps, mask):
    """Masked mean negative log-likelihood per token over the batch."""
    total = mask.sum()
    if total == 0:
        raise ValueError("empty batch: no target tokens")
    return -(token_logps * mask).sum() / total
