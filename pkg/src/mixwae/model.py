"""Composite model: encoders + mixture networks + generators + decoder + critic.

All public entry points take plain lists of ContextResponsePair /ExemplarSet
objects and tensorize internally; explicit torch.Generator handles make every
stochastic path reproducible. Construction is deterministic given config.seed.
"""

import torch
import torch.nn as nn

from .corpus import PAD_ID, EOS_ID
from .seq_model import (ModelConfig, UtteranceEncoder, ContextEncoder, Decoder,
                        EncoderOutput, sequence_nll, per_token_nll)
from .latent_mixture import (RecognitionNetwork, PriorNetwork,
                             FeedForwardGenerator, posterior_weights,
                             sample_posterior_noise, sample_prior_noise,
                             generator_sample)
from .adversarial import Critic


def pad_token_batch(token_lists, max_len=None):
    """Pad variable-length id lists to (B, L); returns (tensor, lengths)."""
    if max_len is not None:
        token_lists = [t[:max_len] for t in token_lists]
    lengths = torch.tensor([len(t) for t in token_lists], dtype=torch.long)
    L = max(1, int(lengths.max()))
    out = torch.full((len(token_lists), L), PAD_ID, dtype=torch.long)
    for i, toks in enumerate(token_lists):
        out[i, : len(toks)] = torch.tensor(toks, dtype=torch.long)
    return out, lengths


def make_decoder_targets(token_lists, max_len):
    """Append EOS and pad: targets (B, L); lengths count the EOS step."""
    capped = [list(t[:max_len]) + [EOS_ID] for t in token_lists]
    return pad_token_batch(capped)


class ExemplarWae(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.vocab_size <= 4:
            raise ValueError("config.vocab_size must exceed the reserved ids")
        torch.manual_seed(config.seed)
        self.config = config
        self.embedding = nn.Embedding(config.vocab_size, config.embedding_dim,
                                      padding_idx=PAD_ID)
        nn.init.uniform_(self.embedding.weight, -0.1, 0.1)
        with torch.no_grad():
            self.embedding.weight[PAD_ID].zero_()
        self.utt_encoder = UtteranceEncoder(self.embedding, config.hidden_size)
        self.ctx_encoder = ContextEncoder(config.hidden_size)
        self.decoder = Decoder(self.embedding, config.hidden_size,
                               config.latent_dim, config.max_decode_len)
        self.recognition = RecognitionNetwork(config.hidden_size,
                                              config.latent_dim, config.ffn_hidden)
        self.prior = PriorNetwork(config.hidden_size, config.latent_dim,
                                  config.ffn_hidden, config.n_prior_components)
        self.gen_q = FeedForwardGenerator(config.latent_dim)
        self.gen_g = FeedForwardGenerator(config.latent_dim)
        self.critic = Critic(config.latent_dim, config.hidden_size)

    # -- parameter groups ---------------------------------------------------

    def main_parameters(self):
        """Everything on the generator side (all but the critic)."""
        return [p for name, p in self.named_parameters()
                if not name.startswith("critic.")]

    def warm_parameters(self):
        """Components trained in phases I-II: encoders, RecNet, Q, decoder."""
        warm = ("embedding.", "utt_encoder.", "ctx_encoder.", "decoder.",
                "recognition.", "gen_q.")
        return [p for name, p in self.named_parameters()
                if name.startswith(warm)]

    def cold_modules(self):
        """Untouched before phase III: PriNet, G, critic."""
        return {"prior": self.prior, "gen_g": self.gen_g, "critic": self.critic}

    # -- encoding -----------------------------------------------------------

    def encode_utterance_batch(self, token_lists):
        tokens, lengths = pad_token_batch(token_lists,
                                          self.config.max_utterance_len)
        device = self.embedding.weight.device
        return self.utt_encoder(tokens.to(device), lengths)

    def encode_context_batch(self, contexts):
        """contexts: list over batch of list-of-turn token-id lists."""
        contexts = [c[-self.config.max_context_turns:] for c in contexts]
        n_turns = torch.tensor([len(c) for c in contexts], dtype=torch.long)
        flat = [turn for ctx in contexts for turn in ctx]
        flat_enc = self.encode_utterance_batch(flat)      # (sum turns, H)
        B, T = len(contexts), int(n_turns.max())
        turn_enc = flat_enc.new_zeros((B, T, self.config.hidden_size))
        pos = 0
        for b, ctx in enumerate(contexts):
            turn_enc[b, : len(ctx)] = flat_enc[pos: pos + len(ctx)]
            pos += len(ctx)
        return self.ctx_encoder(turn_enc, n_turns)

    def encode_pairs(self, pairs, exemplar_sets=None):
        """EncoderOutput for a batch: h(c) plus response encodings, gold first.

        Also returns the exemplar-context encodings needed for the weights.
        """
        h_c = self.encode_context_batch([[u.tokens for u in p.context]
                                         for p in pairs])
        h_r = [self.encode_utterance_batch([p.response.tokens for p in pairs])]
        h_c_list = [h_c]
        if exemplar_sets is not None:
            k = self.config.k_exemplars
            for i in range(k):
                ex_pairs = [es.exemplars[i][0] for es in exemplar_sets]
                h_r.append(self.encode_utterance_batch(
                    [p.response.tokens for p in ex_pairs]))
                h_c_list.append(self.encode_context_batch(
                    [[u.tokens for u in p.context] for p in ex_pairs]))
        return EncoderOutput(h_c=h_c, h_r=h_r), h_c_list

    # -- posterior / prior paths ---------------------------------------------

    def posterior_sample_single(self, h_c, h_r_gold, rng):
        """Phase-I path: one Gaussian from the gold pair alone, s = [1]."""
        comp = self.recognition.component(h_c, h_r_gold)
        eta = torch.randn(comp.mu.shape, generator=rng, dtype=comp.mu.dtype)
        eps = comp.mu + comp.sigma() * eta
        return generator_sample(self.gen_q, eps, "posterior"), comp

    def posterior_sample_mixture(self, enc, h_c_list, rng):
        """Full mixture posterior over gold + exemplar responses."""
        components = self.recognition(enc.h_c, enc.h_r)
        weights = posterior_weights(enc.h_c, h_c_list)
        eps = sample_posterior_noise(components, weights, rng,
                                     mode=self.config.posterior_sampling)
        return generator_sample(self.gen_q, eps, "posterior"), components, weights

    def prior_sample(self, h_c, rng):
        spec = self.prior(h_c)
        eps = sample_prior_noise(spec, rng)
        return generator_sample(self.gen_g, eps, "prior"), spec

    # -- reconstruction -----------------------------------------------------

    def gold_targets(self, pairs):
        return make_decoder_targets([p.response.tokens for p in pairs],
                                    self.config.max_utterance_len)

    def recon_per_token_nll(self, z, h_c, targets, lengths):
        token_logps, mask = self.decoder.teacher_forced(z, h_c, targets, lengths)
        return per_token_nll(token_logps, mask)

    def recon_sequence_logp(self, z, h_c, targets, lengths):
        token_logps, mask = self.decoder.teacher_forced(z, h_c, targets, lengths)
        nll, counts = sequence_nll(token_logps, mask)
        return -nll, counts

    # -- generation ---------------------------------------------------------

    def sample_responses(self, pair, n_samples, rng, mode="greedy"):
        """n_samples responses for one context via the prior path (fresh prior
        noise per sample, greedy decoding by default). Returns token-id lists."""
        self.eval()
        with torch.no_grad():
            h_c = self.encode_context_batch([[u.tokens for u in pair.context]])
            h_rep = h_c.expand(n_samples, -1)
            latent, _ = self.prior_sample(h_rep, rng)
            return self.decoder.generate(latent.z, h_rep, mode=mode, rng=rng)
