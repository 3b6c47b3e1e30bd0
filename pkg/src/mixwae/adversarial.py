"""Critic and the Wasserstein matching objective between latent samples.

disc_loss = E[D(z_post, c)] - E[D(z_prior, c)]. The critic performs ascent on
this quantity (with its weights clamped to [-clip, clip] after every step,
the weight-clipping Lipschitz constraint of the WGAN formulation), while the
generator side minimizes phase3_loss = recon_nll + disc_loss. Minimizing the
disc term over the posterior path pushes D(z_post) down and over the prior
path pushes D(z_prior) up, i.e. both latent distributions move toward each
other; the critic's ascent keeps the witness function sharp. This is the
min-max equivalent of maximizing -W(q||p) + E[log p(r|c,z)].
"""

import torch
import torch.nn as nn


class Critic(nn.Module):
    """D([z; h(c)]): 3-layer ReLU feed-forward net with a scalar linear output."""

    def __init__(self, latent_dim, hidden_size, width=None):
        super().__init__()
        width = width or max(latent_dim, hidden_size)
        self.net = nn.Sequential(
            nn.Linear(latent_dim + hidden_size, width), nn.ReLU(),
            nn.Linear(width, width), nn.ReLU(),
            nn.Linear(width, 1),
        )

    def forward(self, z, h_c):
        if z.shape[0] != h_c.shape[0]:
            raise ValueError("z and h_c batch sizes differ")
        return self.net(torch.cat([z, h_c], dim=-1)).squeeze(-1)


def disc_loss(critic, z_post, z_prior, h_c):
    """Mean critic score on posterior samples minus mean score on prior samples."""
    if z_post.shape[0] == 0 or z_prior.shape[0] == 0:
        raise ValueError("disc_loss requires non-empty batches")
    if z_post.shape[0] != z_prior.shape[0]:
        raise ValueError("posterior and prior batches must have equal size")
    return critic(z_post, h_c).mean() - critic(z_prior, h_c).mean()


def phase3_loss(recon_nll, disc):
    """Total third-phase loss: reconstruction NLL plus the critic term."""
    for term in (recon_nll, disc):
        value = term.detach() if torch.is_tensor(term) else torch.tensor(term)
        if not torch.isfinite(value).all():
            raise FloatingPointError("non-finite loss term")
    return recon_nll + disc


def clip_critic_weights(critic, clip):
    """Clamp every critic parameter to [-clip, clip] in place."""
    with torch.no_grad():
        for p in critic.parameters():
            p.clamp_(-clip, clip)


def critic_params_within(critic, clip):
    return all(bool((p.abs() <= clip + 1e-12).all()) for p in critic.parameters())
