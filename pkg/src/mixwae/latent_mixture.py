"""Gaussian mixture posterior/prior over the latent space.

The recognition network maps [h(c); h(r_i)] to one Gaussian component per
response (gold at index 0, exemplars after); component weights are a softmax
over cosine similarities between the current context and each exemplar's
context. The prior network maps h(c) to a full mixture (weights, means,
log-variances) with per-component heads. Generators Q and G transform mixture
noise into latent samples.

Sampling is reparameterized. The default posterior mode is the weighted sum
of per-component draws, eps = sum_i s_i (mu_i + sigma_i * eta_i), which keeps
every parameter, including s_i, on the gradient path; the categorical mode
draws a hard component index instead (gradient only through the selected
component). Prior draws always use a hard index; the draw itself carries no
gradient through the selection.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
NORM_GUARD = 1e-12


@dataclass
class GaussianComponent:
    mu: torch.Tensor       # (B, latent_dim)
    log_var: torch.Tensor  # (B, latent_dim), clamped to [-10, 10]

    def sigma(self):
        return torch.exp(0.5 * self.log_var)


@dataclass
class MixtureSpec:
    """Ordered components plus normalized weights; shared by posterior and prior."""
    components: list             # list of GaussianComponent
    weights: torch.Tensor        # (B, n), rows on the simplex

    def validate(self, atol=1e-6):
        if len(self.components) != self.weights.shape[-1]:
            raise ValueError("weight count must equal component count")
        sums = self.weights.sum(dim=-1)
        if not torch.all((sums - 1.0).abs() < atol):
            raise ValueError("mixture weights must sum to 1")
        if not torch.all(self.weights > 0):
            raise ValueError("mixture weights must be strictly positive")
        return self

    def summary(self):
        """Weights, mean norms and variance traces, for inspection dumps."""
        return {
            "n_components": len(self.components),
            "weights": self.weights.mean(dim=0).tolist(),
            "mean_norms": [float(c.mu.norm(dim=-1).mean()) for c in self.components],
            "var_traces": [float(c.log_var.exp().sum(dim=-1).mean())
                           for c in self.components],
        }


@dataclass
class LatentSample:
    z: torch.Tensor        # (B, latent_dim)
    source: str            # "posterior" | "prior"
    noise: torch.Tensor    # the underlying eps that produced z


class RecognitionNetwork(nn.Module):
    """[h(c); h(r_i)] -> (mu_i, log sigma_i^2), one component per response.

    f is a 2-layer tanh feed-forward net; the final affine head is shared
    across all components.
    """

    def __init__(self, hidden_size, latent_dim, ffn_hidden):
        super().__init__()
        self.latent_dim = latent_dim
        self.f = nn.Sequential(
            nn.Linear(2 * hidden_size, ffn_hidden), nn.Tanh(),
            nn.Linear(ffn_hidden, ffn_hidden), nn.Tanh(),
        )
        self.head = nn.Linear(ffn_hidden, 2 * latent_dim)

    def component(self, h_c, h_r):
        if h_c.shape != h_r.shape:
            raise ValueError(
                f"context/response encoding shapes differ: {tuple(h_c.shape)} "
                f"vs {tuple(h_r.shape)}")
        out = self.head(self.f(torch.cat([h_c, h_r], dim=-1)))
        mu, log_var = out.chunk(2, dim=-1)
        return GaussianComponent(mu, torch.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX))

    def forward(self, h_c, h_r_list):
        return [self.component(h_c, h_r) for h_r in h_r_list]


def posterior_weights(h_c, h_c_list):
    """Softmax over cos(h(c), h(c_i)); index 0 is the gold pair's own context."""
    norm_c = h_c.norm(dim=-1)
    if torch.any(norm_c < NORM_GUARD):
        raise ValueError("zero-norm context encoding: cosine undefined")
    cosines = []
    for h_ci in h_c_list:
        norm_i = h_ci.norm(dim=-1)
        if torch.any(norm_i < NORM_GUARD):
            raise ValueError("zero-norm exemplar context encoding: cosine undefined")
        cosines.append((h_c * h_ci).sum(dim=-1) / (norm_c * norm_i))
    return F.softmax(torch.stack(cosines, dim=-1), dim=-1)   # (B, k+1)


class PriorNetwork(nn.Module):
    """h(c) -> mixture weights, means and log-variances of n prior components.

    g is a 2-layer tanh feed-forward net; each component i has its own affine
    head producing [alpha_i; mu_i; log sigma_i^2] (stacked as row blocks of a
    single linear map).
    """

    def __init__(self, hidden_size, latent_dim, ffn_hidden, n_components):
        super().__init__()
        if n_components < 1:
            raise ValueError("prior needs at least one component")
        self.latent_dim = latent_dim
        self.n_components = n_components
        self.g = nn.Sequential(
            nn.Linear(hidden_size, ffn_hidden), nn.Tanh(),
            nn.Linear(ffn_hidden, ffn_hidden), nn.Tanh(),
        )
        self.heads = nn.Linear(ffn_hidden, n_components * (1 + 2 * latent_dim))
        self.reset_parameters()

    def reset_parameters(self):
        """Default linear init, then spread the component centers so freshly
        initialized components do not start collapsed onto one point."""
        for m in self.modules():
            if isinstance(m, nn.Linear):
                m.reset_parameters()
        with torch.no_grad():
            bias = self.heads.bias.view(self.n_components,
                                        1 + 2 * self.latent_dim)
            bias[:, 1:1 + self.latent_dim].uniform_(-2.0, 2.0)

    def forward(self, h_c):
        B = h_c.shape[0]
        out = self.heads(self.g(h_c)).view(B, self.n_components, 1 + 2 * self.latent_dim)
        alpha = out[:, :, 0]
        mu = out[:, :, 1:1 + self.latent_dim]
        log_var = torch.clamp(out[:, :, 1 + self.latent_dim:], LOG_VAR_MIN, LOG_VAR_MAX)
        weights = F.softmax(alpha, dim=-1)
        components = [GaussianComponent(mu[:, i], log_var[:, i])
                      for i in range(self.n_components)]
        return MixtureSpec(components=components, weights=weights)


def _select_component(components, weights, rng):
    """Hard categorical draw; mu/sigma of the chosen component stay on the
    gradient path, the selection itself does not."""
    idx = torch.multinomial(weights.detach(), 1, generator=rng).squeeze(-1)  # (B,)
    onehot = F.one_hot(idx, num_classes=weights.shape[-1]).to(weights.dtype)
    mus = torch.stack([c.mu for c in components], dim=1)          # (B, n, D)
    sigmas = torch.stack([c.sigma() for c in components], dim=1)  # (B, n, D)
    mu = (onehot.unsqueeze(-1) * mus).sum(dim=1)
    sigma = (onehot.unsqueeze(-1) * sigmas).sum(dim=1)
    return mu, sigma


def sample_posterior_noise(components, weights, rng=None, mode="weighted_sum"):
    """Draw the posterior mixture noise eps-hat, reparameterized.

    weighted_sum: eps = sum_i s_i (mu_i + sigma_i * eta_i) with independent
    eta_i ~ N(0, I); differentiable through every mu_i, sigma_i and s_i.
    categorical: eps = mu_j + sigma_j * eta for j ~ Cat(s); gradient flows
    only through the chosen component.
    """
    if mode == "weighted_sum":
        eps = None
        for i, comp in enumerate(components):
            eta = torch.randn(comp.mu.shape, generator=rng, dtype=comp.mu.dtype,
                              device=comp.mu.device)
            draw = comp.mu + comp.sigma() * eta
            term = weights[:, i:i + 1] * draw
            eps = term if eps is None else eps + term
        return eps
    if mode == "categorical":
        mu, sigma = _select_component(components, weights, rng)
        eta = torch.randn(mu.shape, generator=rng, dtype=mu.dtype, device=mu.device)
        return mu + sigma * eta
    raise ValueError(f"unknown posterior sampling mode {mode!r}")


def sample_prior_noise(spec, rng=None):
    """Draw eps-tilde from the prior mixture: hard component index, then a
    reparameterized Gaussian draw within it."""
    mu, sigma = _select_component(spec.components, spec.weights, rng)
    eta = torch.randn(mu.shape, generator=rng, dtype=mu.dtype, device=mu.device)
    return mu + sigma * eta


class FeedForwardGenerator(nn.Module):
    """3-layer ReLU feed-forward map, latent_dim -> latent_dim, linear output.

    Used for both Q (posterior noise -> latent sample) and G (prior noise ->
    latent sample).
    """

    def __init__(self, latent_dim):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(latent_dim, latent_dim), nn.ReLU(),
            nn.Linear(latent_dim, latent_dim), nn.ReLU(),
            nn.Linear(latent_dim, latent_dim),
        )

    def forward(self, eps):
        return self.net(eps)


def generator_sample(generator, eps, source):
    z = generator(eps)
    if not torch.isfinite(z).all():
        raise FloatingPointError(f"non-finite latent sample from {source} path")
    return LatentSample(z=z, source=source, noise=eps)
