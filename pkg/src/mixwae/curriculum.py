"""Three-phase curriculum trainer.

Phase I trains a simple WAE: single-Gaussian posterior from the gold response
only, reconstruction loss, no prior and no critic. Phase II keeps the same
warm components and reconstructs each retrieved exemplar response from its own
single-component posterior draw, weighted by context similarity (weights
renormalized over the exemplars only, matching the summation range). Phase III
trains the full model: mixture posterior over gold + exemplars, mixture prior,
and a weight-clipped critic updated several times per main step; the main step
minimizes reconstruction NLL + disc term.

Skipped phases donate their epochs to phase III so every ablation runs the
same total number of main-model update steps.
"""

import csv
import hashlib
import json
import math
import random
import time
from contextlib import contextmanager
from dataclasses import dataclass, asdict
from pathlib import Path

import torch

from .adversarial import disc_loss, phase3_loss, clip_critic_weights
from .latent_mixture import (GaussianComponent, MixtureSpec, posterior_weights,
                             sample_posterior_noise, sample_prior_noise,
                             generator_sample)
from .model import ExemplarWae, make_decoder_targets
from .retrieval import retrieve
from .seq_model import ModelConfig

CHECKPOINT_VERSION = 1
PHASE_ORDER = ["I", "II", "III", "done"]


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; carries the offending global step."""

    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class CurriculumSchedule:
    phase1_epochs: int = 10
    phase2_epochs: int = 10
    phase3_epochs: int = 20
    lr_phase1: float = 1e-3
    lr_phase2: float = 1e-3
    lr_phase3: float = 1e-3
    patience: int = 5            # early stopping on valid recon NLL; 0 disables
    skip_phase1: bool = False
    skip_phase2: bool = False
    skip_all_curriculum: bool = False

    def validate(self):
        for name in ("phase1_epochs", "phase2_epochs", "phase3_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("lr_phase1", "lr_phase2", "lr_phase3"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainState:
    phase: str = "I"
    epoch: int = 0
    global_step: int = 0
    best_valid_nll: float = math.inf
    final_valid_nll: float = math.inf

    def advance(self, phase):
        if PHASE_ORDER.index(phase) < PHASE_ORDER.index(self.phase):
            raise RuntimeError(f"phase cannot regress: {self.phase} -> {phase}")
        self.phase = phase


def config_hash(conf):
    blob = json.dumps(conf, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def parameter_checksum(model, prefixes=None):
    """sha256 over the raw bytes of (a subset of) the model parameters."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        if prefixes is not None and not name.startswith(tuple(prefixes)):
            continue
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


WARM_PREFIXES = ("embedding.", "utt_encoder.", "ctx_encoder.", "decoder.",
                 "recognition.", "gen_q.")


def prepare_exemplars(pairs, index, k, exclude_self=True):
    """Precompute one ExemplarSet per pair (done once per training run)."""
    return {p.pair_id: retrieve(index, p, k, exclude_self=exclude_self)
            for p in pairs}


def save_checkpoint(model, state, schedule, path, rng=None, extra_echo=None,
                    optimizer_state=None):
    conf = model.config.to_dict()
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "mixwae-checkpoint",
        "config": conf,
        "config_hash": config_hash(conf),
        "schedule": schedule.to_dict() if schedule is not None else None,
        "phase": state.phase,
        "epoch": state.epoch,
        "global_step": state.global_step,
        "best_valid_nll": state.best_valid_nll,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer_state,
        "sample_rng_state": rng.get_state() if rng is not None else None,
        "run_config": extra_echo,
    }
    torch.save(payload, path)


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "mixwae-checkpoint":
        raise ValueError(f"{path} is not a mixwae checkpoint")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {path}")
    model = ExemplarWae(ModelConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["model_state"])
    return model, payload


class Trainer:
    """Owns the model parameters and runs the curriculum on one thread."""

    def __init__(self, model, schedule, train_pairs, valid_pairs=None,
                 exemplars=None, out_dir=None, ablation_tag=None,
                 extra_echo=None):
        if not train_pairs:
            raise ValueError("empty training corpus")
        self.model = model
        self.cfg = model.config
        self.schedule = schedule.validate()
        self.train_pairs = train_pairs
        self.valid_pairs = valid_pairs or []
        self.exemplars = exemplars or {}
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.ablation_tag = ablation_tag
        self.extra_echo = extra_echo
        self.state = TrainState()
        self.rng = torch.Generator().manual_seed(self.cfg.seed)
        self.shuffle_rng = random.Random(self.cfg.seed)
        self.handoffs = []
        self._log_file = None
        self._log_writer = None
        self._t0 = time.perf_counter()
        self._main_opt = None
        self._critic_opt = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._open_log()

    # -- logging -------------------------------------------------------------

    def _open_log(self):
        self._log_file = open(self.out_dir / "train_log.csv", "w", newline="")
        self._log_file.write(f"# config_hash: {config_hash(self.cfg.to_dict())}\n")
        if self.ablation_tag:
            self._log_file.write(f"# ablation: {self.ablation_tag}\n")
        self._log_writer = csv.writer(self._log_file)
        self._log_writer.writerow(["step", "phase", "epoch", "loss_recon",
                                   "loss_disc", "loss_total", "nll_per_token",
                                   "wallclock"])

    def _log(self, phase, epoch, recon, disc, total, per_token):
        for name, value in (("loss_recon", recon), ("loss_disc", disc),
                            ("loss_total", total)):
            if not math.isfinite(value):
                raise TrainingDiverged(self.state.global_step,
                                       f"{name} is {value} in phase {phase}")
        if self._log_writer is not None:
            self._log_writer.writerow([
                self.state.global_step, phase, epoch,
                f"{recon:.8g}", f"{disc:.8g}", f"{total:.8g}",
                f"{per_token:.8g}", f"{time.perf_counter() - self._t0:.3f}"])
            self._log_file.flush()

    def close(self):
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None

    # -- batching ------------------------------------------------------------

    def _batches(self, pairs):
        order = list(range(len(pairs)))
        self.shuffle_rng.shuffle(order)
        bs = self.cfg.batch_size
        for lo in range(0, len(order), bs):
            yield [pairs[j] for j in order[lo: lo + bs]]

    def _exemplar_sets(self, batch):
        sets = []
        for pair in batch:
            es = self.exemplars.get(pair.pair_id)
            if es is None:
                raise ValueError(f"missing exemplars for pair {pair.pair_id}")
            sets.append(es)
        return sets

    def _fresh_optimizer(self, params, lr):
        return torch.optim.RMSprop(params, lr=lr)

    def _finite(self, value, what):
        if not math.isfinite(value):
            raise TrainingDiverged(self.state.global_step,
                                   f"{what} is {value}")
        return value

    @contextmanager
    def _abort_on_nonfinite(self):
        """Convert low-level non-finite guards into a step-stamped abort."""
        try:
            yield
        except FloatingPointError as e:
            raise TrainingDiverged(self.state.global_step + 1, str(e)) from e

    # -- phase steps ----------------------------------------------------------

    def phase1_step(self, batch):
        """One gradient step on the gold-only reconstruction loss (per token)."""
        if not batch:
            raise ValueError("empty batch")
        with self._abort_on_nonfinite():
            enc, _ = self.model.encode_pairs(batch)
            latent, _ = self.model.posterior_sample_single(enc.h_c, enc.h_r[0],
                                                           self.rng)
            targets, lengths = self.model.gold_targets(batch)
            loss = self.model.recon_per_token_nll(latent.z, enc.h_c, targets,
                                                  lengths)
            self._main_opt.zero_grad()
            loss.backward()
            self._main_opt.step()
        self.state.global_step += 1
        return self._finite(float(loss.detach()), "phase-1 loss")

    def phase2_step(self, batch):
        """One step on the exemplar-reconstruction objective.

        xi = sum_i s_i * log p(r_i | c, z_i) with sequence-level log-probs,
        z_i drawn from the exemplar's own single-component posterior; the
        s weights are softmax-renormalized over the exemplars only. Returns
        the minimized loss, -mean(xi).
        """
        if not batch:
            raise ValueError("empty batch")
        if self.cfg.k_exemplars < 1:
            raise ValueError("phase II requires k_exemplars >= 1")
        sets = self._exemplar_sets(batch)
        with self._abort_on_nonfinite():
            enc, h_c_list = self.model.encode_pairs(batch, sets)
            ex_weights = posterior_weights(enc.h_c, h_c_list[1:])   # (B, k)
            xi = None
            weighted_tokens = None
            for i in range(self.cfg.k_exemplars):
                latent_i, _ = self.model.posterior_sample_single(
                    enc.h_c, enc.h_r[1 + i], self.rng)
                ex_tokens = [s.exemplars[i][0].response.tokens for s in sets]
                targets_i, lengths_i = make_decoder_targets(
                    ex_tokens, self.cfg.max_utterance_len)
                logp_i, counts_i = self.model.recon_sequence_logp(
                    latent_i.z, enc.h_c, targets_i, lengths_i)
                term = ex_weights[:, i] * logp_i
                xi = term if xi is None else xi + term
                wt = ex_weights[:, i] * counts_i
                weighted_tokens = wt if weighted_tokens is None else weighted_tokens + wt
            loss = -xi.mean()
            self._main_opt.zero_grad()
            loss.backward()
            self._main_opt.step()
        self.state.global_step += 1
        per_token = float(loss.detach()) / max(float(weighted_tokens.detach().mean()), 1e-9)
        return self._finite(float(loss.detach()), "phase-2 loss"), per_token

    def phase3_step(self, batch):
        """Critic ascent (critic_steps times, clipped) then one main step on
        recon + disc. Returns (L3, L_disc) from the main step."""
        if not batch:
            raise ValueError("empty batch")
        k = self.cfg.k_exemplars
        sets = self._exemplar_sets(batch) if k > 0 else None
        with self._abort_on_nonfinite():
            return self._phase3_inner(batch, sets)

    def _phase3_inner(self, batch, sets):
        k = self.cfg.k_exemplars
        enc, h_c_list = self.model.encode_pairs(batch, sets)

        # frozen distributions for the critic's inner loop
        h_c_d = enc.h_c.detach()
        if k > 0:
            comps = self.model.recognition(enc.h_c, enc.h_r)
            weights = posterior_weights(enc.h_c, h_c_list)
        else:
            comps = [self.model.recognition.component(enc.h_c, enc.h_r[0])]
            weights = torch.ones((h_c_d.shape[0], 1), dtype=h_c_d.dtype)
        comps_d = [GaussianComponent(c.mu.detach(), c.log_var.detach())
                   for c in comps]
        weights_d = weights.detach()
        spec = self.model.prior(enc.h_c)
        spec_d = MixtureSpec(
            components=[GaussianComponent(c.mu.detach(), c.log_var.detach())
                        for c in spec.components],
            weights=spec.weights.detach())

        for _ in range(self.cfg.critic_steps):
            eps_post = sample_posterior_noise(comps_d, weights_d, self.rng,
                                              mode=self.cfg.posterior_sampling)
            z_post = self.model.gen_q(eps_post).detach()
            eps_prior = sample_prior_noise(spec_d, self.rng)
            z_prior = self.model.gen_g(eps_prior).detach()
            d = disc_loss(self.model.critic, z_post, z_prior, h_c_d)
            self._critic_opt.zero_grad()
            (-d).backward()                      # ascent on the disc loss
            self._critic_opt.step()
            clip_critic_weights(self.model.critic, self.cfg.clip)

        # main step: everything but the critic
        eps_post = sample_posterior_noise(comps, weights, self.rng,
                                          mode=self.cfg.posterior_sampling)
        latent_post = generator_sample(self.model.gen_q, eps_post, "posterior")
        eps_prior = sample_prior_noise(spec, self.rng)
        latent_prior = generator_sample(self.model.gen_g, eps_prior, "prior")
        targets, lengths = self.model.gold_targets(batch)
        recon = self.model.recon_per_token_nll(latent_post.z, enc.h_c,
                                               targets, lengths)
        d_term = disc_loss(self.model.critic, latent_post.z, latent_prior.z,
                           enc.h_c)
        l3 = phase3_loss(recon, d_term)
        self._main_opt.zero_grad()
        self._critic_opt.zero_grad()
        l3.backward()
        self._main_opt.step()
        self.state.global_step += 1
        return (self._finite(float(l3.detach()), "phase-3 loss"),
                float(d_term.detach()), float(recon.detach()))

    # -- validation ----------------------------------------------------------

    def validation_nll(self, eval_seed=None):
        """Posterior per-token reconstruction NLL over the validation split."""
        if not self.valid_pairs:
            return math.nan
        rng = torch.Generator().manual_seed(
            self.cfg.seed + 7919 if eval_seed is None else eval_seed)
        self.model.eval()
        total, count = 0.0, 0.0
        with torch.no_grad():
            for batch in self._eval_batches(self.valid_pairs):
                k = self.cfg.k_exemplars
                sets = self._exemplar_sets(batch) if k > 0 else None
                enc, h_c_list = self.model.encode_pairs(batch, sets)
                if k > 0:
                    latent, _, _ = self.model.posterior_sample_mixture(
                        enc, h_c_list, rng)
                else:
                    latent, _ = self.model.posterior_sample_single(
                        enc.h_c, enc.h_r[0], rng)
                targets, lengths = self.model.gold_targets(batch)
                token_logps, mask = self.model.decoder.teacher_forced(
                    latent.z, enc.h_c, targets, lengths)
                total += float(-(token_logps * mask).sum())
                count += float(mask.sum())
        self.model.train()
        return total / max(count, 1.0)

    def _eval_batches(self, pairs):
        bs = self.cfg.batch_size
        for lo in range(0, len(pairs), bs):
            yield pairs[lo: lo + bs]

    # -- phase runners ---------------------------------------------------------

    def _reinit_cold_modules(self):
        """PriNet, G and the critic start fresh at phase III (unused before)."""
        torch.manual_seed(self.cfg.seed + 1013)
        for module in self.model.cold_modules().values():
            if hasattr(module, "reset_parameters"):
                module.reset_parameters()
            else:
                for m in module.modules():
                    if hasattr(m, "reset_parameters"):
                        m.reset_parameters()

    def _checkpoint(self, name):
        if self.out_dir is not None:
            save_checkpoint(self.model, self.state, self.schedule,
                            self.out_dir / name, rng=self.rng,
                            extra_echo=self.extra_echo)

    def _handoff(self, from_phase, to_phase):
        before = parameter_checksum(self.model, WARM_PREFIXES)
        self.state.advance(to_phase)
        after = parameter_checksum(self.model, WARM_PREFIXES)
        if before != after:
            raise RuntimeError(
                f"warm parameters changed across {from_phase}->{to_phase} hand-off")
        self.handoffs.append((from_phase, to_phase, before))

    def run_curriculum(self):
        """Execute phases I -> II -> III honoring skip flags; returns TrainState."""
        sched = self.schedule
        k = self.cfg.k_exemplars
        run1 = not (sched.skip_phase1 or sched.skip_all_curriculum)
        run2 = (not (sched.skip_phase2 or sched.skip_all_curriculum)) and k > 0
        p3_epochs = sched.phase3_epochs
        if not run1:
            p3_epochs += sched.phase1_epochs
        if not run2:
            p3_epochs += sched.phase2_epochs

        if run1 and sched.phase1_epochs > 0:
            self._main_opt = self._fresh_optimizer(
                self.model.warm_parameters(), sched.lr_phase1)
            for epoch in range(sched.phase1_epochs):
                self.state.epoch = epoch
                for batch in self._batches(self.train_pairs):
                    loss = self.phase1_step(batch)
                    self._log("I", epoch, loss, 0.0, loss, loss)
            self._checkpoint("phase1.pt")
        self._handoff("I", "II")

        if run2 and sched.phase2_epochs > 0:
            self._main_opt = self._fresh_optimizer(
                self.model.warm_parameters(), sched.lr_phase2)
            for epoch in range(sched.phase2_epochs):
                self.state.epoch = epoch
                for batch in self._batches(self.train_pairs):
                    loss, per_token = self.phase2_step(batch)
                    self._log("II", epoch, loss, 0.0, loss, per_token)
            self._checkpoint("phase2.pt")
        self._handoff("II", "III")

        self._reinit_cold_modules()
        self._main_opt = self._fresh_optimizer(
            self.model.main_parameters(), sched.lr_phase3)
        self._critic_opt = self._fresh_optimizer(
            self.model.critic.parameters(), self.cfg.critic_lr)
        best, stale = math.inf, 0
        for epoch in range(p3_epochs):
            self.state.epoch = epoch
            for batch in self._batches(self.train_pairs):
                l3, d_term, recon = self.phase3_step(batch)
                self._log("III", epoch, recon, d_term, l3, recon)
            valid_nll = self.validation_nll()
            if self.valid_pairs:
                if valid_nll < best - 1e-6:
                    best, stale = valid_nll, 0
                    self.state.best_valid_nll = best
                    self._checkpoint("best.pt")
                else:
                    stale += 1
                if sched.patience and stale >= sched.patience:
                    break
        self.state.final_valid_nll = self.validation_nll()
        self._checkpoint("phase3.pt")
        self.state.advance("done")
        self.close()
        return self.state
