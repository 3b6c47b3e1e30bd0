import csv
import math

import pytest
import torch
import torch.nn.functional as F

from mixwae.corpus import SyntheticTaskSpec, build_vocabulary, \
    attach_vocabulary, generate_synthetic
from mixwae.curriculum import (CurriculumSchedule, Trainer, TrainState,
                               TrainingDiverged, load_checkpoint,
                               parameter_checksum, prepare_exemplars,
                               WARM_PREFIXES)
from mixwae.model import ExemplarWae, make_decoder_targets
from mixwae.retrieval import build_index
from mixwae.seq_model import ModelConfig


def tiny_setup(n_contexts=12, k=1, seed=5, modes=2, **cfg_kwargs):
    spec = SyntheticTaskSpec(n_contexts=n_contexts, modes_per_context=modes,
                             seed=seed)
    train, valid, test, manifest = generate_synthetic(spec)
    vocab = build_vocabulary(train)
    attach_vocabulary(valid, vocab)
    attach_vocabulary(test, vocab)
    exemplars = {}
    if k > 0:
        index = build_index(train)
        exemplars = prepare_exemplars(train + valid + test, index, k)
    defaults = dict(vocab_size=len(vocab), hidden_size=16, latent_dim=6,
                    embedding_dim=12, ffn_hidden=12, k_exemplars=k,
                    batch_size=8, seed=seed)
    defaults.update(cfg_kwargs)
    model = ExemplarWae(ModelConfig(**defaults))
    return model, train, valid, test, exemplars, vocab


def make_trainer(model, train, valid, exemplars, out_dir=None, **sched_kwargs):
    sched = CurriculumSchedule(**sched_kwargs)
    return Trainer(model, sched, train, valid, exemplars=exemplars,
                   out_dir=out_dir)


class TestSchedule:
    def test_invalid_schedule_rejected_before_training(self):
        model, train, valid, _, ex, _ = tiny_setup()
        with pytest.raises(ValueError):
            make_trainer(model, train, valid, ex, phase1_epochs=-1)

    def test_phase_never_regresses(self):
        state = TrainState()
        state.advance("II")
        state.advance("III")
        with pytest.raises(RuntimeError):
            state.advance("I")


class TestPhase1:
    def test_initial_loss_near_log_vocab(self):
        model, train, valid, _, ex, vocab = tiny_setup()
        tr = make_trainer(model, train, valid, ex)
        tr._main_opt = tr._fresh_optimizer(model.warm_parameters(), 1e-3)
        loss = tr.phase1_step(train[:8])
        assert abs(loss - math.log(len(vocab))) < 0.1 * math.log(len(vocab))

    def test_empty_batch_rejected(self):
        model, train, valid, _, ex, _ = tiny_setup()
        tr = make_trainer(model, train, valid, ex)
        with pytest.raises(ValueError):
            tr.phase1_step([])

    def test_gradients_reach_generator_q(self):
        model, train, valid, _, ex, _ = tiny_setup()
        enc, _ = model.encode_pairs(train[:8])
        rng = torch.Generator().manual_seed(0)
        latent, _ = model.posterior_sample_single(enc.h_c, enc.h_r[0], rng)
        targets, lengths = model.gold_targets(train[:8])
        loss = model.recon_per_token_nll(latent.z, enc.h_c, targets, lengths)
        loss.backward()
        grads = [p.grad for p in model.gen_q.parameters()]
        assert all(g is not None for g in grads)
        assert any(float(g.abs().sum()) > 0 for g in grads)

    def test_overfits_five_pairs(self):
        # desk-scale run oracle: teacher-forced perplexity < 1.5 by 200 steps
        model, train, valid, _, ex, _ = tiny_setup(hidden_size=24,
                                                   latent_dim=8,
                                                   embedding_dim=16)
        five = train[:5]
        tr = make_trainer(model, five, [], {})
        tr._main_opt = tr._fresh_optimizer(model.warm_parameters(), 5e-3)
        loss = math.inf
        for step in range(200):
            loss = tr.phase1_step(five)
            if math.exp(loss) < 1.5:
                break
        assert math.exp(loss) < 1.5


class TestPhase2:
    def _recompute_xi_loss(self, model, batch, sets, rng_state):
        """Independent re-evaluation of the exemplar objective: weights from
        cosine softmax over exemplar contexts, one single-component draw per
        exemplar, sequence log-probs, all recomposed from first principles."""
        g = torch.Generator()
        g.set_state(rng_state)
        enc, h_c_list = model.encode_pairs(batch, sets)
        cosines = torch.stack(
            [F.cosine_similarity(enc.h_c, h_ci, dim=-1)
             for h_ci in h_c_list[1:]], dim=-1)
        weights = torch.softmax(cosines, dim=-1)
        xi = torch.zeros(len(batch))
        for i in range(model.config.k_exemplars):
            comp = model.recognition.component(enc.h_c, enc.h_r[1 + i])
            eta = torch.randn(comp.mu.shape, generator=g, dtype=comp.mu.dtype)
            z = model.gen_q(comp.mu + comp.sigma() * eta)
            toks = [s.exemplars[i][0].response.tokens for s in sets]
            targets, lengths = make_decoder_targets(
                toks, model.config.max_utterance_len)
            logps, mask = model.decoder.teacher_forced(z, enc.h_c, targets,
                                                       lengths)
            xi = xi + weights[:, i] * (logps * mask).sum(dim=1)
        return float((-xi.mean()).detach())

    def test_missing_exemplars_rejected(self):
        model, train, valid, _, ex, _ = tiny_setup(k=1)
        tr = make_trainer(model, train, valid, {})
        tr._main_opt = tr._fresh_optimizer(model.warm_parameters(), 1e-3)
        with pytest.raises(ValueError, match="missing exemplars"):
            tr.phase2_step(train[:4])

    def test_k_zero_rejected(self):
        model, train, valid, _, ex, _ = tiny_setup(k=0)
        tr = make_trainer(model, train, valid, {})
        tr._main_opt = tr._fresh_optimizer(model.warm_parameters(), 1e-3)
        with pytest.raises(ValueError):
            tr.phase2_step(train[:4])

    def test_k1_weight_is_one_and_loss_is_exemplar_nll(self):
        model, train, valid, _, ex, _ = tiny_setup(k=1)
        tr = make_trainer(model, train, valid, ex)
        tr._main_opt = tr._fresh_optimizer(model.warm_parameters(), 1e-3)
        batch = train[:6]
        sets = [ex[p.pair_id] for p in batch]
        state = tr.rng.get_state()
        expected = self._recompute_xi_loss(model, batch, sets, state)
        loss, _ = tr.phase2_step(batch)
        assert loss == pytest.approx(expected, abs=1e-6)
        enc, h_c_list = model.encode_pairs(batch, sets)
        from mixwae.latent_mixture import posterior_weights
        w = posterior_weights(enc.h_c, h_c_list[1:])
        assert torch.allclose(w, torch.ones_like(w))

    def test_two_exemplar_recomputation_oracle(self):
        model, train, valid, _, ex, _ = tiny_setup(k=2, n_contexts=16)
        tr = make_trainer(model, train, valid, ex)
        tr._main_opt = tr._fresh_optimizer(model.warm_parameters(), 1e-3)
        batch = train[:5]
        state = tr.rng.get_state()
        expected = self._recompute_xi_loss(
            model, batch, [ex[p.pair_id] for p in batch], state)
        loss, _ = tr.phase2_step(batch)
        assert loss == pytest.approx(expected, abs=1e-6)

    def test_identical_exemplars_collapse_with_shared_noise(self):
        # weights are uniform over identical exemplars and sum to 1, so the
        # weighted sum equals the single-exemplar value when noise is shared
        model, train, valid, _, ex, _ = tiny_setup(k=2)
        batch = train[:4]
        sets = [ex[p.pair_id] for p in batch]
        twin_sets = []
        for s in sets:
            first = s.exemplars[0]
            twin = type(s)(exemplars=[first, first],
                           query_pair_id=s.query_pair_id)
            twin_sets.append(twin)
        enc, h_c_list = model.encode_pairs(batch, twin_sets)
        from mixwae.latent_mixture import posterior_weights
        w = posterior_weights(enc.h_c, h_c_list[1:])
        assert torch.allclose(w, torch.full_like(w, 0.5))
        eta = torch.randn(len(batch), model.config.latent_dim)
        xi = torch.zeros(len(batch))
        single = None
        for i in range(2):
            comp = model.recognition.component(enc.h_c, enc.h_r[1 + i])
            z = model.gen_q(comp.mu + comp.sigma() * eta)
            toks = [s.exemplars[i][0].response.tokens for s in twin_sets]
            targets, lengths = make_decoder_targets(toks, 40)
            logps, mask = model.decoder.teacher_forced(z, enc.h_c, targets,
                                                       lengths)
            seq_logp = (logps * mask).sum(dim=1)
            xi = xi + w[:, i] * seq_logp
            if single is None:
                single = seq_logp
        assert torch.allclose(xi, single, atol=1e-6)


class TestPhase3:
    def test_frozen_zero_critic_reduces_to_reconstruction(self):
        model, train, valid, _, ex, _ = tiny_setup(k=1, critic_steps=0)
        with torch.no_grad():
            for p in model.critic.parameters():
                p.zero_()
        tr = make_trainer(model, train, valid, ex)
        tr._main_opt = tr._fresh_optimizer(model.main_parameters(), 1e-3)
        tr._critic_opt = tr._fresh_optimizer(model.critic.parameters(), 5e-5)
        l3, d_term, recon = tr.phase3_step(train[:6])
        assert d_term == 0.0
        assert l3 == pytest.approx(recon, abs=1e-12)

    def test_l3_matches_independent_recomputation(self):
        # critic_steps=0 keeps the rng stream to the two main-path draws
        model, train, valid, _, ex, _ = tiny_setup(k=1, critic_steps=0)
        tr = make_trainer(model, train, valid, ex)
        tr._main_opt = tr._fresh_optimizer(model.main_parameters(), 1e-3)
        tr._critic_opt = tr._fresh_optimizer(model.critic.parameters(), 5e-5)
        batch = train[:5]
        sets = [ex[p.pair_id] for p in batch]
        g = torch.Generator()
        g.set_state(tr.rng.get_state())

        enc, h_c_list = model.encode_pairs(batch, sets)
        cosines = torch.stack(
            [F.cosine_similarity(enc.h_c, h_ci, dim=-1) for h_ci in h_c_list],
            dim=-1)
        weights = torch.softmax(cosines, dim=-1)
        comps = model.recognition(enc.h_c, enc.h_r)
        eps = torch.zeros(len(batch), model.config.latent_dim)
        for i, comp in enumerate(comps):
            eta = torch.randn(comp.mu.shape, generator=g, dtype=comp.mu.dtype)
            eps = eps + weights[:, i:i + 1] * (comp.mu + comp.sigma() * eta)
        z_post = model.gen_q(eps)
        spec = model.prior(enc.h_c)
        idx = torch.multinomial(spec.weights.detach(), 1, generator=g).squeeze(-1)
        mu = torch.stack([c.mu for c in spec.components], 1)[
            torch.arange(len(batch)), idx]
        sigma = torch.stack([c.sigma() for c in spec.components], 1)[
            torch.arange(len(batch)), idx]
        z_prior = model.gen_g(mu + sigma * torch.randn(mu.shape, generator=g))
        targets, lengths = model.gold_targets(batch)
        logps, mask = model.decoder.teacher_forced(z_post, enc.h_c, targets,
                                                   lengths)
        recon = float((-(logps * mask).sum() / mask.sum()).detach())
        d = float((model.critic(z_post, enc.h_c).mean()
                   - model.critic(z_prior, enc.h_c).mean()).detach())
        expected_l3 = recon + d

        l3, d_term, _ = tr.phase3_step(batch)
        assert l3 == pytest.approx(expected_l3, abs=1e-6)
        assert d_term == pytest.approx(d, abs=1e-6)

    def test_critic_weights_clipped_after_step(self):
        model, train, valid, _, ex, _ = tiny_setup(k=1, clip=0.01)
        tr = make_trainer(model, train, valid, ex)
        tr._main_opt = tr._fresh_optimizer(model.main_parameters(), 1e-3)
        tr._critic_opt = tr._fresh_optimizer(model.critic.parameters(), 5e-5)
        tr.phase3_step(train[:6])
        for p in model.critic.parameters():
            assert float(p.detach().abs().max()) <= 0.01 + 1e-12

    def test_validation_nll_improves_over_phase3(self):
        model, train, valid, _, ex, _ = tiny_setup(n_contexts=20, k=1, seed=2)
        tr = make_trainer(model, train, valid, ex, phase1_epochs=3,
                          phase2_epochs=0, phase3_epochs=0, patience=0)
        tr._main_opt = tr._fresh_optimizer(model.warm_parameters(), 1e-3)
        for _ in range(3):
            for batch in tr._batches(train):
                tr.phase1_step(batch)
        tr._reinit_cold_modules()
        tr._main_opt = tr._fresh_optimizer(model.main_parameters(), 1e-3)
        tr._critic_opt = tr._fresh_optimizer(model.critic.parameters(), 5e-5)
        nll_start = tr.validation_nll()
        for _ in range(4):
            for batch in tr._batches(train):
                tr.phase3_step(batch)
        nll_end = tr.validation_nll()
        assert nll_end <= nll_start


class TestConsistency:
    def test_phase1_equals_general_mixture_path_with_k0(self):
        # Eq. 6 computed through the dedicated single-Gaussian path equals
        # the full mixture machinery specialized to the gold component only
        model, train, valid, _, ex, _ = tiny_setup(k=0)
        batch = train[:6]
        enc, h_c_list = model.encode_pairs(batch)
        targets, lengths = model.gold_targets(batch)

        rng_a = torch.Generator().manual_seed(123)
        latent_a, _ = model.posterior_sample_single(enc.h_c, enc.h_r[0], rng_a)
        nll_a = model.recon_per_token_nll(latent_a.z, enc.h_c, targets, lengths)

        rng_b = torch.Generator().manual_seed(123)
        latent_b, comps, weights = model.posterior_sample_mixture(
            enc, h_c_list, rng_b)
        nll_b = model.recon_per_token_nll(latent_b.z, enc.h_c, targets, lengths)

        assert torch.allclose(weights.detach(), torch.ones_like(weights))
        assert float((latent_a.z - latent_b.z).detach().abs().max()) < 1e-6
        assert float(nll_a.detach()) == pytest.approx(float(nll_b.detach()),
                                                      abs=1e-6)

    def test_warm_checksums_preserved_across_handoffs(self, tmp_path):
        model, train, valid, _, ex, _ = tiny_setup(k=1)
        tr = make_trainer(model, train, valid, ex, out_dir=tmp_path / "run",
                          phase1_epochs=1, phase2_epochs=1, phase3_epochs=1,
                          patience=0)
        tr.run_curriculum()
        assert [(a, b) for a, b, _ in tr.handoffs] == [("I", "II"), ("II", "III")]

    def test_nan_loss_aborts_with_step(self):
        model, train, valid, _, ex, _ = tiny_setup()
        tr = make_trainer(model, train, valid, ex)
        tr._main_opt = tr._fresh_optimizer(model.warm_parameters(), 1e-3)
        tr.state.global_step = 41
        with torch.no_grad():
            model.embedding.weight.fill_(float("nan"))
            model.embedding.weight[0].zero_()
        with pytest.raises(TrainingDiverged, match="step 42"):
            tr.phase1_step(train[:4])


class TestRunCurriculum:
    def test_skip_all_runs_only_phase3_with_full_budget(self, tmp_path):
        model, train, valid, _, ex, _ = tiny_setup(k=1)
        tr = make_trainer(model, train, valid, ex, out_dir=tmp_path / "run",
                          phase1_epochs=2, phase2_epochs=1, phase3_epochs=1,
                          skip_all_curriculum=True, patience=0)
        tr.run_curriculum()
        with open(tmp_path / "run" / "train_log.csv") as f:
            rows = [r for r in csv.reader(f)
                    if r and not r[0].startswith("#")][1:]
        assert all(r[1] == "III" for r in rows)
        steps_per_epoch = math.ceil(len(train) / model.config.batch_size)
        assert len(rows) == 4 * steps_per_epoch   # 2 + 1 + 1 epochs

    def test_identical_seeds_identical_logs(self, tmp_path):
        logs = []
        for name in ("a", "b"):
            model, train, valid, _, ex, _ = tiny_setup(k=1, seed=9)
            tr = make_trainer(model, train, valid, ex,
                              out_dir=tmp_path / name, phase1_epochs=1,
                              phase2_epochs=1, phase3_epochs=1, patience=0)
            tr.run_curriculum()
            with open(tmp_path / name / "train_log.csv") as f:
                logs.append([r[:-1] for r in csv.reader(f)])  # drop wallclock
        assert logs[0] == logs[1]

    def test_checkpoints_written_at_phase_boundaries(self, tmp_path):
        model, train, valid, _, ex, _ = tiny_setup(k=1)
        tr = make_trainer(model, train, valid, ex, out_dir=tmp_path / "run",
                          phase1_epochs=1, phase2_epochs=1, phase3_epochs=1,
                          patience=0)
        tr.run_curriculum()
        for name in ("phase1.pt", "phase2.pt", "phase3.pt", "best.pt"):
            assert (tmp_path / "run" / name).exists(), name

    def test_checkpoint_round_trip_bit_identical(self, tmp_path):
        model, train, valid, _, ex, _ = tiny_setup(k=1)
        tr = make_trainer(model, train, valid, ex, out_dir=tmp_path / "run",
                          phase1_epochs=1, phase2_epochs=0, phase3_epochs=0,
                          patience=0)
        tr.run_curriculum()
        reloaded, payload = load_checkpoint(tmp_path / "run" / "phase3.pt")
        for name, tensor in model.state_dict().items():
            assert torch.equal(tensor, reloaded.state_dict()[name]), name
        assert payload["format_version"] == 1
        assert payload["phase"] == "III"
        assert "config_hash" in payload

    def test_checkpoint_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "x.pt"
        torch.save({"kind": "other"}, path)
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_k0_run_skips_phase2(self, tmp_path):
        model, train, valid, _, ex, _ = tiny_setup(k=0)
        tr = make_trainer(model, train, valid, {}, out_dir=tmp_path / "run",
                          phase1_epochs=1, phase2_epochs=1, phase3_epochs=1,
                          patience=0)
        tr.run_curriculum()
        with open(tmp_path / "run" / "train_log.csv") as f:
            rows = [r for r in csv.reader(f)
                    if r and not r[0].startswith("#")][1:]
        phases = {r[1] for r in rows}
        assert phases == {"I", "III"}
