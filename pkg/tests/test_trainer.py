import copy
import csv
import math

import numpy as np
import pytest
import torch

from vesselgan.exceptions import ConfigurationError, TrainingDivergedError
from vesselgan.losses import supervised_loss
from vesselgan.nets import as_batch, parameter_digest
from vesselgan.trainer import TrainConfig, Trainer


def _toy(n=10, size=48, seed=0):
    """Separable toy patches: a bright vertical bar marks the vessel pixels."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, -0.6, (n, size, size)).astype(np.float32)
    y = np.zeros((n, size, size), np.int64)
    for i in range(n):
        c = rng.integers(8, size - 8)
        x[i, :, c - 2:c + 2] = rng.uniform(0.6, 1.0)
        y[i, :, c - 2:c + 2] = 1
    return x, y


def _config(**kw):
    base = dict(batch_size=4, epochs=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.lr_D, c.lr_G, c.batch_size, c.epochs, c.matching_layer) == (1e-4, 1e-4, 64, 50, "Con1")
        assert c.adam_betas == (0.5, 0.999) and c.generator_objective == "feature_matching"

    @pytest.mark.parametrize("kw", [{"lr_D": 0}, {"lr_G": -1e-4}, {"batch_size": 1}, {"epochs": 0},
                                    {"generator_objective": "wgan"}, {"pooling": "median"}, {"adam_betas": (0.5, 1.5)}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kw).validate()

    def test_file_roundtrip(self, tmp_path):
        c = TrainConfig(batch_size=8, head="cp", adam_betas=(0.9, 0.99), semi_supervised=False)
        path = tmp_path / "train.toml"
        path.write_text(c.to_toml())
        back = TrainConfig.from_file(path)
        assert back == c and back.head == "center_pixel" and back.digest() == c.digest()

    def test_file_errors(self, tmp_path):
        bad = {"unknown.toml": "wat = 1\n", "nested.toml": "[section]\nlr_D = 1\n", "syntax.toml": "lr_D = = 1\n",
               "type.toml": 'epochs = "many"\n'}
        for name, text in bad.items():
            (tmp_path / name).write_text(text)
            with pytest.raises(ConfigurationError):
                TrainConfig.from_file(tmp_path / name)
        with pytest.raises(ConfigurationError):
            TrainConfig.from_file(tmp_path / "missing.toml")

    def test_mapping_coercion(self):
        c = TrainConfig.from_mapping({"epochs": "3", "semi_supervised": "false", "adam_betas": "0.1,0.2"})
        assert c.epochs == 3 and c.semi_supervised is False and c.adam_betas == (0.1, 0.2)

    def test_missing_matching_layer(self):
        with pytest.raises(ConfigurationError):
            Trainer(_config(head="center_pixel", matching_layer="Con1"))
        Trainer(_config(head="center_pixel", matching_layer="C5"))


class TestDiscriminatorStep:
    def test_reduces_to_supervised(self):
        x, y = _toy(4)
        t = Trainer(_config(dropout_keep=1.0))
        ref = copy.deepcopy(t.D)
        opt = torch.optim.Adam(ref.parameters(), lr=1e-4, betas=(0.5, 0.999))
        report = t.discriminator_step(x, y, x[:0], None)
        loss = supervised_loss(ref(as_batch(x))[0], torch.as_tensor(y), "structured")
        opt.zero_grad()
        loss.backward()
        opt.step()
        assert report.L_adv == 0 and report.L_unsup == 0 and report.L_D == report.L_sup
        assert report.L_sup == pytest.approx(loss.item(), abs=1e-7)
        for (n, p), q in zip(t.D.named_parameters(), ref.parameters()):
            assert torch.equal(p, q), n

    def test_determinism(self):
        x, y = _toy(6)
        digests = []
        for _ in range(2):
            t = Trainer(_config(seed=11))
            for _ in range(2):
                t.discriminator_step(x[:3], y[:3], x[3:], t.sample_z(3))
            digests.append(parameter_digest(t.D))
        assert digests[0] == digests[1]

    def test_parameter_isolation(self):
        x, y = _toy(4)
        t = Trainer(_config())
        g0, d0 = parameter_digest(t.G), parameter_digest(t.D)
        t.discriminator_step(x[:2], y[:2], x[2:], t.sample_z(2))
        assert parameter_digest(t.G) == g0 and parameter_digest(t.D) != d0
        d1 = parameter_digest(t.D)
        t.generator_step(t.sample_z(2), x[2:])
        assert parameter_digest(t.D) == d1 and parameter_digest(t.G) != g0

    def test_empty_labeled_flags_skip(self):
        x, _ = _toy(2)
        report = Trainer(_config()).discriminator_step(None, None, x, torch.zeros(2, 100))
        assert report.sup_skipped and report.L_sup == 0 and report.L_D == report.L_adv + report.L_unsup
        assert report.L_adv > 0 and report.L_unsup > 0

    def test_loss_decreases_on_toy(self):
        x, y = _toy(10)
        t = Trainer(_config(batch_size=2, epochs=1, seed=0))
        history = t.train(x, y, x)
        assert len(history.steps) == 5
        ld = [r.L_D for r in history.steps]
        assert ld[-1] < ld[0]
        assert all(b < a for a, b in zip(ld, ld[1:]))


class TestGeneratorStep:
    def test_feature_matching_finite_positive(self):
        x, _ = _toy(4)
        report = Trainer(_config()).generator_step(torch.rand(4, 100) * 2 - 1, x)
        assert math.isfinite(report.L_G) and report.L_G > 0 and report.matching_layer == "Con1"

    def test_lr_zero_freezes_generator(self):
        x, _ = _toy(4)
        t = Trainer(_config(lr_G=0.0))
        before = parameter_digest(t.G)
        for _ in range(2):
            t.generator_step(t.sample_z(4), x)
        assert parameter_digest(t.G) == before

    def test_feature_matching_needs_real(self):
        with pytest.raises(ConfigurationError):
            Trainer(_config()).generator_step(torch.zeros(2, 100), None)

    def test_vanilla_matches_definition(self):
        t = Trainer(_config(generator_objective="vanilla", dropout_keep=1.0))
        z = t.sample_z(3)
        t.G.train()
        with torch.no_grad():
            g_state = copy.deepcopy(t.G.state_dict())
            d_logits = t.D(t.G(z))[0]
            t.G.load_state_dict(g_state)
        from vesselgan.losses import log_real_probability

        expected = -log_real_probability(d_logits).mean().item()
        assert t.generator_step(z).L_G == pytest.approx(expected, rel=1e-5)


class TestTrainLoop:
    def test_two_iterations_for_128(self):
        x, y = _toy(8)
        ux = np.repeat(_toy(16, seed=1)[0], 8, axis=0)
        assert len(ux) == 128
        t = Trainer(_config(batch_size=64))
        assert t.iterations_per_epoch(len(x), len(ux)) == 2
        history = t.train(x, y, ux)
        assert len(history.steps) == 2 and t.step == 2

    def test_budget_zero(self, tmp_path):
        ux, _ = _toy(6)
        history = Trainer(_config(batch_size=3)).train(ux[:0], np.zeros((0, 48, 48), np.int64), ux, out_dir=tmp_path)
        assert len(history.steps) == 2 and all(r.sup_skipped and r.L_sup == 0 for r in history.steps)
        assert all(r.finite() for r in history.steps)

    def test_supervised_only(self):
        x, y = _toy(6)
        history = Trainer(_config(batch_size=3, semi_supervised=False)).train(x, y)
        assert len(history.steps) == 2 and all(r.L_adv == 0 and r.L_G == 0 for r in history.steps)

    def test_semi_supervised_needs_pool(self):
        x, y = _toy(2)
        with pytest.raises(ConfigurationError):
            Trainer(_config()).train(x, y, None)

    def test_labeled_cycling(self):
        t = Trainer(_config())
        batches = [t._next_labeled(6, 2) for _ in range(6)]
        # every block of three batches is one fresh permutation of the six patches
        assert sorted(np.concatenate(batches[:3]).tolist()) == list(range(6))
        assert sorted(np.concatenate(batches[3:]).tolist()) == list(range(6))
        assert len(t._next_labeled(3, 64)) == 3

    def test_outputs_and_log(self, tmp_path):
        x, y = _toy(6)
        t = Trainer(_config(batch_size=3, epochs=2))
        history = t.train(x[:2], y[:2], x, validation=(x[2:4], y[2:4]), out_dir=tmp_path)
        for name in ("network.txt", "log.csv", "val.csv", "checkpoint_final", "checkpoint_best"):
            assert (tmp_path / name).exists(), name
        rows = list(csv.reader(open(tmp_path / "log.csv")))
        assert rows[0] == ["step", "epoch", "L_sup", "L_adv", "L_unsup", "L_D", "L_G", "matching_layer"]
        assert len(rows) == 5 and rows[1][-1] == "Con1"
        assert len(history.val_auc) == 2 and history.best_epoch in (0, 1)

    def test_checkpoint_roundtrip_step(self, tmp_path):
        x, y = _toy(6)
        a = Trainer(_config(seed=5))
        a.discriminator_step(x[:2], y[:2], x[2:4], a.sample_z(2))
        a.save_checkpoint(tmp_path / "ck")
        b = Trainer.from_checkpoint(tmp_path / "ck")
        for t in (a, b):
            if t is b:
                b.load_checkpoint(tmp_path / "ck")  # restores the global RNG consumed by ``a``
            t.discriminator_step(x[:2], y[:2], x[2:4], t.sample_z(2))
            t.generator_step(t.sample_z(2), x[4:])
        assert parameter_digest(a.D) == parameter_digest(b.D)
        assert parameter_digest(a.G) == parameter_digest(b.G)

    def test_resume_matches_uninterrupted(self, tmp_path):
        x, y = _toy(8)
        full = Trainer(_config(seed=3, epochs=2))
        full.train(x[:2], y[:2], x)
        first = Trainer(_config(seed=3, epochs=1))
        first.train(x[:2], y[:2], x, out_dir=tmp_path)
        resumed = Trainer(_config(seed=3, epochs=2))
        history = resumed.train(x[:2], y[:2], x, resume_from=tmp_path / "checkpoint_final")
        assert len(history.steps) == 4
        assert parameter_digest(resumed.D) == parameter_digest(full.D)
        assert parameter_digest(resumed.G) == parameter_digest(full.G)

    def test_divergence_guard(self, tmp_path):
        x, y = _toy(4)
        ux = x.copy()
        ux[1, 0, 0] = np.nan
        t = Trainer(_config(batch_size=2))
        d0 = parameter_digest(t.D)
        with pytest.raises(TrainingDivergedError) as info:
            t.train(x[:2], y[:2], ux, out_dir=tmp_path)
        assert info.value.checkpoint == tmp_path / "checkpoint_last_good"
        assert info.value.checkpoint.exists()
        assert parameter_digest(t.D) == d0
        restored = Trainer.from_checkpoint(info.value.checkpoint)
        assert parameter_digest(restored.D) == d0
