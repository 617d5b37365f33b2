"""Alternating discriminator / generator optimisation with checkpointing."""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch

from . import losses as L
from .exceptions import ConfigurationError, TrainingDivergedError
from .metrics import auc_roc
from .nets import (
    Discriminator,
    Generator,
    HeadMode,
    NormalizationMode,
    PoolingMode,
    as_batch,
    build_discriminator,
    build_generator,
    class_probabilities,
    sample_z,
)

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger("vesselgan")

LOG_FIELDS = ("step", "epoch", "L_sup", "L_adv", "L_unsup", "L_D", "L_G", "matching_layer")


@dataclass
class TrainConfig:
    lr_D: float = 1e-4
    lr_G: float = 1e-4
    batch_size: int = 64
    epochs: int = 50
    adam_betas: Tuple[float, float] = (0.5, 0.999)
    generator_objective: str = "feature_matching"
    generator_loss_form: str = "safe"
    matching_layer: str = "Con1"
    head: str = "structured"
    pooling: str = "average"
    norm: str = "weight"
    dropout_keep: float = 0.8
    upsample: str = "nearest"
    z_dim: int = 100
    generator_widths: Tuple[int, int, int] = (128, 64, 32)
    generator_norm: str = "batch"
    semi_supervised: bool = True
    use_adv: bool = True
    use_unsup: bool = True
    loss_weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    heartbeat_every: int = 0

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.generator_widths = tuple(int(w) for w in self.generator_widths)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.head = HeadMode.coerce(self.head).kind

    def validate(self) -> "TrainConfig":
        if not self.lr_D > 0:
            raise ConfigurationError(f"lr_D must be positive, got {self.lr_D}")
        if self.lr_G < 0:
            raise ConfigurationError(f"lr_G must be nonnegative, got {self.lr_G}")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be at least 1, got {self.epochs}")
        if self.generator_objective not in ("feature_matching", "vanilla"):
            raise ConfigurationError(f"generator_objective must be 'feature_matching' or 'vanilla', got {self.generator_objective!r}")
        if self.generator_loss_form not in ("safe", "raw"):
            raise ConfigurationError(f"generator_loss_form must be 'safe' or 'raw', got {self.generator_loss_form!r}")
        if len(self.adam_betas) != 2 or not all(0 <= b < 1 for b in self.adam_betas):
            raise ConfigurationError(f"adam_betas must be two values in [0, 1), got {self.adam_betas}")
        if len(self.loss_weights) != 3:
            raise ConfigurationError("loss_weights needs three values (sup, adv, unsup)")
        PoolingMode.coerce(self.pooling)
        NormalizationMode.coerce(self.norm)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(mapping) - set(known))
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
        kwargs = {}
        for key, value in mapping.items():
            default = known[key].default
            try:
                if isinstance(default, bool):
                    if isinstance(value, str):
                        value = {"true": True, "false": False, "1": True, "0": False}[value.lower()]
                    kwargs[key] = bool(value)
                elif isinstance(default, tuple):
                    if isinstance(value, str):
                        value = [v for v in value.replace("(", "").replace(")", "").split(",") if v.strip()]
                    kwargs[key] = tuple(type(default[0])(v) for v in value)
                elif isinstance(default, (int, float)):
                    kwargs[key] = type(default)(value)
                else:
                    kwargs[key] = str(value)
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigurationError(f"bad value for {key}: {value!r}") from exc
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Flat ``key = value`` TOML file with keys named after the fields."""
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
        nested = [k for k, v in data.items() if isinstance(v, dict)]
        if nested:
            raise ConfigurationError(f"{path}: config must be flat, found tables {nested}")
        return cls.from_mapping(data)

    def to_toml(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, bool):
                lines.append(f"{key} = {'true' if value else 'false'}")
            elif isinstance(value, (list, tuple)):
                lines.append(f"{key} = [{', '.join(repr(v) for v in value)}]")
            elif isinstance(value, str):
                lines.append(f'{key} = "{value}"')
            else:
                lines.append(f"{key} = {value!r}")
        return "\n".join(lines) + "\n"


@dataclass
class TrainingLog:
    steps: List[L.LossReport] = field(default_factory=list)
    val_auc: List[Tuple[int, float]] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_auc: Optional[float] = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_FIELDS)
            for r in self.steps:
                writer.writerow([r.step, r.epoch, repr(r.L_sup), repr(r.L_adv), repr(r.L_unsup), repr(r.L_D), repr(r.L_G), r.matching_layer or ""])


def _as_labels(y) -> torch.Tensor:
    return torch.as_tensor(np.asarray(y)).long()


class Trainer:
    """Owns both networks, their Adam optimisers and every source of randomness."""

    def __init__(self, config: TrainConfig):
        self.config = config.validate()
        torch.manual_seed(config.seed)
        self.d_spec = build_discriminator(config.pooling, config.norm, config.head, config.dropout_keep, upsample=config.upsample)
        self.g_spec = build_generator(config.z_dim, self.d_spec.input_resolution, config.generator_widths, config.generator_norm)
        if config.semi_supervised and config.generator_objective == "feature_matching" and config.matching_layer not in self.d_spec.names:
            raise ConfigurationError(f"matching layer {config.matching_layer!r} is not part of the {config.head} discriminator ({', '.join(self.d_spec.names)})")
        self.D = Discriminator(self.d_spec)
        self.G = Generator(self.g_spec)
        self.opt_D = torch.optim.Adam(self.D.parameters(), lr=config.lr_D, betas=config.adam_betas)
        self.opt_G = torch.optim.Adam(self.G.parameters(), lr=config.lr_G, betas=config.adam_betas)
        self.rng = np.random.default_rng(config.seed)
        self.z_gen = torch.Generator().manual_seed(config.seed + 1)
        self.step = 0
        self.epoch = 0
        self._lab_perm = np.zeros(0, np.int64)
        self._lab_cursor = 0

    @property
    def matching_layer(self) -> Optional[str]:
        c = self.config
        return c.matching_layer if c.semi_supervised and c.generator_objective == "feature_matching" else None

    def sample_z(self, n: int) -> torch.Tensor:
        return sample_z(n, self.config.z_dim, self.z_gen)

    def discriminator_step(self, x_labeled=None, y_labeled=None, x_unlabeled=None, z=None) -> L.LossReport:
        """One Adam update of the discriminator on L_sup + L_adv + L_unsup; the generator only supplies fakes."""
        c = self.config
        self.D.train()
        report = L.LossReport(matching_layer=self.matching_layer, step=self.step, epoch=self.epoch)
        sup = adv = unsup = None
        if x_labeled is not None and len(x_labeled):
            logits, _ = self.D(as_batch(x_labeled))
            sup = L.supervised_loss(logits, _as_labels(y_labeled), c.head)
            report.n_labeled = len(x_labeled)
        else:
            report.sup_skipped = True
        if c.semi_supervised and c.use_adv and z is not None and len(z):
            with torch.no_grad():
                self.G.train()
                fake = self.G(z)
            adv = L.adversarial_loss(self.D(fake)[0])
            report.n_fake = len(z)
        if c.semi_supervised and c.use_unsup and x_unlabeled is not None and len(x_unlabeled):
            unsup = L.unsupervised_loss(self.D(as_batch(x_unlabeled))[0])
            report.n_unlabeled = len(x_unlabeled)
        if sup is None and adv is None and unsup is None:
            return report
        total, (report.L_sup, report.L_adv, report.L_unsup) = L.discriminator_objective(sup, adv, unsup, c.loss_weights)
        report.L_D = report.L_sup + report.L_adv + report.L_unsup
        self.opt_D.zero_grad(set_to_none=True)
        total.backward()
        self.opt_D.step()
        self.G.zero_grad(set_to_none=True)
        return report

    def generator_step(self, z, x_real_unlabeled=None) -> L.LossReport:
        """One Adam update of the generator against feature matching or the vanilla objective."""
        c = self.config
        self.D.train()
        self.G.train()
        report = L.LossReport(matching_layer=self.matching_layer, step=self.step, epoch=self.epoch, n_fake=len(z))
        fake = self.G(z)
        if c.generator_objective == "feature_matching":
            if x_real_unlabeled is None or not len(x_real_unlabeled):
                raise ConfigurationError("feature matching needs a batch of real patches")
            layer = c.matching_layer
            with torch.no_grad():
                _, real_acts = self.D(as_batch(x_real_unlabeled), (layer,))
            _, fake_acts = self.D(fake, (layer,))
            if layer not in fake_acts:
                raise ConfigurationError(f"layer {layer!r} was not captured")
            loss = L.feature_matching_loss(real_acts[layer], fake_acts[layer])
            report.n_unlabeled = len(x_real_unlabeled)
        else:
            loss = L.generator_loss_vanilla(self.D(fake)[0], c.generator_loss_form)
        self.opt_G.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_G.step()
        self.D.zero_grad(set_to_none=True)
        report.L_G = float(loss.detach())
        return report

    def _next_labeled(self, n_labeled: int, k: int) -> np.ndarray:
        k = min(k, n_labeled)
        if self._lab_cursor + k > len(self._lab_perm):
            self._lab_perm = self.rng.permutation(n_labeled)
            self._lab_cursor = 0
        idx = self._lab_perm[self._lab_cursor:self._lab_cursor + k]
        self._lab_cursor += k
        return idx

    def iterations_per_epoch(self, n_labeled: int, n_unlabeled: int) -> int:
        n = n_unlabeled if n_unlabeled else n_labeled
        return math.ceil(n / self.config.batch_size)

    def predict_proba(self, patches, chunk: int = 256) -> np.ndarray:
        """Vessel probability per pixel (structured) or per patch centre (center-pixel), dropout off."""
        self.D.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(patches), chunk):
                logits, _ = self.D(as_batch(patches[start:start + chunk]))
                out.append(class_probabilities(logits)[:, 1].numpy())
        if not out:
            res = self.d_spec.input_resolution
            return np.zeros((0, res, res) if self.D.structured else (0,), np.float32)
        return np.concatenate(out)

    def validation_auc(self, x_val, y_val) -> float:
        probs = self.predict_proba(x_val)
        y = np.asarray(y_val, dtype=bool)
        if not self.D.structured and y.ndim == 3:
            y = y[:, y.shape[1] // 2, y.shape[2] // 2]
        return auc_roc(probs, y)

    def train(self, labeled_x, labeled_y, unlabeled_x=None, validation=None, out_dir=None, resume_from=None) -> TrainingLog:
        """Alternate one discriminator and one generator update per iteration.

        An epoch is one pass over the unlabeled pool (or over the labeled set when
        training purely supervised without a pool). Labeled batches cycle with a
        fresh shuffle whenever they run out.
        """
        c = self.config
        lx = np.asarray(labeled_x, dtype=np.float32)
        ly = np.asarray(labeled_y)
        ux = np.zeros((0,) + lx.shape[1:], np.float32) if unlabeled_x is None else np.asarray(unlabeled_x, dtype=np.float32)
        if c.semi_supervised and not len(ux):
            raise ConfigurationError("semi-supervised training needs a nonempty unlabeled pool")
        if not c.semi_supervised and not len(lx):
            raise ConfigurationError("supervised training needs labeled patches")
        out_dir = Path(out_dir) if out_dir is not None else None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "network.txt").write_text(self.d_spec.to_manifest() + "\n" + self.g_spec.to_manifest())
        history = TrainingLog()
        if resume_from is not None:
            history = self.load_checkpoint(resume_from) or history
        n_iter = self.iterations_per_epoch(len(lx), len(ux))
        bs = c.batch_size
        good_state = self.state_dict()
        best_state = None

        for epoch in range(self.epoch, c.epochs):
            self.epoch = epoch
            perm_u = self.rng.permutation(len(ux))
            perm_g = self.rng.permutation(len(ux))
            for it in range(n_iter):
                iu = perm_u[it * bs:(it + 1) * bs]
                n_fake = len(iu) if len(iu) else bs
                il = self._next_labeled(len(lx), bs) if len(lx) else np.zeros(0, np.int64)
                z = self.sample_z(n_fake) if c.semi_supervised else None
                report = self.discriminator_step(lx[il], ly[il], ux[iu], z)
                if c.semi_supervised:
                    ig = perm_g[it * bs:(it + 1) * bs]
                    report.L_G = self.generator_step(self.sample_z(n_fake), ux[ig]).L_G
                history.steps.append(report)
                self.step += 1
                if not report.finite():
                    self.load_state_dict(good_state)
                    ckpt = None
                    if out_dir is not None:
                        ckpt = out_dir / "checkpoint_last_good"
                        self.save_checkpoint(ckpt, history)
                    raise TrainingDivergedError(f"non-finite loss at step {report.step}: {report.as_dict()}", ckpt)
                if c.heartbeat_every and self.step % c.heartbeat_every == 0:
                    log.info("epoch %d step %d L_D=%.4f L_G=%.4f", epoch, self.step, report.L_D, report.L_G)
            self.epoch = epoch + 1
            if validation is not None:
                auc = self.validation_auc(*validation)
                history.val_auc.append((epoch, auc))
                if history.best_auc is None or auc > history.best_auc:
                    history.best_auc, history.best_epoch = auc, epoch
                    best_state = self.state_dict()
                    if out_dir is not None:
                        self.save_checkpoint(out_dir / "checkpoint_best", history, state=best_state)
            good_state = self.state_dict()
            log.info("epoch %d done (%d steps)", epoch, self.step)

        if out_dir is not None:
            self.save_checkpoint(out_dir / "checkpoint_final", history)
            if best_state is None:
                self.save_checkpoint(out_dir / "checkpoint_best", history)
            history.write_csv(out_dir / "log.csv")
            with open(out_dir / "val.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(("epoch", "val_auc"))
                writer.writerows(history.val_auc)
        self._best_state = best_state
        return history

    def restore_best(self) -> bool:
        state = getattr(self, "_best_state", None)
        if state is None:
            return False
        self.load_state_dict(state)
        return True

    def state_dict(self) -> dict:
        return copy.deepcopy({
            "epoch": self.epoch,
            "step": self.step,
            "D": self.D.state_dict(),
            "G": self.G.state_dict(),
            "opt_D": self.opt_D.state_dict(),
            "opt_G": self.opt_G.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "z_gen": self.z_gen.get_state(),
            "np_rng": self.rng.bit_generator.state,
            "lab_perm": self._lab_perm,
            "lab_cursor": self._lab_cursor,
        })

    def load_state_dict(self, state: dict) -> None:
        state = copy.deepcopy(state)
        self.epoch, self.step = state["epoch"], state["step"]
        self.D.load_state_dict(state["D"])
        self.G.load_state_dict(state["G"])
        self.opt_D.load_state_dict(state["opt_D"])
        self.opt_G.load_state_dict(state["opt_G"])
        torch.set_rng_state(state["torch_rng"])
        self.z_gen.set_state(state["z_gen"])
        self.rng.bit_generator.state = state["np_rng"]
        self._lab_perm, self._lab_cursor = state["lab_perm"], state["lab_cursor"]

    def save_checkpoint(self, path, history: Optional[TrainingLog] = None, state: Optional[dict] = None) -> None:
        """Single file: parameters keyed by layer name, optimiser and RNG state, config and its hash."""
        payload = dict(state if state is not None else self.state_dict())
        payload["config"] = self.config.to_dict()
        payload["config_hash"] = self.config.digest()
        payload["history"] = None if history is None else {
            "steps": [r.as_dict() for r in history.steps],
            "val_auc": history.val_auc,
            "best_epoch": history.best_epoch,
            "best_auc": history.best_auc,
        }
        torch.save(payload, path)

    def load_checkpoint(self, path) -> Optional[TrainingLog]:
        payload = torch.load(path, weights_only=False)
        if payload["config_hash"] != self.config.digest():
            log.warning("checkpoint %s was written with a different config", path)
        self.load_state_dict(payload)
        hist = payload.get("history")
        if hist is None:
            return None
        return TrainingLog([L.LossReport(**r) for r in hist["steps"]], [tuple(v) for v in hist["val_auc"]], hist["best_epoch"], hist["best_auc"])

    @classmethod
    def from_checkpoint(cls, path) -> "Trainer":
        payload = torch.load(path, weights_only=False)
        trainer = cls(TrainConfig.from_mapping(payload["config"]))
        trainer.load_state_dict(payload)
        return trainer
