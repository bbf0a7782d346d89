"""Alternating adversarial training with the seven ablation presets.

Each iteration feeds one source and one target sample. The domain
discriminator(s) are updated first on detached alignment maps (source
labeled 1, target 0); the generator then takes a single step on the
supervised source objective plus the weighted fooling terms, with all its
loss gradients accumulated before the update.

Presets without any depth usage (S1, S2) bypass the depth branch entirely
and zero the depth-loss weight, so those runs are exactly the depth-free
network. Target labels and depth are never read; the dataset guard
enforces and counts this.
"""

import hashlib
import json
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import autodiff
from .fusion import self_information, dada_fusion
from .losses import LossValues, seg_loss, depth_loss, domain_bce
from .metrics import evaluate_model
from .model import ModelConfig, DadaNet, DomainDiscriminator, init_model, save_checkpoint
from .synthdata import SceneDataset


class TrainingAbort(RuntimeError):
    """Non-finite loss; carries the iteration and the offending term."""

    def __init__(self, iteration, term, value):
        super().__init__(f"non-finite {term} ({value}) at iteration {iteration}")
        self.iteration = iteration
        self.term = term


@dataclass(frozen=True)
class TrainConfig:
    lambda_dep: float = 1e-3
    lambda_adv: float = 1e-3
    gen_lr: float = 2.5e-4
    gen_momentum: float = 0.9
    gen_weight_decay: float = 1e-4
    disc_lr: float = 1e-4
    disc_adam_betas: tuple = (0.9, 0.999)
    iterations: int = 1500
    seed: int = 0
    lr_schedule: str = "constant"
    eval_every: int = 0
    berhu_fraction: float = 0.2
    source_fraction: float = 1.0

    def __post_init__(self):
        for name in ("gen_lr", "gen_momentum", "gen_weight_decay", "disc_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.lambda_dep < 0 or self.lambda_adv < 0:
            raise ValueError("loss weights must be >= 0")
        if self.lr_schedule not in ("constant", "poly"):
            raise ValueError("lr_schedule must be 'constant' or 'poly'")
        if not (0 < self.source_fraction <= 1):
            raise ValueError("source_fraction must be in (0, 1]")
        if self.berhu_fraction <= 0:
            raise ValueError("berhu_fraction must be > 0")
        if self.iterations < 0 or self.eval_every < 0 or self.seed < 0:
            raise ValueError("iterations, eval_every and seed must be >= 0")


@dataclass(frozen=True)
class AblationSetup:
    name: str
    surp_adapt: bool = False
    depth_adapt: bool = False
    feat_fusion: bool = False
    dada_fusion: bool = False

    def __post_init__(self):
        if self.dada_fusion and not (self.surp_adapt and self.depth_adapt and self.feat_fusion):
            raise ValueError("dada_fusion requires surp_adapt, depth_adapt and feat_fusion")

    @property
    def uses_depth_branch(self) -> bool:
        return self.depth_adapt or self.feat_fusion or self.dada_fusion

    @property
    def needs_seg_disc(self) -> bool:
        return self.surp_adapt or self.dada_fusion

    @property
    def needs_depth_disc(self) -> bool:
        # with output fusion active the depth signal rides the fused map
        return self.depth_adapt and not self.dada_fusion

    @property
    def adversarial(self) -> bool:
        return self.needs_seg_disc or self.needs_depth_disc


ABLATION_PRESETS = {
    "S1": AblationSetup("S1"),
    "S2": AblationSetup("S2", surp_adapt=True),
    "S3": AblationSetup("S3", surp_adapt=True, feat_fusion=True),
    "S4": AblationSetup("S4", depth_adapt=True),
    "S5": AblationSetup("S5", depth_adapt=True, feat_fusion=True),
    "S6": AblationSetup("S6", surp_adapt=True, depth_adapt=True, feat_fusion=True),
    "S7": AblationSetup("S7", surp_adapt=True, depth_adapt=True, feat_fusion=True,
                        dada_fusion=True),
}


class _IndexStream:
    """Endless stream of dataset indices, reshuffled each epoch."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.queue = []

    def next(self) -> int:
        if not self.queue:
            self.queue = [int(i) for i in self.rng.permutation(self.n)]
        return self.queue.pop(0)

    def state(self) -> dict:
        return {"queue": list(self.queue), "rng": self.rng.bit_generator.state}

    def restore(self, st: dict) -> None:
        self.queue = list(st["queue"])
        self.rng.bit_generator.state = st["rng"]


class TrainState:
    """Everything a training run owns: parameters, optimizers, RNG, counters."""

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 setup: AblationSetup, n_source: int, n_target: int):
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.setup = setup
        self.iteration = 0
        seed = train_cfg.seed

        self.net = init_model(model_cfg, seed=seed)
        # both aligned-space discriminators always exist; presets decide use
        self.disc_seg = DomainDiscriminator(model_cfg.num_classes, seed=seed + 1)
        self.disc_depth = DomainDiscriminator(1, seed=seed + 2)

        self.opt_gen = torch.optim.SGD(self.net.parameters(), lr=train_cfg.gen_lr,
                                       momentum=train_cfg.gen_momentum,
                                       weight_decay=train_cfg.gen_weight_decay)
        self.opt_disc_seg = torch.optim.Adam(self.disc_seg.parameters(),
                                             lr=train_cfg.disc_lr,
                                             betas=train_cfg.disc_adam_betas)
        self.opt_disc_depth = torch.optim.Adam(self.disc_depth.parameters(),
                                               lr=train_cfg.disc_lr,
                                               betas=train_cfg.disc_adam_betas)

        self.source_stream = _IndexStream(
            n_source, np.random.default_rng(np.random.SeedSequence([seed, 11])))
        self.target_stream = _IndexStream(
            n_target, np.random.default_rng(np.random.SeedSequence([seed, 13])))
        self.source_indices_seen = set()
        self.running = {}

    # -- bookkeeping ---------------------------------------------------------
    def track(self, values: LossValues) -> None:
        for key in ("seg_loss", "depth_loss", "source_objective", "d_loss", "adv_loss"):
            v = getattr(values, key)
            if v is None:
                continue
            s, c = self.running.get(key, (0.0, 0))
            self.running[key] = (s + v, c + 1)

    def drain_running(self) -> dict:
        out = {k: s / c for k, (s, c) in self.running.items() if c}
        self.running = {}
        return out

    # -- lr schedule ----------------------------------------------------------
    def _apply_lr(self) -> None:
        if self.cfg.lr_schedule != "poly" or self.cfg.iterations <= 0:
            return
        factor = (1.0 - self.iteration / self.cfg.iterations) ** 0.9
        for group in self.opt_gen.param_groups:
            group["lr"] = self.cfg.gen_lr * factor
        for opt in (self.opt_disc_seg, self.opt_disc_depth):
            for group in opt.param_groups:
                group["lr"] = self.cfg.disc_lr * factor

    # -- serialization --------------------------------------------------------
    def save(self, path) -> None:
        torch.save({
            "iteration": self.iteration,
            "model_cfg": asdict(self.model_cfg),
            "train_cfg": asdict(self.cfg),
            "setup": asdict(self.setup),
            "net": self.net.state_dict(),
            "disc_seg": self.disc_seg.state_dict(),
            "disc_depth": self.disc_depth.state_dict(),
            "opt_gen": self.opt_gen.state_dict(),
            "opt_disc_seg": self.opt_disc_seg.state_dict(),
            "opt_disc_depth": self.opt_disc_depth.state_dict(),
            "source_stream": self.source_stream.state(),
            "target_stream": self.target_stream.state(),
            "source_indices_seen": sorted(self.source_indices_seen),
            "running": self.running,
        }, path)

    @classmethod
    def load(cls, path, n_source: int, n_target: int) -> "TrainState":
        blob = torch.load(path, weights_only=False)
        mc = blob["model_cfg"]
        model_cfg = ModelConfig(backbone_channels=tuple(mc["backbone_channels"]),
                                backbone_depth=mc["backbone_depth"],
                                classifier_dilation=mc["classifier_dilation"],
                                num_classes=mc["num_classes"],
                                input_size=tuple(mc["input_size"]))
        tc = dict(blob["train_cfg"])
        tc["disc_adam_betas"] = tuple(tc["disc_adam_betas"])
        state = cls(model_cfg, TrainConfig(**tc), AblationSetup(**blob["setup"]),
                    n_source, n_target)
        state.iteration = blob["iteration"]
        state.net.load_state_dict(blob["net"])
        state.disc_seg.load_state_dict(blob["disc_seg"])
        state.disc_depth.load_state_dict(blob["disc_depth"])
        state.opt_gen.load_state_dict(blob["opt_gen"])
        state.opt_disc_seg.load_state_dict(blob["opt_disc_seg"])
        state.opt_disc_depth.load_state_dict(blob["opt_disc_depth"])
        state.source_stream.restore(blob["source_stream"])
        state.target_stream.restore(blob["target_stream"])
        state.source_indices_seen = set(blob["source_indices_seen"])
        state.running = blob["running"]
        return state


def param_hash(module: torch.nn.Module) -> str:
    """Stable digest of all parameter bytes; used for isolation checks."""
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def _to_tensor_image(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32))


def alignment_reps(setup: AblationSetup, seg_probs: torch.Tensor,
                   depth: Optional[torch.Tensor]) -> dict:
    """Maps fed to the discriminators, keyed by aligned space.

    seg space receives the surprisal map, or its depth-weighted version
    when output fusion is active; depth space receives the raw prediction.
    """
    reps = {}
    if setup.needs_seg_disc:
        surp = self_information(seg_probs)
        if setup.dada_fusion:
            surp = dada_fusion(surp, depth)
        reps["seg"] = surp
    if setup.needs_depth_disc:
        reps["depth"] = depth.unsqueeze(1)
    return reps


def _check_finite(value: torch.Tensor, term: str, iteration: int) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise TrainingAbort(iteration, term, float(value))
    return value


def train_step(state: TrainState, source_scene, target_image, audit_hook=None) -> LossValues:
    """One alternating update from a (source sample, target image) pair.

    source_scene carries image/labels/inv_depth arrays; target_image is an
    (H, W, 3) array. audit_hook, when given, is called with
    ('pre_disc'|'post_disc'|'post_gen', state) around the sub-updates.
    """
    cfg, setup = state.cfg, state.setup
    state._apply_lr()

    xs = _to_tensor_image(np.asarray(source_scene.image))
    xt = _to_tensor_image(np.asarray(target_image))
    ys = torch.from_numpy(np.asarray(source_scene.labels)).long().unsqueeze(0)

    depth_mode = "full" if setup.uses_depth_branch else "bypass"
    lambda_dep = cfg.lambda_dep if setup.uses_depth_branch else 0.0
    run_adv = setup.adversarial and cfg.lambda_adv > 0

    out = state.net(torch.stack([xs, xt]), depth_mode=depth_mode)
    probs_s, probs_t = out.seg[0:1], out.seg[1:2]
    if out.depth is not None:
        depth_s, depth_t = out.depth[0:1], out.depth[1:2]
    else:
        depth_s = depth_t = None

    d_loss_f = adv_loss_f = None
    if audit_hook:
        audit_hook("pre_disc", state)

    disc_of = {"seg": (state.disc_seg, state.opt_disc_seg),
               "depth": (state.disc_depth, state.opt_disc_depth)}

    if run_adv:
        reps_s = alignment_reps(setup, probs_s, depth_s)
        reps_t = alignment_reps(setup, probs_t, depth_t)
        # discriminator phase: detached maps, source labeled 1, target 0
        d_loss_f = 0.0
        for space in reps_s:
            disc, opt = disc_of[space]
            opt.zero_grad()
            d_loss = (domain_bce(disc(autodiff.detach(reps_s[space])), 1)
                      + domain_bce(disc(autodiff.detach(reps_t[space])), 0))
            _check_finite(d_loss, f"d_loss[{space}]", state.iteration)
            d_loss.backward()
            opt.step()
            d_loss_f += float(d_loss)

    if audit_hook:
        audit_hook("post_disc", state)

    # generator phase: supervised source objective plus fooling terms,
    # gradients accumulated before the single parameter update
    state.opt_gen.zero_grad()
    seg_l = _check_finite(seg_loss(probs_s, ys), "seg_loss", state.iteration)
    seg_l.backward(retain_graph=True)
    seg_f = float(seg_l)

    dep_f = 0.0
    if lambda_dep > 0:
        zs = torch.from_numpy(
            np.asarray(source_scene.inv_depth, dtype=np.float32)).unsqueeze(0)
        dep_l = _check_finite(depth_loss(depth_s, zs, cfg.berhu_fraction),
                              "depth_loss", state.iteration)
        (lambda_dep * dep_l).backward(retain_graph=True)
        dep_f = float(dep_l)

    if run_adv:
        adv_loss_f = 0.0
        for space in reps_t:
            disc, _ = disc_of[space]
            fool = domain_bce(disc(reps_t[space]), 1)
            _check_finite(fool, f"adv_loss[{space}]", state.iteration)
            (cfg.lambda_adv * fool).backward(retain_graph=True)
            adv_loss_f += float(fool)

    state.opt_gen.step()
    if audit_hook:
        audit_hook("post_gen", state)

    state.iteration += 1
    values = LossValues(seg_loss=seg_f, depth_loss=dep_f,
                        source_objective=seg_f + lambda_dep * dep_f,
                        d_loss=d_loss_f, adv_loss=adv_loss_f)
    state.track(values)
    return values


class _LazyScene:
    """Defers dataset reads until a loss actually needs them."""

    def __init__(self, dataset, index):
        self._ds = dataset
        self._i = index
        self.image = dataset.image(index)

    @property
    def labels(self):
        return self._ds.labels(self._i)

    @property
    def inv_depth(self):
        return self._ds.inv_depth(self._i)


def fit_loop(state: TrainState, source: SceneDataset, target: SceneDataset,
             iterations: int, eval_every: int = 0, on_snapshot=None) -> TrainState:
    """Drive train_step over shuffled, seeded epochs of both datasets."""
    while state.iteration < iterations:
        si = state.source_stream.next()
        ti = state.target_stream.next()
        state.source_indices_seen.add(si)
        train_step(state, _LazyScene(source, si), target.image(ti))
        if eval_every and on_snapshot and state.iteration % eval_every == 0:
            on_snapshot(state)
    return state


def _config_digest(*dicts) -> str:
    payload = json.dumps(dicts, sort_keys=True, default=str).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def run_training(model_cfg: ModelConfig, train_cfg: TrainConfig, setup: AblationSetup,
                 source: SceneDataset, target: SceneDataset,
                 out_dir, val: Optional[SceneDataset] = None,
                 deterministic: bool = False, resume_from=None) -> dict:
    """Full training run; returns a summary dict with paths and final metrics.

    source/target are open datasets (target in its guarded role). Writes
    metrics.jsonl (one JSON object per snapshot), a final model checkpoint
    and, when a validation set is given, a final eval report with per-image
    scores.
    """
    if deterministic or autodiff.deterministic_requested():
        autodiff.set_deterministic(True)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        state = TrainState.load(resume_from, len(source), len(target))
    else:
        state = TrainState(model_cfg, train_cfg, setup, len(source), len(target))

    metrics_path = out / "metrics.jsonl"
    records = []

    def snapshot(_state=None):
        entry = {"iteration": state.iteration}
        entry.update({k: round(v, 10) for k, v in sorted(state.drain_running().items())})
        if val is not None:
            report = evaluate_model(state.net, val)
            entry["target_miou"] = report.miou
            entry["per_class_iou"] = report.per_class_iou
        records.append(entry)

    fit_loop(state, source, target, train_cfg.iterations,
             eval_every=train_cfg.eval_every, on_snapshot=snapshot)

    if not records or records[-1]["iteration"] != state.iteration:
        snapshot()

    with open(metrics_path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    ckpt_path = out / "checkpoint.dada"
    save_checkpoint(ckpt_path, state.net)
    state.save(out / "state.pt")

    summary = {
        "checkpoint": str(ckpt_path),
        "metrics": str(metrics_path),
        "iterations": state.iteration,
        "setup": setup.name,
        "config_digest": _config_digest(asdict(model_cfg), asdict(train_cfg), asdict(setup)),
        "guard": {"target_label_reads": target.guard.label_reads,
                  "target_depth_reads": target.guard.depth_reads},
    }
    if val is not None:
        report = evaluate_model(state.net, val)
        report.meta.update({"setup": setup.name, "seed": train_cfg.seed})
        report.save(out / "eval.json")
        summary["final_miou"] = report.miou
        summary["eval_report"] = str(out / "eval.json")
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary
