"""Two-stage training: encoder pretraining, diffusion pretraining, joint training.

Stage 0 trains a GCN encoder with cross-entropy only (this is also the
baseline arm). Stage 1 trains the denoiser and projection head on features
of a frozen encoder. Stage 2 trains a freshly initialized encoder jointly with
the denoiser, classifying both the real features x0 and one-step generated
features x0_hat.
"""
from __future__ import annotations

import copy
import csv
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, TrainConfig
from .dataset import GraphTopology, SkeletonDataset, batch_iter, stratified_split
from .diffusion import (Denoiser, NoiseSchedule, denoise_predict, make_schedule, q_sample,
                        scaled_beta_bounds)
from .encoder import SkeletonEncoder
from .errors import ShapeError, TrainingError
from .losses import (LossWeights, classification_loss, diffusion_loss, recon_loss,
                     skeleton_text_loss, total_loss)
from .text import TextBank, build_text_bank, text_tables

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("stage", "epoch", "lr", "L_cls", "L_recon", "L_con", "L_diff", "L",
                  "train_acc", "val_top1")

_DTYPES = {"float32": torch.float32, "float64": torch.float64}
# Offsets that keep the per-stage noise streams apart.
_STAGE_STREAM = {"encoder_pre": 0, "baseline": 0, "diffusion": 1, "final": 2}


def lr_at(cfg: TrainConfig, epoch: int, base_lr: float | None = None) -> float:
    """Linear warm-up to the base rate, then step decay at each listed epoch."""
    lr = cfg.lr if base_lr is None else base_lr
    if epoch < cfg.warmup_epochs:
        return lr * (epoch + 1) / cfg.warmup_epochs
    k = sum(1 for e in cfg.lr_decay_epochs if e <= epoch)
    return lr * cfg.lr_decay_factor ** k


def sgd_update(params, grads, lr, momentum, weight_decay, state=None):
    """One momentum-SGD step: v' = m v + g + wd p; p' = p - lr v'."""
    params = list(params)
    grads = list(grads)
    if state is None:
        state = [torch.zeros_like(p) for p in params]
    if not len(params) == len(grads) == len(state):
        raise ShapeError("parameters", len(params), (len(grads), len(state)))
    new_params, new_state = [], []
    for p, g, v in zip(params, grads, state):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError("parameter", tuple(p.shape), (tuple(g.shape), tuple(v.shape)))
        v2 = momentum * v + g + weight_decay * p
        new_params.append(p - lr * v2)
        new_state.append(v2)
    return new_params, new_state


class _Optimizer:
    """Applies ``sgd_update`` in place; each parameter group has its own base rate."""

    def __init__(self, groups, cfg: TrainConfig, state=None):
        self.groups = [(list(params), base_lr) for params, base_lr in groups]
        self.cfg = cfg
        self.state = state

    @torch.no_grad()
    def step(self, epoch):
        new_state = []
        offset = 0
        for params, base_lr in self.groups:
            grads = [torch.zeros_like(p) if p.grad is None else p.grad for p in params]
            state = None if self.state is None else self.state[offset:offset + len(params)]
            new, state = sgd_update([p.detach() for p in params], grads, lr_at(self.cfg, epoch, base_lr),
                                    self.cfg.momentum, self.cfg.weight_decay, state)
            for p, q in zip(params, new):
                p.copy_(q)
                p.grad = None
            new_state.extend(state)
            offset += len(params)
        self.state = new_state


@dataclass
class Checkpoint:
    """Everything needed to evaluate or resume a run.

    Fields: stage, config (flat dict), class_names, topology (num_joints,
    edges, center_joint), encoder_state, denoiser_state, epoch (completed
    epochs), velocity (optimizer state), noise_rng (torch generator state),
    best (epoch, score and parameters of the best epoch so far), history.
    """
    stage: str
    config: dict
    class_names: list
    topology: dict
    encoder_state: dict | None = None
    denoiser_state: dict | None = None
    epoch: int = 0
    velocity: list | None = None
    noise_rng: torch.Tensor | None = None
    best: dict | None = None
    history: list = field(default_factory=list)
    complete: bool = False

    @property
    def run_config(self) -> RunConfig:
        cfg = RunConfig().with_overrides(self.config)
        if self.topology:
            cfg = replace(cfg, generation=replace(cfg.generation, topology=topology_from(self)))
        return cfg

    def save(self, path):
        tmp = f"{path}.tmp"
        torch.save(asdict(self), tmp)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls(**torch.load(path, weights_only=False))


def _topology_dict(top: GraphTopology) -> dict:
    return {"num_joints": top.num_joints, "edges": [list(e) for e in top.edges],
            "center_joint": top.center_joint}


def topology_from(ckpt: Checkpoint) -> GraphTopology:
    t = ckpt.topology
    return GraphTopology(t["num_joints"], tuple(map(tuple, t["edges"])), t["center_joint"])


def build_encoder(cfg: RunConfig, topology: GraphTopology) -> SkeletonEncoder:
    return SkeletonEncoder(cfg.encoder, topology, cfg.text.embed_dim, dtype=_DTYPES[cfg.train.dtype])


def build_denoiser(cfg: RunConfig) -> Denoiser:
    return Denoiser(cfg.denoiser, dtype=_DTYPES[cfg.train.dtype])


def encoder_from(ckpt: Checkpoint) -> SkeletonEncoder:
    enc = build_encoder(ckpt.run_config, topology_from(ckpt))
    enc.load_state_dict(ckpt.encoder_state)
    return enc.eval()


def denoiser_from(ckpt: Checkpoint) -> Denoiser:
    den = build_denoiser(ckpt.run_config)
    den.load_state_dict(ckpt.denoiser_state)
    return den.eval()


def schedule_for(cfg: TrainConfig) -> NoiseSchedule:
    lo, hi = scaled_beta_bounds(cfg.T)
    lo = lo if cfg.beta_start is None else cfg.beta_start
    hi = hi if cfg.beta_end is None else cfg.beta_end
    return make_schedule(cfg.T, lo, hi)


def _state(module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _to_tensor(array, dtype):
    return torch.as_tensor(np.ascontiguousarray(array), dtype=dtype)


def _check_finite(losses: dict, epoch: int, batch: int):
    for name, value in losses.items():
        if not torch.isfinite(value):
            raise TrainingError(f"non-finite {name}", epoch=epoch, batch=batch)


@torch.no_grad()
def encode_dataset(encoder: SkeletonEncoder, ds: SkeletonDataset, batch_size: int = 256):
    """Eval-mode features [N, D] for every sample, in dataset order."""
    was_training = encoder.training
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    feats = [encoder.encode(_to_tensor(b.data, dtype)) for b in batch_iter(ds, batch_size)]
    encoder.train(was_training)
    if not feats:
        return torch.zeros((0, encoder.config.feature_dim), dtype=dtype)
    return torch.cat(feats)


@torch.no_grad()
def _top1(encoder: SkeletonEncoder, ds: SkeletonDataset, batch_size: int) -> float:
    if len(ds) == 0:
        return float("nan")
    logits = encoder.classify(encode_dataset(encoder, ds, batch_size))
    return float((logits.argmax(1).numpy() == ds.labels).mean())


class _EpochLog:
    def __init__(self):
        self.sums = {}
        self.count = 0
        self.correct = 0
        self.seen = 0

    def add(self, losses: dict, n: int):
        for k, v in losses.items():
            self.sums[k] = self.sums.get(k, 0.0) + v.item() * n
        self.count += n

    def row(self, stage, epoch, lr, val_top1=float("nan")) -> dict:
        row = {"stage": stage, "epoch": epoch, "lr": lr}
        for k in ("L_cls", "L_recon", "L_con", "L_diff", "L"):
            row[k] = self.sums[k] / self.count if k in self.sums and self.count else float("nan")
        row["train_acc"] = self.correct / self.seen if self.seen else float("nan")
        row["val_top1"] = val_top1
        return row


def _new_checkpoint(stage: str, cfg: RunConfig, ds: SkeletonDataset) -> Checkpoint:
    return Checkpoint(stage=stage, config=cfg.to_flat(), class_names=list(ds.class_names),
                      topology=_topology_dict(ds.topology))


def _noise_generator(cfg: TrainConfig, stage: str, state=None) -> torch.Generator:
    gen = torch.Generator().manual_seed(int(cfg.noise_seed) * 4 + _STAGE_STREAM[stage])
    if state is not None:
        gen.set_state(state)
    return gen


def _shuffle_seed(cfg: TrainConfig, epoch: int):
    # Shared by every stage so that paired runs see the same batch order.
    return [int(cfg.shuffle_seed), epoch]


def _keep_best(ckpt: Checkpoint, cfg: TrainConfig, val_score: float, epoch: int, states: dict):
    if cfg.select_best == "last" or np.isnan(val_score):
        return
    if ckpt.best is None or val_score > ckpt.best["score"]:
        ckpt.best = {"epoch": epoch, "score": val_score, **{k: copy.deepcopy(v) for k, v in states.items()}}


def _finish(ckpt: Checkpoint, cfg: TrainConfig):
    if ckpt.best is not None and cfg.select_best != "last":
        ckpt.encoder_state = ckpt.best["encoder_state"]
        if ckpt.best.get("denoiser_state") is not None:
            ckpt.denoiser_state = ckpt.best["denoiser_state"]
    ckpt.complete = True
    return ckpt


def pretrain_encoder(cfg: RunConfig, dataset: SkeletonDataset, val: SkeletonDataset | None = None,
                     resume: Checkpoint | None = None, on_epoch=None, stage: str = "encoder_pre") -> Checkpoint:
    """Train encoder + classifier with cross-entropy only."""
    cfg = cfg.resolved()
    cfg.validate()
    tc = cfg.train
    dtype = _DTYPES[tc.dtype]
    enc = build_encoder(cfg, dataset.topology).train()
    params = enc.backbone_parameters()
    ckpt = resume if resume is not None else _new_checkpoint(stage, cfg, dataset)
    if resume is not None:
        enc.load_state_dict(resume.encoder_state)
    opt = _Optimizer([(params, tc.lr)], tc, resume.velocity if resume is not None else None)
    ckpt.encoder_state = _state(enc)

    for epoch in range(ckpt.epoch, tc.epochs):
        lr = lr_at(tc, epoch)
        elog = _EpochLog()
        for b, batch in enumerate(batch_iter(dataset, tc.batch_size, _shuffle_seed(tc, epoch))):
            x = _to_tensor(batch.data, dtype)
            labels = torch.as_tensor(batch.labels)
            logits = enc.classify(enc.encode(x))
            l_cls = classification_loss(logits, labels)
            losses = {"L_cls": l_cls, "L": l_cls}
            _check_finite(losses, epoch, b)
            l_cls.backward()
            opt.step(epoch)
            elog.add(losses, len(batch))
            elog.correct += int((logits.argmax(1) == labels).sum())
            elog.seen += len(batch)
        val_top1 = _top1(enc, val, tc.eval_batch_size) if val is not None else float("nan")
        ckpt.history.append(elog.row(stage, epoch, lr, val_top1))
        ckpt.encoder_state = _state(enc)
        ckpt.velocity = opt.state
        ckpt.epoch = epoch + 1
        _keep_best(ckpt, tc, val_top1, epoch, {"encoder_state": ckpt.encoder_state})
        log.info("%s epoch %d lr %.4g L_cls %.4f train_acc %.3f val %.3f", stage, epoch, lr,
                 ckpt.history[-1]["L_cls"], ckpt.history[-1]["train_acc"], val_top1)
        if on_epoch is not None:
            on_epoch(ckpt)
    return _finish(ckpt, tc)


def _labels_tensor(labels):
    return torch.as_tensor(np.asarray(labels), dtype=torch.long)


def _conditioning(tables, labels, draw, use_fine: bool, dtype):
    fine = _to_tensor(tables.fine_for(labels, draw), dtype)
    return fine if use_fine else torch.zeros_like(fine)


def fit_denoiser(cfg: RunConfig, denoiser: Denoiser, projection: torch.nn.Module,
                 features: torch.Tensor, labels, sample_ids, tables, ckpt: Checkpoint,
                 stage: str = "diffusion", on_epoch=None, encoder: SkeletonEncoder | None = None):
    """Stage-1 loop on fixed features: L_diff = L_recon + lambda * L_con.

    ``projection`` maps features into the text space; generated features are
    projected unless ``con_source == "encoder"``.
    """
    tc = cfg.train
    dtype = features.dtype
    schedule = schedule_for(tc)
    weights = LossWeights(tc.lam)
    labels = np.asarray(labels)
    sample_ids = np.asarray(sample_ids)
    coarse = _to_tensor(tables.coarse, dtype)
    params = list(denoiser.parameters()) + list(projection.parameters())
    opt = _Optimizer([(params, tc.diffusion_lr)], tc, ckpt.velocity)
    gen = _noise_generator(tc, stage, ckpt.noise_rng)
    epochs = tc.stage1_epochs if tc.stage1_epochs is not None else tc.epochs
    n = len(labels)

    def project(z):
        out = projection(z)
        return out / out.norm(dim=1, keepdim=True)

    for epoch in range(ckpt.epoch, epochs):
        lr = lr_at(tc, epoch, tc.diffusion_lr)
        elog = _EpochLog()
        order = np.random.default_rng(_shuffle_seed(tc, epoch)).permutation(n)
        for b, start in enumerate(range(0, n, tc.batch_size)):
            idx = order[start:start + tc.batch_size]
            x0 = features[idx]
            y = _labels_tensor(labels[idx])
            t = torch.randint(1, tc.T + 1, (len(idx),), generator=gen)
            eps = torch.randn(x0.shape, generator=gen, dtype=dtype)
            x_t = q_sample(schedule, x0, t.numpy(), eps)
            E_f = _conditioning(tables, labels[idx], sample_ids[idx] + epoch, tc.use_fine_text, dtype)
            x0_hat = denoise_predict(denoiser, x_t, t, E_f)
            l_recon = recon_loss(x0_hat, x0)
            losses = {"L_recon": l_recon}
            if tc.use_coarse_text:
                source = x0_hat if tc.con_source == "generated" else x0
                l_con = skeleton_text_loss(project(source), coarse[y], y, tc.tau, tc.normalize_targets)
                losses["L_con"] = l_con
                l_diff = diffusion_loss(l_recon, l_con, weights)
            else:
                l_diff = l_recon
            losses["L_diff"] = losses["L"] = l_diff
            _check_finite(losses, epoch, b)
            l_diff.backward()
            opt.step(epoch)
            elog.add(losses, len(idx))
        ckpt.history.append(elog.row(stage, epoch, lr))
        ckpt.denoiser_state = _state(denoiser)
        if encoder is not None:
            ckpt.encoder_state = _state(encoder)
        ckpt.velocity = opt.state
        ckpt.noise_rng = gen.get_state()
        ckpt.epoch = epoch + 1
        log.info("%s epoch %d lr %.4g L_recon %.4f", stage, epoch, lr, ckpt.history[-1]["L_recon"])
        if on_epoch is not None:
            on_epoch(ckpt)
    return ckpt


def train_stage1(cfg: RunConfig, dataset: SkeletonDataset, encoder_ckpt: Checkpoint | None,
                 text_bank: TextBank, resume: Checkpoint | None = None, on_epoch=None) -> Checkpoint:
    """Pretrain the denoiser (and projection head) on features of a frozen encoder."""
    cfg = cfg.resolved()
    cfg.validate()
    enc = build_encoder(cfg, dataset.topology)
    if encoder_ckpt is not None:
        enc.load_state_dict(encoder_ckpt.encoder_state)
    enc.eval()
    for p in enc.backbone_parameters():
        p.requires_grad_(False)
    den = build_denoiser(cfg).train()
    ckpt = resume if resume is not None else _new_checkpoint("diffusion", cfg, dataset)
    if resume is not None:
        enc.load_state_dict(resume.encoder_state)
        den.load_state_dict(resume.denoiser_state)
    ckpt.encoder_state = _state(enc)
    ckpt.denoiser_state = _state(den)
    features = encode_dataset(enc, dataset, cfg.train.eval_batch_size)
    tables = text_tables(text_bank, cfg.text)
    sample_ids = np.array([s.sample_id for s in dataset.sequences], dtype=np.int64)
    fit_denoiser(cfg, den, enc.projection, features, dataset.labels, sample_ids, tables, ckpt,
                 on_epoch=on_epoch, encoder=enc)
    ckpt.complete = True
    return ckpt


def train_stage2(cfg: RunConfig, dataset: SkeletonDataset, diffusion_ckpt: Checkpoint | None,
                 text_bank: TextBank, val: SkeletonDataset | None = None,
                 resume: Checkpoint | None = None, on_epoch=None, denoiser=None) -> Checkpoint:
    """Jointly train a fresh encoder, both heads and the denoiser with L = L_cls + L_diff."""
    cfg = cfg.resolved()
    cfg.validate()
    tc = cfg.train
    dtype = _DTYPES[tc.dtype]
    stage = "final"
    enc = build_encoder(cfg, dataset.topology).train()
    den = denoiser if denoiser is not None else build_denoiser(cfg)
    if diffusion_ckpt is not None:
        if denoiser is None:
            den.load_state_dict(diffusion_ckpt.denoiser_state)
        # the projection head was trained against the denoiser's outputs
        proj = {k[len("projection."):]: v for k, v in diffusion_ckpt.encoder_state.items()
                if k.startswith("projection.")}
        enc.projection.load_state_dict(proj)
    den.train()
    ckpt = resume if resume is not None else _new_checkpoint(stage, cfg, dataset)
    if resume is not None:
        enc.load_state_dict(resume.encoder_state)
        if denoiser is None:
            den.load_state_dict(resume.denoiser_state)
    schedule = schedule_for(tc)
    weights = LossWeights(tc.lam)
    tables = text_tables(text_bank, cfg.text)
    coarse = _to_tensor(tables.coarse, dtype)
    opt = _Optimizer([(enc.parameters(), tc.lr), (den.parameters(), tc.diffusion_lr)], tc, ckpt.velocity)
    gen = _noise_generator(tc, stage, ckpt.noise_rng)
    ckpt.encoder_state = _state(enc)
    ckpt.denoiser_state = _state(den)

    for epoch in range(ckpt.epoch, tc.epochs):
        lr = lr_at(tc, epoch)
        elog = _EpochLog()
        for b, batch in enumerate(batch_iter(dataset, tc.batch_size, _shuffle_seed(tc, epoch))):
            x = _to_tensor(batch.data, dtype)
            y = torch.as_tensor(batch.labels)
            x0 = enc.encode(x)
            t = torch.randint(1, tc.T + 1, (len(batch),), generator=gen)
            eps = torch.randn(x0.shape, generator=gen, dtype=dtype)
            x_t = q_sample(schedule, x0, t.numpy(), eps)
            E_f = _conditioning(tables, batch.labels, batch.sample_ids + epoch, tc.use_fine_text, dtype)
            x0_hat = denoise_predict(den, x_t, t, E_f)
            logits = enc.classify(x0)
            l_cls = 0.5 * (classification_loss(logits, y) + classification_loss(enc.classify(x0_hat), y))
            if not tc.diff_grad_to_encoder:
                # same noise, same values; L_diff just stops updating the encoder through x_t
                x0_hat = denoise_predict(den, q_sample(schedule, x0.detach(), t.numpy(), eps), t, E_f)
            l_recon = recon_loss(x0_hat, x0)
            losses = {"L_cls": l_cls, "L_recon": l_recon}
            if tc.use_coarse_text:
                source = x0_hat if tc.con_source == "generated" else (x0 if tc.diff_grad_to_encoder else x0.detach())
                l_con = skeleton_text_loss(enc.project(source), coarse[y], y, tc.tau, tc.normalize_targets)
                losses["L_con"] = l_con
                l_diff = diffusion_loss(l_recon, l_con, weights)
            else:
                l_diff = l_recon
            losses["L_diff"] = l_diff
            losses["L"] = loss = total_loss(l_cls, l_diff)
            _check_finite(losses, epoch, b)
            loss.backward()
            opt.step(epoch)
            elog.add(losses, len(batch))
            elog.correct += int((logits.argmax(1) == y).sum())
            elog.seen += len(batch)
        val_top1 = _top1(enc, val, tc.eval_batch_size) if val is not None else float("nan")
        ckpt.history.append(elog.row(stage, epoch, lr, val_top1))
        ckpt.encoder_state = _state(enc)
        ckpt.denoiser_state = _state(den)
        ckpt.velocity = opt.state
        ckpt.noise_rng = gen.get_state()
        ckpt.epoch = epoch + 1
        _keep_best(ckpt, tc, val_top1, epoch,
                   {"encoder_state": ckpt.encoder_state, "denoiser_state": ckpt.denoiser_state})
        log.info("%s epoch %d lr %.4g L %.4f train_acc %.3f val %.3f", stage, epoch, lr,
                 ckpt.history[-1]["L"], ckpt.history[-1]["train_acc"], val_top1)
        if on_epoch is not None:
            on_epoch(ckpt)
    return _finish(ckpt, tc)


def _fmt_metric(v) -> str:
    if isinstance(v, float):
        return format(v, ".9g")
    return str(v)


def write_metrics_csv(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in history:
            writer.writerow([_fmt_metric(row.get(c, float("nan"))) for c in METRIC_COLUMNS])


def run_pipeline(cfg: RunConfig, train: SkeletonDataset, val: SkeletonDataset | None = None,
                 out_dir=None, baseline: bool = False, resume: bool = False) -> dict:
    """Run the configured stages and return their checkpoints.

    With ``baseline`` only the cross-entropy encoder is trained. When
    ``out_dir`` is given, every stage writes ``<stage>.ckpt`` on completion and
    ``<stage>.partial.ckpt`` after each epoch so that ``resume`` can continue.
    """
    cfg = cfg.resolved()
    cfg.validate()
    tc = cfg.train
    if val is None and tc.val_fraction > 0:
        train, val = stratified_split(train, tc.val_fraction, tc.shuffle_seed)
    if tc.select_best == "val" and val is None:
        cfg = replace(cfg, train=replace(tc, select_best="last"))
        tc = cfg.train
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    bank = build_text_bank(train.class_names)
    results = {}
    history = []

    def stage_run(name, fn):
        final = out / f"{name}.ckpt" if out else None
        partial = out / f"{name}.partial.ckpt" if out else None
        if resume and final is not None and final.exists():
            ck = Checkpoint.load(final)
        else:
            start = Checkpoint.load(partial) if resume and partial is not None and partial.exists() else None
            save = (lambda ck: (ck.save(partial), write_metrics_csv(out / "metrics.csv", history + ck.history))) \
                if out else None
            ck = fn(start, save)
            if out is not None:
                ck.save(final)
                if partial.exists():
                    partial.unlink()
        history.extend(ck.history)
        results[name] = ck
        return ck

    if baseline:
        stage_run("baseline", lambda r, s: pretrain_encoder(cfg, train, val, r, s, stage="baseline"))
    else:
        enc_ckpt = None
        if tc.pretrain_encoder:
            enc_ckpt = stage_run("encoder_pre", lambda r, s: pretrain_encoder(cfg, train, val, r, s))
        diff_ckpt = None
        if tc.pretrain_diffusion:
            diff_ckpt = stage_run("diffusion", lambda r, s: train_stage1(cfg, train, enc_ckpt, bank, r, s))
        stage_run("final", lambda r, s: train_stage2(cfg, train, diff_ckpt, bank, val, r, s))
    if out is not None:
        write_metrics_csv(out / "metrics.csv", history)
    results["history"] = history
    return results
