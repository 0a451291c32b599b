"""Metrics, feature diversity, embedding export and ablation sweeps."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, replace

import numpy as np
import torch

from .config import RunConfig
from .dataset import SkeletonDataset
from .diffusion import q_sample, sample
from .errors import CocoDiffError, MetricError, ShapeError
from .text import build_text_bank, text_tables
from .training import (Checkpoint, denoiser_from, encode_dataset, encoder_from, run_pipeline,
                       schedule_for, topology_from)

log = logging.getLogger(__name__)


@dataclass
class MetricReport:
    top1: float
    top5: float
    per_class: np.ndarray
    class_counts: np.ndarray
    div: float
    num_samples: int


def _check_compatible(ckpt: Checkpoint, ds: SkeletonDataset):
    top = topology_from(ckpt)
    if top.num_joints != ds.topology.num_joints:
        raise ShapeError("joints", top.num_joints, ds.topology.num_joints)
    if len(ckpt.class_names) != ds.num_classes:
        raise ShapeError("classes", len(ckpt.class_names), ds.num_classes)


def topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Whether the label is among the k highest logits; ties go to the lower class index."""
    k = min(k, logits.shape[1])
    # stable sort on negated logits keeps lower indices first among equals
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)


def report_from_logits(logits, labels, num_classes: int, features=None, div_pairs=1000, div_seed=0):
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    top1_hits = topk_hits(logits, labels, 1)
    top5_hits = topk_hits(logits, labels, 5)
    counts = np.bincount(labels, minlength=num_classes)
    per_class = np.array([top1_hits[labels == c].mean() if counts[c] else np.nan
                          for c in range(num_classes)])
    div = diversity(features, div_pairs, div_seed) if features is not None and len(features) >= 2 else 0.0
    return MetricReport(float(top1_hits.mean()), float(top5_hits.mean()), per_class, counts,
                        div, len(labels))


@torch.no_grad()
def evaluate(ckpt: Checkpoint, dataset: SkeletonDataset, batch_size: int = 256,
             div_pairs: int = 1000, div_seed: int = 0) -> MetricReport:
    """Classify with encoder and classifier only; the denoiser is never built."""
    _check_compatible(ckpt, dataset)
    if len(dataset) == 0:
        raise MetricError("cannot evaluate an empty dataset")
    enc = encoder_from(ckpt)
    feats = encode_dataset(enc, dataset, batch_size)
    logits = enc.classify(feats)
    return report_from_logits(logits.numpy(), dataset.labels, dataset.num_classes,
                              feats.double().numpy(), div_pairs, div_seed)


def per_class_delta(report_a: MetricReport, report_b: MetricReport) -> np.ndarray:
    if len(report_a.per_class) != len(report_b.per_class):
        raise MetricError("reports cover different class counts")
    return report_a.per_class - report_b.per_class


def diversity(features, num_pairs: int = 1000, seed: int = 0) -> float:
    """Mean L2 distance over ``num_pairs`` seeded random pairs of distinct rows."""
    f = np.asarray(features, dtype=np.float64)
    K = len(f)
    if K < 2:
        raise MetricError(f"diversity needs at least 2 features, got {K}")
    if num_pairs < 1:
        raise MetricError("num_pairs must be positive")
    rng = np.random.default_rng(seed)
    i = rng.integers(0, K, num_pairs)
    j = rng.integers(0, K - 1, num_pairs)
    j = j + (j >= i)
    return float(np.linalg.norm(f[i] - f[j], axis=1).mean())


@torch.no_grad()
def generate_features(ckpt: Checkpoint, dataset: SkeletonDataset, t_gen: int | None = None,
                      seed: int = 0, batch_size: int = 256):
    """Original features x0 and full-chain samples started from q_sample(x0, t_gen).

    Returns (x0, x0_generated) as float64 arrays in dataset order.
    """
    cfg = ckpt.run_config.resolved()
    tc = cfg.train
    schedule = schedule_for(tc)
    t_gen = tc.T if t_gen is None else int(t_gen)
    enc = encoder_from(ckpt)
    den = denoiser_from(ckpt)
    x0 = encode_dataset(enc, dataset, batch_size)
    tables = text_tables(build_text_bank(ckpt.class_names), cfg.text)
    ids = np.array([s.sample_id for s in dataset.sequences], dtype=np.int64)
    E_f = torch.as_tensor(tables.fine_for(dataset.labels, ids), dtype=x0.dtype)
    if not tc.use_fine_text:
        E_f = torch.zeros_like(E_f)
    gen = torch.Generator().manual_seed(int(seed))
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    x_t = q_sample(schedule, x0, t_gen, eps)
    generated = sample(den, schedule, x_t, t_gen, E_f, rng_seed=int(seed) + 1)
    return x0.double().numpy(), generated.double().numpy()


def export_embeddings(ckpt: Checkpoint, dataset: SkeletonDataset, path, include_generated: bool = False,
                      t_gen: int | None = None, seed: int = 0) -> None:
    """Write one CSV row per sample (plus one per generated sample) with its features."""
    _check_compatible(ckpt, dataset)
    if include_generated:
        x0, gen = generate_features(ckpt, dataset, t_gen, seed)
    else:
        x0 = encode_dataset(encoder_from(ckpt), dataset).double().numpy()
        gen = None
    D = x0.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label", "generated"] + [f"f{k}" for k in range(D)])
        for seq, row in zip(dataset.sequences, x0):
            w.writerow([seq.sample_id, seq.label, 0] + [format(v, ".9g") for v in row])
        if gen is not None:
            for seq, row in zip(dataset.sequences, gen):
                w.writerow([seq.sample_id, seq.label, 1] + [format(v, ".9g") for v in row])


@dataclass
class SweepSpec:
    axis: str
    grid: list
    base: RunConfig
    seeds: list

    def validate(self):
        if self.axis not in SWEEP_AXES:
            raise MetricError(f"unknown sweep axis {self.axis!r}")
        if not self.grid or not self.seeds:
            raise MetricError("sweep needs a nonempty grid and seed list")


# Rows of the text-guidance ablation: (fine text conditioning, coarse contrastive term).
TEXT_GUIDANCE = {
    "none": (False, False),
    "fine": (True, False),
    "coarse": (False, True),
    "both": (True, True),
}
# Rows of the training-strategy ablation: (pretrain encoder, pretrain diffusion).
STRATEGIES = {
    "pretrain_both": (True, True),
    "pretrain_none": (False, False),
    "pretrain_diffusion": (False, True),
}
SWEEP_AXES = ("lambda", "T", "text_guidance", "strategy")
ABLATION_GRIDS = {
    "lambda": [0.8, 0.075, 0.01, 0.002, 0.001],
    "T": [10, 20, 25, 30, 35, 40],
    "text_guidance": list(TEXT_GUIDANCE),
    "strategy": list(STRATEGIES),
}
SWEEP_COLUMNS = ("axis", "value", "seed", "top1", "top5", "div", "status")


def apply_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    tc = cfg.train
    if axis == "lambda":
        tc = replace(tc, lam=float(value))
    elif axis == "T":
        tc = replace(tc, T=int(value))
    elif axis == "text_guidance":
        fine, coarse = TEXT_GUIDANCE[str(value)]
        tc = replace(tc, use_fine_text=fine, use_coarse_text=coarse)
    elif axis == "strategy":
        enc, dif = STRATEGIES[str(value)]
        tc = replace(tc, pretrain_encoder=enc, pretrain_diffusion=dif)
    else:
        raise MetricError(f"unknown sweep axis {axis!r}")
    return replace(cfg, train=tc)


def run_sweep(spec: SweepSpec, train: SkeletonDataset, test: SkeletonDataset, path,
              timings_path=None, val: SkeletonDataset | None = None) -> list:
    """Train and evaluate every (grid value, seed) cell, one CSV row per cell.

    A failing cell is written with status ``error:<type>`` and the sweep goes
    on. Wall-clock times go to ``timings_path`` so that the metric file stays
    byte-reproducible.
    """
    spec.validate()
    rows = []
    timings = []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for value in spec.grid:
            for seed in spec.seeds:
                start = time.perf_counter()
                try:
                    cfg = apply_axis(spec.base.set_seed(int(seed)), spec.axis, value)
                    result = run_pipeline(cfg, train, val)
                    rep = evaluate(result["final"], test)
                    row = [spec.axis, value, seed, format(rep.top1, ".9g"), format(rep.top5, ".9g"),
                           format(rep.div, ".9g"), "ok"]
                except (CocoDiffError, KeyError, ValueError, RuntimeError) as exc:
                    log.warning("sweep cell %s=%s seed %s failed: %s", spec.axis, value, seed, exc)
                    row = [spec.axis, value, seed, "nan", "nan", "nan", f"error:{type(exc).__name__}"]
                w.writerow(row)
                fh.flush()
                rows.append(row)
                timings.append([spec.axis, value, seed, format(time.perf_counter() - start, ".3f")])
    if timings_path is not None:
        with open(timings_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["axis", "value", "seed", "wall_time_s"])
            w.writerows(timings)
    return rows
