"""Synthetic skeleton sequences, their text container format, and batching.

Each action class is a parametric motion family: every joint oscillates around
a rest pose with a class-specific amplitude, phase and frequency profile.
Samples of a class differ by body scale, playback speed, phase offset, a small
per-sample style perturbation of the amplitude profile, and Gaussian jitter.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, ParseError

FORMAT_NAME = "cocodiff-skeleton"
FORMAT_VERSION = 1

# NTU RGB+D 25-joint wiring, 0-based.
NTU_EDGES = (
    (0, 1), (1, 20), (2, 20), (3, 2), (4, 20), (5, 4), (6, 5), (7, 6),
    (8, 20), (9, 8), (10, 9), (11, 10), (12, 0), (13, 12), (14, 13),
    (15, 14), (16, 0), (17, 16), (18, 17), (19, 18), (21, 22), (22, 7),
    (23, 24), (24, 11),
)

# Rough standing rest pose (x right, y up, z depth) for the 25 NTU joints.
_NTU_REST = np.array([
    [0.00, 0.00, 0.0],    # 0 base of spine
    [0.00, 0.30, 0.0],    # 1 mid spine
    [0.00, 0.65, 0.0],    # 2 neck
    [0.00, 0.80, 0.0],    # 3 head
    [-0.18, 0.55, 0.0],   # 4 left shoulder
    [-0.25, 0.30, 0.0],   # 5 left elbow
    [-0.30, 0.05, 0.0],   # 6 left wrist
    [-0.32, -0.02, 0.0],  # 7 left hand
    [0.18, 0.55, 0.0],    # 8 right shoulder
    [0.25, 0.30, 0.0],    # 9 right elbow
    [0.30, 0.05, 0.0],    # 10 right wrist
    [0.32, -0.02, 0.0],   # 11 right hand
    [-0.10, -0.02, 0.0],  # 12 left hip
    [-0.12, -0.45, 0.0],  # 13 left knee
    [-0.13, -0.85, 0.0],  # 14 left ankle
    [-0.13, -0.90, 0.08], # 15 left foot
    [0.10, -0.02, 0.0],   # 16 right hip
    [0.12, -0.45, 0.0],   # 17 right knee
    [0.13, -0.85, 0.0],   # 18 right ankle
    [0.13, -0.90, 0.08],  # 19 right foot
    [0.00, 0.58, 0.0],    # 20 spine at shoulders
    [-0.34, -0.07, 0.0],  # 21 left hand tip
    [-0.30, -0.02, 0.04], # 22 left thumb
    [0.34, -0.07, 0.0],   # 23 right hand tip
    [0.30, -0.02, 0.04],  # 24 right thumb
])


@dataclass(frozen=True)
class GraphTopology:
    num_joints: int
    edges: tuple
    center_joint: int = 0

    def __post_init__(self):
        edges = tuple(tuple(sorted((int(a), int(b)))) for a, b in self.edges)
        object.__setattr__(self, "edges", tuple(sorted(set(edges))))
        if self.num_joints < 1:
            raise ConfigError("num_joints", "must be positive")
        for a, b in self.edges:
            if not (0 <= a < self.num_joints and 0 <= b < self.num_joints):
                raise ConfigError("edges", f"edge ({a}, {b}) out of range for {self.num_joints} joints")
            if a == b:
                raise ConfigError("edges", f"self loop on joint {a}")
        if not 0 <= self.center_joint < self.num_joints:
            raise ConfigError("center_joint", "out of range")
        if not self._connected():
            raise ConfigError("edges", "joint graph is not connected")

    def _connected(self) -> bool:
        adj = {v: [] for v in range(self.num_joints)}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        seen = {0}
        stack = [0]
        while stack:
            for w in adj[stack.pop()]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return len(seen) == self.num_joints

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.num_joints, self.num_joints))
        for a, b in self.edges:
            A[a, b] = A[b, a] = 1.0
        return A


def ntu_topology() -> GraphTopology:
    return GraphTopology(25, NTU_EDGES, center_joint=20)


@dataclass
class SkeletonSequence:
    data: np.ndarray  # [C, T, V, M] float32
    label: int
    sample_id: int


@dataclass
class GenerationSpec:
    num_classes: int = 6
    samples_per_class: int = 100
    topology: GraphTopology = field(default_factory=ntu_topology)
    frames: int = 64
    actors: int = 2
    jitter_std: float = 0.02
    scale_range: tuple = (0.85, 1.15)
    speed_range: tuple = (0.9, 1.1)
    phase_range: tuple = (-np.pi / 4, np.pi / 4)
    seed: int = 0
    # Per-sample multiplicative noise on the class amplitude profile.
    style_std: float = 0.0
    # Seeds the class motion families; keep fixed so that datasets drawn
    # with different `seed` values share the same classes.
    family_seed: int = 0

    def validate(self):
        for name in ("num_classes", "samples_per_class", "frames", "actors"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, "must be a positive integer")
        if self.jitter_std < 0:
            raise ConfigError("jitter_std", "must be nonnegative")
        if self.style_std < 0:
            raise ConfigError("style_std", "must be nonnegative")
        for name in ("scale_range", "speed_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ConfigError(name, f"must be a positive interval, got {(lo, hi)}")
        lo, hi = self.phase_range
        if lo > hi:
            raise ConfigError("phase_range", "lower bound exceeds upper bound")


@dataclass
class SkeletonDataset:
    sequences: list
    class_names: list
    topology: GraphTopology

    def __post_init__(self):
        n = len(self.class_names)
        for seq in self.sequences:
            if not 0 <= seq.label < n:
                raise ConfigError("label", f"label {seq.label} outside [0, {n})")

    def __len__(self):
        return len(self.sequences)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sequences], dtype=np.int64)

    def stack(self) -> np.ndarray:
        """All sequences as one [N, C, T, V, M] array."""
        return np.stack([s.data for s in self.sequences]) if self.sequences else np.zeros((0,))

    def subset(self, indices) -> "SkeletonDataset":
        return SkeletonDataset([self.sequences[i] for i in indices], list(self.class_names), self.topology)


@dataclass
class Batch:
    data: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray

    def __len__(self):
        return len(self.labels)


DEFAULT_CLASS_NAMES = (
    "throw", "drink water", "wave hand", "kick", "jump", "read",
    "sit down", "stand up", "clap", "point", "push", "hug",
)


def default_class_names(n: int) -> list:
    names = list(DEFAULT_CLASS_NAMES[:n])
    names += [f"action {i}" for i in range(len(names), n)]
    return names


def _class_family(num_joints: int, class_id: int, family_seed: int):
    rng = np.random.default_rng([family_seed, 7919, class_id])
    amp = rng.normal(0.0, 0.12, size=(num_joints, 3))
    amp2 = rng.normal(0.0, 0.05, size=(num_joints, 3))
    phase = rng.uniform(0, 2 * np.pi, size=(num_joints, 3))
    freq = rng.uniform(0.75, 2.25)
    two_actor = class_id % 3 == 2
    return amp, amp2, phase, freq, two_actor


def _rest_pose(num_joints: int) -> np.ndarray:
    if num_joints == 25:
        return _NTU_REST
    # generic layout for non-NTU topologies: joints on a vertical line
    pose = np.zeros((num_joints, 3))
    pose[:, 1] = np.linspace(-0.9, 0.8, num_joints)
    return pose


def _generate_one(spec: GenerationSpec, label: int, sample_id: int) -> np.ndarray:
    V, T, M = spec.topology.num_joints, spec.frames, spec.actors
    amp, amp2, phase, freq, two_actor = _class_family(V, label, spec.family_seed)
    rest = _rest_pose(V)
    rng = np.random.default_rng([spec.seed, sample_id])
    scale = rng.uniform(*spec.scale_range)
    speed = rng.uniform(*spec.speed_range)
    phase0 = rng.uniform(*spec.phase_range)
    style = 1.0 + spec.style_std * rng.standard_normal(amp.shape)

    tau = np.arange(T) / T
    arg = 2 * np.pi * freq * speed * tau[:, None, None] + phase[None] + phase0
    motion = (amp * style)[None] * np.sin(arg) + amp2[None] * np.sin(2 * arg)
    actor = scale * (rest[None] + motion)  # [T, V, 3]

    out = np.zeros((3, T, V, M))
    out[..., 0] = actor.transpose(2, 0, 1)
    if M > 1 and two_actor:
        partner = scale * (rest[None] * np.array([-1.0, 1.0, 1.0]) - motion + np.array([1.0, 0.0, 0.0]))
        out[..., 1] = partner.transpose(2, 0, 1)
    if spec.jitter_std > 0:
        noise = spec.jitter_std * rng.standard_normal(out.shape)
        if M > 1 and not two_actor:
            noise[..., 1:] = 0.0
        out += noise
    return out.astype(np.float32)


def generate_dataset(spec: GenerationSpec, class_names=None) -> SkeletonDataset:
    spec.validate()
    names = list(class_names) if class_names is not None else default_class_names(spec.num_classes)
    if len(names) != spec.num_classes:
        raise ConfigError("class_names", f"expected {spec.num_classes} names, got {len(names)}")
    sequences = []
    sid = 0
    for label in range(spec.num_classes):
        for _ in range(spec.samples_per_class):
            sequences.append(SkeletonSequence(_generate_one(spec, label, sid), label, sid))
            sid += 1
    return SkeletonDataset(sequences, names, spec.topology)


def stratified_split(ds: SkeletonDataset, fraction: float, seed: int):
    """Split into (rest, held_out) with `fraction` of every class held out."""
    rng = np.random.default_rng(seed)
    labels = ds.labels
    held = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(labels == c)
        k = int(round(fraction * len(idx)))
        held.extend(rng.permutation(idx)[:k].tolist())
    held_set = set(held)
    rest = [i for i in range(len(ds)) if i not in held_set]
    return ds.subset(rest), ds.subset(sorted(held))


def _fmt(values: np.ndarray) -> str:
    # str() of a float32 scalar is its shortest round-trip repr
    return " ".join(map(str, values.astype(np.float32).ravel()))


def save_dataset(ds: SkeletonDataset, path) -> None:
    shape = list(ds.sequences[0].data.shape) if ds.sequences else None
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "class_names": list(ds.class_names),
        "num_joints": ds.topology.num_joints,
        "edges": [list(e) for e in ds.topology.edges],
        "center_joint": ds.topology.center_joint,
        "shape": shape,
        "count": len(ds),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for seq in ds.sequences:
            fh.write(f"{seq.sample_id} {seq.label} {_fmt(seq.data)}\n")


def load_dataset(path) -> SkeletonDataset:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad header: {exc.msg}", line=1) from None
        if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
            raise ParseError("not a skeleton dataset file", line=1)
        try:
            topology = GraphTopology(header["num_joints"], tuple(map(tuple, header["edges"])),
                                     header["center_joint"])
            names = list(header["class_names"])
        except (KeyError, TypeError, ConfigError) as exc:
            raise ParseError(f"bad header: {exc}", line=1) from None
        shape = header.get("shape")
        size = int(np.prod(shape)) if shape else 0
        sequences = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != size + 2:
                raise ParseError(f"expected {size + 2} fields, got {len(parts)}", line=lineno)
            try:
                sid, label = int(parts[0]), int(parts[1])
                values = np.array(parts[2:], dtype=np.float32)
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if not 0 <= label < len(names):
                raise ParseError(f"label {label} outside [0, {len(names)})", line=lineno)
            if not np.all(np.isfinite(values)):
                raise ParseError("non-finite coordinate", line=lineno)
            sequences.append(SkeletonSequence(values.reshape(shape), label, sid))
    if "count" in header and header["count"] != len(sequences):
        raise ParseError(f"header declares {header['count']} records, found {len(sequences)}")
    return SkeletonDataset(sequences, names, topology)


def batch_iter(ds: SkeletonDataset, batch_size: int, shuffle_seed=None,
               drop_last: bool = False) -> Iterator[Batch]:
    """Yield batches in a permutation fixed by `shuffle_seed` (None keeps order)."""
    if batch_size < 1:
        raise ConfigError("batch_size", "must be >= 1")
    n = len(ds)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        seqs = [ds.sequences[i] for i in idx]
        yield Batch(
            data=np.stack([s.data for s in seqs]),
            labels=np.array([s.label for s in seqs], dtype=np.int64),
            sample_ids=np.array([s.sample_id for s in seqs], dtype=np.int64),
        )


def batch_sizes(n: int, batch_size: int, drop_last: bool) -> Sequence[int]:
    full, rem = divmod(n, batch_size)
    return [batch_size] * full + ([] if drop_last or rem == 0 else [rem])
