"""Synthetic shape datasets standing in for real scanned objects."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..pointops import PointCloud

SHAPES = ("sphere", "cube", "torus", "cylinder", "cone")


def _sphere(n, rng):
    p = rng.normal(size=(n, 3))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def _cube(n, rng):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    p = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    for a in range(3):
        m = axis == a
        others = [b for b in range(3) if b != a]
        p[m, a] = sign[m]
        p[m, others[0]] = uv[m, 0]
        p[m, others[1]] = uv[m, 1]
    return p


def _torus(n, rng, major=1.0, minor=0.4):
    theta = np.empty(0)
    while theta.size < n:
        cand = rng.uniform(0, 2 * np.pi, size=2 * n)
        keep = rng.uniform(0, 1, size=2 * n) < (major + minor * np.cos(cand)) / (major + minor)
        theta = np.concatenate([theta, cand[keep]])
    theta = theta[:n]
    phi = rng.uniform(0, 2 * np.pi, size=n)
    ring = major + minor * np.cos(theta)
    return np.stack([ring * np.cos(phi), ring * np.sin(phi), minor * np.sin(theta)], axis=1)


def _cylinder(n, rng, radius=1.0, half_height=1.0):
    side = 2 * np.pi * radius * 2 * half_height
    cap = np.pi * radius**2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    phi = rng.uniform(0, 2 * np.pi, size=n)
    rad = np.where(part == 0, radius, radius * np.sqrt(rng.uniform(0, 1, size=n)))
    z = np.where(part == 0, rng.uniform(-half_height, half_height, size=n), np.where(part == 1, half_height, -half_height))
    return np.stack([rad * np.cos(phi), rad * np.sin(phi), z], axis=1)


def _cone(n, rng, radius=1.0, height=2.0):
    lateral = np.pi * radius * np.hypot(radius, height)
    base = np.pi * radius**2
    on_side = rng.uniform(0, 1, size=n) < lateral / (lateral + base)
    frac = np.sqrt(rng.uniform(0, 1, size=n))  # density grows linearly away from the apex
    phi = rng.uniform(0, 2 * np.pi, size=n)
    rad = np.where(on_side, radius * frac, radius * np.sqrt(rng.uniform(0, 1, size=n)))
    z = np.where(on_side, height * (1.0 - frac), 0.0) - height / 2
    return np.stack([rad * np.cos(phi), rad * np.sin(phi), z], axis=1)


_GENERATORS = {"sphere": _sphere, "cube": _cube, "torus": _torus, "cylinder": _cylinder, "cone": _cone}


def gen_shape(kind: str, n_points: int, seed: int, jitter: float = 0.0) -> PointCloud:
    """Uniform surface samples of a unit-scale primitive plus Gaussian jitter."""
    if kind not in _GENERATORS:
        raise ValueError(f"unknown shape kind {kind!r}; choose from {', '.join(SHAPES)}")
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    p = _GENERATORS[kind](n_points, rng)
    if jitter > 0:
        p = p + rng.normal(0.0, jitter, size=p.shape)
    return PointCloud(p)


@dataclass
class SyntheticDataset:
    classes: tuple[str, ...] = SHAPES
    n_points: int = 256
    per_class_train: int = 200
    per_class_test: int = 50
    jitter: float = 0.01
    seed: int = 0
    clouds: list[np.ndarray] = field(default_factory=list, repr=False)
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp), repr=False)
    is_train: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool), repr=False)

    def __post_init__(self):
        self.classes = tuple(self.classes)
        for kind in self.classes:
            if kind not in _GENERATORS:
                raise ValueError(f"unknown shape kind {kind!r}")
        if not self.clouds:
            self._generate()

    def _generate(self):
        clouds, labels, split = [], [], []
        per = self.per_class_train + self.per_class_test
        for c, kind in enumerate(self.classes):
            for i in range(per):
                seed = self.seed * 1_000_003 + c * 10_007 + i
                clouds.append(gen_shape(kind, self.n_points, seed, self.jitter).coords)
                labels.append(c)
                split.append(i < self.per_class_train)
        self.clouds = clouds
        self.labels = np.asarray(labels, dtype=np.intp)
        self.is_train = np.asarray(split, dtype=bool)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def indices(self, train: bool) -> np.ndarray:
        return np.flatnonzero(self.is_train == train)
