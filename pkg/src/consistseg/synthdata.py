"""Seeded synthetic multi-class segmentation scenes and split machinery.

Each scene is an n x n grayscale image with a label map over background
plus three structures in a fixed anatomical-style layout: two large
lateral shapes and one smaller central shape, so per-class difficulty
varies with structure size.  Shapes are
Fourier-perturbed ellipses, rendered with per-scene intensity jitter, a
smooth bias field and pixel noise, then nudged by a mild elastic
deformation for pose variety.

Splits follow the even/odd-ID rule for the test set; the remainder is
split randomly into train and validation, and nested labeled subsets of
sizes 5/10/25/50 are drawn from the training portion.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .deform import apply_to_labels, sample_field


class GenerationError(RuntimeError):
    pass


@dataclass
class SceneParams:
    size: int = 64
    n_structures: int = 3
    background_intensity: float = 0.30
    structure_intensities: tuple[float, ...] = (0.62, 0.62, 0.80)
    intensity_jitter: float = 0.10
    noise_sigma: float = 0.08
    bias_amplitude: float = 0.10
    min_pixels_per_class: int = 20
    pose_amplitude: float = 300.0
    pose_sigma: float = 8.0
    max_retries: int = 20


@dataclass
class Scene:
    image: np.ndarray  # (n, n) float in [0, 1]
    labelmap: np.ndarray  # (n, n) int class indices


# Per-structure placement priors as fractions of the image size:
# (cy, cx, ry, rx, jitter). Two large lateral shapes and a central one.
_PRIORS = [
    (0.45, 0.30, 0.28, 0.15, 0.04),
    (0.45, 0.70, 0.28, 0.15, 0.04),
    (0.64, 0.52, 0.15, 0.13, 0.03),
]


def _blob_mask(n: int, cy: float, cx: float, ry: float, rx: float,
               rng: np.random.Generator) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    u = (jj - cx) / rx
    v = (ii - cy) / ry
    rho = np.sqrt(u * u + v * v)
    theta = np.arctan2(v, u)
    pert = np.zeros_like(theta)
    for k in range(2, 6):
        amp = rng.uniform(-0.08, 0.08) / np.sqrt(k)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        pert += amp * np.cos(k * theta + phase)
    return rho <= 1.0 + pert


def generate_scene(rng: np.random.Generator, params: SceneParams | None = None) -> Scene:
    """One seeded scene; retries until all classes are present."""
    params = params or SceneParams()
    if params.n_structures < 1:
        raise GenerationError("need at least one structure class")
    if params.n_structures > len(_PRIORS):
        raise GenerationError(f"at most {len(_PRIORS)} structure classes supported")
    n = params.size
    for _ in range(params.max_retries):
        labelmap = np.zeros((n, n), dtype=np.int64)
        for cls in range(1, params.n_structures + 1):
            cy0, cx0, ry0, rx0, jit = _PRIORS[cls - 1]
            cy = n * (cy0 + rng.uniform(-jit, jit))
            cx = n * (cx0 + rng.uniform(-jit, jit))
            ry = n * ry0 * rng.uniform(0.85, 1.15)
            rx = n * rx0 * rng.uniform(0.85, 1.15)
            labelmap[_blob_mask(n, cy, cx, ry, rx, rng)] = cls

        pose = sample_field(n, n, params.pose_amplitude, params.pose_sigma, rng)
        labelmap = apply_to_labels(pose, labelmap)

        counts = np.bincount(labelmap.reshape(-1), minlength=params.n_structures + 1)
        if (counts[1:] < params.min_pixels_per_class).any():
            continue

        intensities = [params.background_intensity]
        for cls in range(params.n_structures):
            base = params.structure_intensities[cls % len(params.structure_intensities)]
            intensities.append(base + rng.uniform(-params.intensity_jitter,
                                                  params.intensity_jitter))
        image = np.asarray(intensities)[labelmap]
        bias = gaussian_filter(rng.standard_normal((n, n)), sigma=n / 4.0, mode="reflect")
        peak = np.abs(bias).max()
        if peak > 0:
            image = image + bias * (params.bias_amplitude / peak)
        image = image + rng.normal(0.0, params.noise_sigma, size=(n, n))
        return Scene(np.clip(image, 0.0, 1.0), labelmap)
    raise GenerationError(
        f"could not place all {params.n_structures} structures in {params.max_retries} tries"
    )


# -- splits ----------------------------------------------------------------

LABELED_SUBSET_SIZES = (5, 10, 25, 50)


@dataclass
class SplitPlan:
    train_ids: list[int]
    val_ids: list[int]
    test_ids: list[int]
    labeled_subsets: dict[int, list[int]] = field(default_factory=dict)

    def unlabeled_train_ids(self, labeled_size: int) -> list[int]:
        chosen = set(self.labeled_subsets[labeled_size])
        return [i for i in self.train_ids if i not in chosen]


def make_splits(n_total: int, seed: int, train_fraction: float = 0.5,
                subset_sizes=LABELED_SUBSET_SIZES) -> SplitPlan:
    """Even IDs form the test set; the rest splits into train/val; nested
    labeled subsets are drawn from train."""
    if n_total < 2 * max(subset_sizes):
        raise ValueError(
            f"n_total={n_total} too small for a labeled subset of {max(subset_sizes)}"
        )
    test_ids = [i for i in range(n_total) if i % 2 == 0]
    rest = [i for i in range(n_total) if i % 2 == 1]
    rng = np.random.default_rng(seed)
    rest = list(rng.permutation(rest))
    n_train = int(round(train_fraction * len(rest)))
    if n_train < max(subset_sizes):
        raise ValueError(f"training portion {n_train} smaller than largest subset")
    train_ids = sorted(int(i) for i in rest[:n_train])
    val_ids = sorted(int(i) for i in rest[n_train:])
    order = list(rng.permutation(train_ids))
    subsets = {size: sorted(int(i) for i in order[:size]) for size in subset_sizes}
    return SplitPlan(train_ids, val_ids, test_ids, subsets)


# -- on-disk dataset -------------------------------------------------------

def write_pgm16(path, image: np.ndarray) -> None:
    """16-bit binary PGM (big-endian sample bytes per the format)."""
    arr = np.clip(np.round(np.asarray(image) * 65535.0), 0, 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n65535\n".encode())
        fh.write(arr.tobytes())


def write_pgm_labels(path, labelmap: np.ndarray) -> None:
    arr = np.asarray(labelmap)
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("label indices must fit in one byte")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(arr.astype(np.uint8).tobytes())


def _read_pgm(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        data = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    dtype = ">u2" if maxval > 255 else np.uint8
    arr = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return arr.reshape(height, width), maxval


def read_image(path) -> np.ndarray:
    arr, maxval = _read_pgm(path)
    return arr.astype(np.float64) / maxval


def read_labels(path) -> np.ndarray:
    arr, _ = _read_pgm(path)
    return arr.astype(np.int64)


@dataclass
class DatasetOnDisk:
    root: Path
    scenes: dict[int, tuple[str, str]]  # id -> (image path, label path)
    plan: SplitPlan

    def load_scene(self, scene_id: int) -> Scene:
        img_path, lab_path = self.scenes[scene_id]
        return Scene(read_image(self.root / img_path), read_labels(self.root / lab_path))


def generate_dataset(root, n_total: int, seed: int,
                     scene_params: SceneParams | None = None,
                     train_fraction: float = 0.5) -> DatasetOnDisk:
    """Write scenes, label maps and the manifest; deterministic per seed."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    scene_params = scene_params or SceneParams()
    plan = make_splits(n_total, seed, train_fraction)
    split_of = {i: "train" for i in plan.train_ids}
    split_of.update({i: "val" for i in plan.val_ids})
    split_of.update({i: "test" for i in plan.test_ids})

    ss = np.random.SeedSequence([seed, 0xDA7A])
    scenes: dict[int, tuple[str, str]] = {}
    rows = []
    for scene_id in range(n_total):
        rng = np.random.default_rng(ss.spawn(1)[0])
        scene = generate_scene(rng, scene_params)
        img_rel = f"images/{scene_id:04d}.pgm"
        lab_rel = f"labels/{scene_id:04d}.pgm"
        write_pgm16(root / img_rel, scene.image)
        write_pgm_labels(root / lab_rel, scene.labelmap)
        scenes[scene_id] = (img_rel, lab_rel)
        flags = [int(scene_id in plan.labeled_subsets[s]) for s in LABELED_SUBSET_SIZES]
        rows.append([scene_id, img_rel, lab_rel, split_of[scene_id], *flags])

    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "image", "label", "split",
                         *[f"labeled{s}" for s in LABELED_SUBSET_SIZES]])
        writer.writerows(rows)
    return DatasetOnDisk(root, scenes, plan)


def load_dataset(root) -> DatasetOnDisk:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    scenes: dict[int, tuple[str, str]] = {}
    split_members: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    subsets: dict[int, list[int]] = {s: [] for s in LABELED_SUBSET_SIZES}
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            scene_id = int(row["id"])
            scenes[scene_id] = (row["image"], row["label"])
            split_members[row["split"]].append(scene_id)
            for s in LABELED_SUBSET_SIZES:
                if int(row[f"labeled{s}"]):
                    subsets[s].append(scene_id)
    plan = SplitPlan(sorted(split_members["train"]), sorted(split_members["val"]),
                     sorted(split_members["test"]),
                     {s: sorted(ids) for s, ids in subsets.items()})
    return DatasetOnDisk(root, scenes, plan)
