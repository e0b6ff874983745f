"""Synthetic tri-domain point clouds, the DPC1 binary format, corpora and batching."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import DomainId, PointCloud, normalize_cloud

MIN_POINTS = 16
DPC_MAGIC = b"DPC1"
DPC_VERSION = 1
_HEADER = struct.Struct("<4sIB3xI")

OBJECT_CLASSES = ("sphere-dominant", "box-dominant", "cylinder-dominant", "mixed")
SPHERE, BOX, CYLINDER = 0, 1, 2


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


# -- primitive surface samplers -------------------------------------------------------

def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _sample_sphere(rng, n, radius):
    v = rng.normal(size=(n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_box(rng, n, half):
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign
    return pts * np.asarray(half)


def _sample_cylinder(rng, n, radius, height):
    lateral = 2 * np.pi * radius * height
    cap = np.pi * radius**2
    part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    r = np.where(part == 0, radius, radius * np.sqrt(rng.uniform(size=n)))
    z = np.where(part == 0, rng.uniform(-height / 2, height / 2, size=n),
                 np.where(part == 1, height / 2, -height / 2))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _sample_primitive(rng, kind, n):
    if kind == SPHERE:
        pts = _sample_sphere(rng, n, rng.uniform(0.3, 0.6))
    elif kind == BOX:
        pts = _sample_box(rng, n, rng.uniform(0.2, 0.6, size=3))
    else:
        pts = _sample_cylinder(rng, n, rng.uniform(0.2, 0.4), rng.uniform(0.6, 1.2))
    return pts @ _random_rotation(rng).T


def _split_counts(rng, n, shares):
    shares = np.asarray(shares, dtype=float)
    counts = np.floor(shares / shares.sum() * n).astype(int)
    counts[0] += n - counts.sum()
    return counts


def _gen_object(rng, n):
    # dominant classes: 85% of points on one primitive, smaller secondaries as clutter;
    # mixed: one full-size primitive of each kind
    label = int(rng.integers(len(OBJECT_CLASSES)))
    if label == 3:
        kinds, shares, scales = [SPHERE, BOX, CYLINDER], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0]
    else:
        n_prims = int(rng.integers(2, 5))
        others = [k for k in (SPHERE, BOX, CYLINDER) if k != label]
        kinds = [label] + [others[int(rng.integers(2))] if rng.random() < 0.25 else label
                           for _ in range(n_prims - 1)]
        shares = [0.85] + [0.15 / (n_prims - 1)] * (n_prims - 1)
        scales = [1.0] + [0.5] * (n_prims - 1)
    parts = []
    for i, (kind, c) in enumerate(zip(kinds, _split_counts(rng, n, shares))):
        offset = np.zeros(3) if i == 0 and label != 3 else rng.uniform(-0.8, 0.8, size=3)
        parts.append(_sample_primitive(rng, kind, c) * scales[i] + offset)
    pts = np.concatenate(parts) @ _random_rotation(rng).T + rng.uniform(-0.5, 0.5, size=3)
    return pts, label


def _gen_face(rng, n):
    a = 0.75 * rng.uniform(0.9, 1.1)
    b = 1.0 * rng.uniform(0.9, 1.1)
    r = np.sqrt(rng.uniform(size=n))
    t = rng.uniform(0, 2 * np.pi, size=n)
    x, y = a * r * np.cos(t), b * r * np.sin(t)
    z = rng.uniform(0.1, 0.2) * (1.0 - (x / a) ** 2 - (y / b) ** 2)
    # nose, brows and cheeks
    centers = [(0.0, rng.uniform(-0.1, 0.1)), (0.0, 0.35), (-0.35, -0.2), (0.35, -0.2)]
    for cx, cy in centers[: int(rng.integers(2, 5))]:
        amp = rng.uniform(0.05, 0.15)
        sig = rng.uniform(0.08, 0.25)
        z = z + amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sig**2))
    z = z + rng.normal(scale=0.003, size=n)
    return np.stack([x, y, z], axis=1), None


def _gen_scene(rng, n):
    length, width, height = rng.uniform(6, 12), rng.uniform(6, 12), rng.uniform(2.5, 3.5)
    n_boxes = int(rng.integers(3, 9))
    boxes = [(rng.uniform(0.25, 0.75, size=3), rng.uniform(0.8, [length - 0.8, width - 0.8]))
             for _ in range(n_boxes)]
    areas = [length * width, length * height, width * height]
    areas += [2 * (h[0] * h[1] + h[0] * h[2] + h[1] * h[2]) * 4 for h, _ in boxes]
    counts = _split_counts(rng, n, areas)
    parts = [
        np.stack([rng.uniform(0, length, counts[0]), rng.uniform(0, width, counts[0]), np.zeros(counts[0])], 1),
        np.stack([rng.uniform(0, length, counts[1]), np.zeros(counts[1]), rng.uniform(0, height, counts[1])], 1),
        np.stack([np.zeros(counts[2]), rng.uniform(0, width, counts[2]), rng.uniform(0, height, counts[2])], 1),
    ]
    for (half, xy), c in zip(boxes, counts[3:]):
        p = _sample_box(rng, c, half)
        parts.append(p + np.array([xy[0], xy[1], half[2]]))
    return np.concatenate(parts), None


_GENERATORS = {DomainId.OBJECT: _gen_object, DomainId.FACE: _gen_face, DomainId.SCENE: _gen_scene}


def synthesize(domain, seed: int, n_points: int) -> tuple[PointCloud, int | None]:
    """Generate one cloud and its class label (object domain only; ``None`` otherwise)."""
    domain = DomainId.parse(domain)
    if n_points < MIN_POINTS:
        raise ValueError(f"n_points must be >= {MIN_POINTS}, got {n_points}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(domain)]))
    pts, label = _GENERATORS[domain](rng, n_points)
    perm = rng.permutation(n_points)
    return PointCloud(pts[perm].astype(np.float32), domain, f"{domain.slug}_{seed}"), label


def gen_synthetic(domain, seed: int, n_points: int) -> PointCloud:
    return synthesize(domain, seed, n_points)[0]


# -- DPC1 -----------------------------------------------------------------------------

def encode_dpc(cloud: PointCloud) -> bytes:
    pts = np.ascontiguousarray(cloud.points, dtype="<f4")
    return _HEADER.pack(DPC_MAGIC, DPC_VERSION, int(cloud.domain), pts.shape[0]) + pts.tobytes()


def decode_dpc(buf: bytes, cloud_id: str = "") -> PointCloud:
    if len(buf) < 4 or buf[:4] != DPC_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {DPC_MAGIC!r}", 0)
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header ({len(buf)} of {_HEADER.size} bytes)", len(buf))
    _, version, domain, count = _HEADER.unpack_from(buf)
    if version != DPC_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if domain not in (0, 1, 2):
        raise FormatError(f"unknown domain code {domain}", 8)
    need = _HEADER.size + 12 * count
    if len(buf) < need:
        raise FormatError(f"truncated payload: expected {need} bytes, got {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after payload", need)
    pts = np.frombuffer(buf, dtype="<f4", count=3 * count, offset=_HEADER.size).reshape(count, 3)
    return PointCloud(pts.astype(np.float32), DomainId(domain), cloud_id)


def save_dpc(cloud: PointCloud, path) -> None:
    Path(path).write_bytes(encode_dpc(cloud))


def load_dpc(path) -> PointCloud:
    path = Path(path)
    return decode_dpc(path.read_bytes(), path.stem)


# -- corpora --------------------------------------------------------------------------

@dataclass
class Corpus:
    clouds: list[PointCloud]
    labels: list[int] | None = None

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.clouds):
            raise ValueError("labels must cover every cloud")

    def __len__(self) -> int:
        return len(self.clouds)

    @property
    def manifest(self) -> dict[str, int]:
        counts = {d.slug: 0 for d in DomainId}
        for c in self.clouds:
            counts[c.domain.slug] += 1
        return counts

    @property
    def domains(self) -> set[DomainId]:
        return {c.domain for c in self.clouds}

    def subset(self, domain) -> "Corpus":
        domain = DomainId.parse(domain)
        keep = [i for i, c in enumerate(self.clouds) if c.domain == domain]
        labels = [self.labels[i] for i in keep] if self.labels is not None else None
        return Corpus([self.clouds[i] for i in keep], labels)

    def __add__(self, other: "Corpus") -> "Corpus":
        labels = None
        if self.labels is not None and other.labels is not None:
            labels = self.labels + other.labels
        return Corpus(self.clouds + other.clouds, labels)


def gen_corpus(counts: dict, n_points: int, seed: int = 0) -> Corpus:
    """``counts`` maps domain -> number of clouds; cloud ``i`` uses seed ``seed * 100003 + i``."""
    clouds, labels = [], []
    for dom, count in counts.items():
        for i in range(count):
            cloud, label = synthesize(dom, seed * 100003 + i, n_points)
            clouds.append(cloud)
            labels.append(label)
    if all(lab is None for lab in labels):
        return Corpus(clouds)
    if any(lab is None for lab in labels):
        labels = [-1 if lab is None else lab for lab in labels]
    return Corpus(clouds, labels)


def object_task_corpus(n: int, n_points: int, seed: int) -> Corpus:
    return gen_corpus({DomainId.OBJECT: n}, n_points, seed)


MANIFEST_NAME = "manifest.json"


def write_manifest(directory, entries: list[dict]) -> Path:
    directory = Path(directory)
    entries = sorted(entries, key=lambda e: e["path"])
    counts = {d.slug: 0 for d in DomainId}
    for e in entries:
        counts[DomainId(e["domain"]).slug] += 1
    doc = {"entries": entries, "counts": counts}
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    doc = json.loads(path.read_text())
    if not isinstance(doc, dict) or not isinstance(doc.get("entries"), list):
        raise ValueError(f"{path}: manifest must be an object with an 'entries' list")
    return doc


def load_corpus(path) -> Corpus:
    path = Path(path)
    root = path if path.is_dir() else path.parent
    doc = read_manifest(path)
    clouds, labels = [], []
    for e in doc["entries"]:
        cloud = load_dpc(root / e["path"])
        if int(e["domain"]) != int(cloud.domain):
            raise ValueError(f"{e['path']}: manifest domain {e['domain']} disagrees with file {int(cloud.domain)}")
        clouds.append(cloud)
        labels.append(e.get("label"))
    if all(lab is None for lab in labels):
        return Corpus(clouds)
    return Corpus(clouds, [-1 if lab is None else int(lab) for lab in labels])


# -- batching -------------------------------------------------------------------------

@dataclass
class Batch:
    clouds: list[PointCloud]
    domains: list[DomainId]
    labels: list[int] | None = None
    points: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.clouds) != len(self.domains):
            raise ValueError("one domain per cloud is required")
        if self.points is None:
            self.points = np.stack([c.points for c in self.clouds])

    def __len__(self) -> int:
        return len(self.clouds)


def subsample(points: np.ndarray, n_points: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    idx = rng.choice(n, size=n_points, replace=n < n_points)
    return points[idx]


def augment(points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    scale = rng.uniform(0.8, 1.25)
    shift = rng.uniform(-0.1, 0.1, size=3)
    return points * scale + shift


def _repair_mixing(groups: list[list[int]], dom: list[int]) -> None:
    def single(g):
        return len({dom[i] for i in g}) < 2

    nb = len(groups)
    for i in range(nb):
        if not single(groups[i]):
            continue
        d = dom[groups[i][0]]
        order = list(range(i + 1, nb)) + list(range(i - 1, -1, -1))
        choice = None
        for j in order:
            cands = [pos for pos, idx in enumerate(groups[j]) if dom[idx] != d]
            for pos in cands:
                rest = {dom[x] for p, x in enumerate(groups[j]) if p != pos} | {d}
                if len(rest) >= 2 or len(groups[j]) == 1:
                    choice = (j, pos)
                    break
            if choice is None and cands:
                choice = (j, cands[0])
            if choice is not None:
                break
        if choice is None:
            continue
        j, pos = choice
        groups[i][-1], groups[j][pos] = groups[j][pos], groups[i][-1]


def make_batches(corpus: Corpus, batch_size: int, n_points: int, seed: int, augment_points: bool = False) -> list[Batch]:
    """One epoch of normalized, subsampled batches in a seeded random order."""
    if len(corpus) == 0:
        raise ValueError("cannot batch an empty corpus")
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(corpus)).tolist()
    groups = [perm[i:i + batch_size] for i in range(0, len(perm), batch_size)]
    if len(groups) > 1 and len(groups[-1]) == 1:
        groups[-2].extend(groups.pop())
    dom = [int(c.domain) for c in corpus.clouds]
    if len(set(dom)) >= 2:
        _repair_mixing(groups, dom)

    batches = []
    for g in groups:
        clouds = []
        for i in g:
            src = corpus.clouds[i]
            pts = subsample(normalize_cloud(src).points, n_points, rng)
            if augment_points:
                pts = augment(pts, rng)
            clouds.append(PointCloud(pts.astype(np.float32), src.domain, src.id))
        labels = [corpus.labels[i] for i in g] if corpus.labels is not None else None
        batches.append(Batch(clouds, [c.domain for c in clouds], labels))
    return batches
