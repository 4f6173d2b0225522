"""Image+mask embedding, deterministic k-means, and the cluster-model registry."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .denoiser import DenoiserNet
from .styling import FeatureExtractor

FULL_MODEL = "full"


def embed_pair(image: np.ndarray, mask: np.ndarray, extractor: FeatureExtractor) -> np.ndarray:
    """Concatenate the global tokens of the image and of the replicated mask."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"embed_pair expects a [3,H,W] image, got {image.shape}")
    if mask.shape != image.shape[1:]:
        raise ValueError(f"mask {mask.shape} does not match image spatial dims {image.shape[1:]}")
    img_tok = extractor.tokens_np(image[None].astype(np.float32))[0]
    mask3 = np.broadcast_to(mask, (3,) + mask.shape).astype(np.float32)
    mask_tok = extractor.tokens_np(mask3[None])[0]
    return np.concatenate([img_tok, mask_tok]).astype(np.float32)


def embed_dataset(
    samples: list[np.ndarray], extractor: FeatureExtractor, normalize: bool = False
) -> np.ndarray:
    """Stack pair embeddings for a list of 4-channel samples."""
    rows = [embed_pair(s[:3], s[3], extractor) for s in samples]
    out = np.stack(rows)
    if normalize:
        norms = np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-12)
        out = out / norms
    return out.astype(np.float32)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (n, k) squared euclidean distances in float64 for stable argmins
    p = points.astype(np.float64)
    c = centroids.astype(np.float64)
    return ((p[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def kmeans(
    points: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iter: int = 100,
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    Ties break toward the lower cluster id; empty clusters steal the point
    farthest from its current centroid. Runs to an assignment fixpoint or
    max_iter rounds.
    """
    points = np.asarray(points, dtype=np.float32)
    n = points.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} must be in 1..{n}")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")

    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(0, n)]
    for i in range(1, k):
        d2 = _sq_dists(points, centroids[:i]).min(axis=1)
        total = d2.sum()
        if total <= 0:
            centroids[i] = points[rng.integers(0, n)]
        else:
            centroids[i] = points[rng.choice(n, p=d2 / total)]

    assignment = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iter):
        d2 = _sq_dists(points, centroids)
        new_assign = d2.argmin(axis=1)  # argmin picks the lowest id on ties
        for cid in range(k):
            if np.any(new_assign == cid):
                continue
            dist_own = d2[np.arange(n), new_assign].copy()
            counts = np.bincount(new_assign, minlength=k)
            dist_own[counts[new_assign] <= 1] = -np.inf  # don't empty another cluster
            thief = int(dist_own.argmax())
            new_assign[thief] = cid
            d2[thief, :] = 0.0
            d2[thief, cid] = -1.0
        if np.array_equal(new_assign, assignment):
            break
        assignment = new_assign
        for cid in range(k):
            centroids[cid] = points[assignment == cid].astype(np.float64).mean(axis=0)
    return assignment, centroids.astype(np.float32)


def wcss(points: np.ndarray, assignment: np.ndarray, centroids: np.ndarray) -> float:
    """Within-cluster sum of squares."""
    d2 = _sq_dists(points, centroids)
    return float(d2[np.arange(points.shape[0]), assignment].sum())


@dataclass
class ClusterRegistry:
    """Cluster assignments plus the checkpoint behind each cluster model.

    A registry may also carry a single full-dataset checkpoint; with no
    per-cluster checkpoints at all it runs in full-only mode and every
    model draw returns the full model.
    """

    k: int
    assignment: dict[str, int]
    centroids: np.ndarray | None = None
    checkpoints: dict[int, str] = field(default_factory=dict)
    full_checkpoint: str | None = None
    base_dir: Path = field(default_factory=Path)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for name, cid in self.assignment.items():
            if not 0 <= cid < self.k:
                raise ValueError(f"sample {name!r} assigned to out-of-range cluster {cid}")

    @property
    def full_only(self) -> bool:
        return not self.checkpoints and self.full_checkpoint is not None

    def is_complete(self) -> bool:
        if self.full_only:
            return True
        return all(cid in self.checkpoints for cid in range(self.k))

    def members(self, cid: int) -> list[str]:
        return sorted(name for name, c in self.assignment.items() if c == cid)

    def pick_model(self, rng: np.random.Generator) -> int | str:
        """Uniform cluster draw; full-only registries always yield the full model."""
        if self.full_only:
            return FULL_MODEL
        if not self.is_complete():
            missing = [cid for cid in range(self.k) if cid not in self.checkpoints]
            raise ValueError(f"registry is partial; missing checkpoints for clusters {missing}")
        return int(rng.integers(0, self.k))

    def _resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def load_net(self, cluster: int | str) -> DenoiserNet:
        if cluster in self._cache:
            return self._cache[cluster]
        if cluster == FULL_MODEL:
            if self.full_checkpoint is None:
                raise ValueError("registry has no full-dataset checkpoint")
            path = self._resolve(self.full_checkpoint)
        else:
            if cluster not in self.checkpoints:
                raise ValueError(f"no checkpoint for cluster {cluster}")
            path = self._resolve(self.checkpoints[int(cluster)])
        net, _ = DenoiserNet.load(path)
        self._cache[cluster] = net
        return net

    def save(self, path: str | Path) -> None:
        lines = ["MASKDIFF-REGISTRY-1", f"k {self.k}"]
        if self.centroids is not None:
            for cid, row in enumerate(self.centroids):
                lines.append(f"centroid {cid} {','.join(f'{v:.9g}' for v in row)}")
        for cid in sorted(self.checkpoints):
            lines.append(f"checkpoint {cid} {self.checkpoints[cid]}")
        if self.full_checkpoint:
            lines.append(f"checkpoint full {self.full_checkpoint}")
        for name in sorted(self.assignment):
            lines.append(f"member {name} {self.assignment[name]}")
        lines.append("end")
        tmp = Path(str(path) + ".tmp")
        tmp.write_text("\n".join(lines) + "\n")
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "ClusterRegistry":
        path = Path(path)
        k = 0
        assignment: dict[str, int] = {}
        checkpoints: dict[int, str] = {}
        full_ckpt = None
        cent_rows: dict[int, np.ndarray] = {}
        lines = path.read_text().splitlines()
        if not lines or lines[0] != "MASKDIFF-REGISTRY-1":
            raise ValueError(f"{path}: not a registry file")
        for line in lines[1:]:
            if line == "end":
                break
            kind, rest = line.split(" ", 1)
            if kind == "k":
                k = int(rest)
            elif kind == "centroid":
                cid, vals = rest.split(" ", 1)
                cent_rows[int(cid)] = np.array([float(v) for v in vals.split(",")], dtype=np.float32)
            elif kind == "checkpoint":
                cid, p = rest.split(" ", 1)
                if cid == "full":
                    full_ckpt = p
                else:
                    checkpoints[int(cid)] = p
            elif kind == "member":
                name, cid = rest.rsplit(" ", 1)
                assignment[name] = int(cid)
            else:
                raise ValueError(f"{path}: unknown registry line {line!r}")
        centroids = None
        if cent_rows:
            centroids = np.stack([cent_rows[i] for i in range(len(cent_rows))])
        return cls(
            k=k,
            assignment=assignment,
            centroids=centroids,
            checkpoints=checkpoints,
            full_checkpoint=full_ckpt,
            base_dir=path.parent,
        )

    def export_membership_csv(self, path: str | Path) -> None:
        lines = ["sample,cluster"]
        lines += [f"{name},{self.assignment[name]}" for name in sorted(self.assignment)]
        Path(path).write_text("\n".join(lines) + "\n")


def build_registry(
    assignment: dict[str, int],
    checkpoints: dict[int, str],
    full_checkpoint: str | None = None,
    centroids: np.ndarray | None = None,
    base_dir: str | Path = ".",
) -> ClusterRegistry:
    """Validate and assemble a registry; partial registries load but refuse
    generation at pick time."""
    k = (max(assignment.values()) + 1) if assignment else max(checkpoints, default=-1) + 1
    return ClusterRegistry(
        k=k,
        assignment=dict(assignment),
        centroids=centroids,
        checkpoints=dict(checkpoints),
        full_checkpoint=full_checkpoint,
        base_dir=Path(base_dir),
    )
