"""Synthetic paired corpus with planted cluster triples."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from ..distill import TeacherCache, build_cache, synthetic_teacher, text_projection
from .config import RunConfig


@dataclass
class SyntheticCorpus:
    image: torch.Tensor  # (n, raw_dim)
    text: torch.Tensor
    image_patches: torch.Tensor  # (n, L, patch_dim)
    text_patches: torch.Tensor
    labels: np.ndarray
    triples: np.ndarray  # (n_triples, 3) ordered cluster chains
    teacher_img: TeacherCache
    teacher_txt: TeacherCache
    train_idx: np.ndarray
    heldout_idx: np.ndarray
    seed: int

    @property
    def size(self) -> int:
        return self.image.shape[0]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def plant_centroids(rng: np.random.Generator, n_clusters: int, n_triples: int, dim: int):
    """Cluster centroids where each planted triple is a bent chain a -> b -> c.

    ``b`` sits between ``a`` and ``c`` on the sphere, while ``a`` and ``c`` are
    far apart, so what follows ``b`` depends on what preceded it.
    """
    centroids = _unit_rows(rng.standard_normal((n_clusters, dim)))
    n_triples = min(n_triples, n_clusters // 3)
    perm = rng.permutation(n_clusters)
    triples = perm[: 3 * n_triples].reshape(n_triples, 3)
    for a, b, c in triples:
        step1 = _unit_rows(rng.standard_normal(dim))
        step2 = _unit_rows(rng.standard_normal(dim))
        centroids[b] = _unit_rows(centroids[a] + 0.9 * step1)
        centroids[c] = _unit_rows(centroids[b] + 0.9 * step2)
    return centroids, triples


def generate_corpus(cfg: RunConfig, seed: int | None = None) -> SyntheticCorpus:
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 1])
    n, p = cfg.n_pairs, cfg.raw_dim
    centroids, triples = plant_centroids(rng, cfg.n_clusters, cfg.n_triples, p)
    labels = rng.integers(0, cfg.n_clusters, size=n)
    latent = centroids[labels] + cfg.item_noise * rng.standard_normal((n, p)) / math.sqrt(p)
    offset = cfg.modality_offset * _unit_rows(rng.standard_normal(p))
    image = latent + cfg.modality_noise * rng.standard_normal((n, p)) / math.sqrt(p)
    text = latent + offset + cfg.modality_noise * rng.standard_normal((n, p)) / math.sqrt(p)

    teacher = synthetic_teacher(seed, n, cfg.tokens, cfg.teacher_dim, labels=labels)
    teacher_t = text_projection(teacher, seed)
    to_patch_i = rng.standard_normal((cfg.teacher_dim, cfg.patch_dim)) / math.sqrt(cfg.teacher_dim)
    to_patch_t = rng.standard_normal((cfg.teacher_dim, cfg.patch_dim)) / math.sqrt(cfg.teacher_dim)
    patch_noise = cfg.modality_noise
    img_patches = teacher.tokens.numpy() @ to_patch_i
    txt_patches = teacher_t.tokens.numpy() @ to_patch_t
    img_patches = img_patches + patch_noise * rng.standard_normal(img_patches.shape)
    txt_patches = txt_patches + patch_noise * rng.standard_normal(txt_patches.shape)

    order = rng.permutation(n)
    n_held = int(round(cfg.heldout_frac * n))
    return SyntheticCorpus(
        image=torch.from_numpy(image), text=torch.from_numpy(text),
        image_patches=torch.from_numpy(img_patches), text_patches=torch.from_numpy(txt_patches),
        labels=labels, triples=triples,
        teacher_img=build_cache(teacher, seed, cfg.teacher_pca),
        teacher_txt=build_cache(teacher_t, seed, cfg.teacher_pca),
        train_idx=np.sort(order[n_held:]), heldout_idx=np.sort(order[:n_held]), seed=seed)


def make_batches(corpus: SyntheticCorpus, split: str, batch_size: int, triple_prob: float,
                 rng: np.random.Generator, n_batches: int | None = None) -> list[np.ndarray]:
    """Batches that co-sample members of planted triples.

    Each slot group is, with probability ``triple_prob``, one item from each
    cluster of a random planted triple (in chain order); otherwise a single
    uniformly drawn item. Items are distinct within a batch.
    """
    pool = corpus.train_idx if split == "train" else corpus.heldout_idx
    by_cluster = {k: pool[corpus.labels[pool] == k] for k in np.unique(corpus.labels[pool])}
    n_batches = n_batches if n_batches is not None else len(pool) // batch_size
    batches = []
    for _ in range(n_batches):
        chosen: list[int] = []
        taken: set[int] = set()
        while len(chosen) < batch_size:
            group = []
            if len(corpus.triples) and len(chosen) + 3 <= batch_size and rng.random() < triple_prob:
                for k in corpus.triples[rng.integers(len(corpus.triples))]:
                    members = by_cluster.get(int(k), np.empty(0, dtype=int))
                    free = [m for m in members if m not in taken]
                    if free:
                        group.append(int(free[rng.integers(len(free))]))
            else:
                cand = int(pool[rng.integers(len(pool))])
                if cand not in taken:
                    group.append(cand)
            for g in group:
                if g not in taken and len(chosen) < batch_size:
                    taken.add(g)
                    chosen.append(g)
        batches.append(np.array(chosen, dtype=np.int64))
    return batches


def triple_cooccurrence(corpus: SyntheticCorpus, batches: list[np.ndarray]) -> tuple[float, float]:
    """Observed vs chance rate at which a batch holds all three clusters of a planted triple."""
    if not len(corpus.triples):
        return 0.0, 0.0
    pool_labels = corpus.labels[np.concatenate(batches)]
    freq = np.bincount(pool_labels, minlength=corpus.labels.max() + 1) / len(pool_labels)
    b = len(batches[0])
    hits, chance = [], []
    for tri in corpus.triples:
        present = [set(tri).issubset(set(corpus.labels[x])) for x in batches]
        hits.append(np.mean(present))
        # P(all three present) for b independent draws, by inclusion-exclusion
        p = freq[list(tri)]
        q = 1.0 - (1 - p[0]) ** b - (1 - p[1]) ** b - (1 - p[2]) ** b \
            + (1 - p[0] - p[1]) ** b + (1 - p[0] - p[2]) ** b + (1 - p[1] - p[2]) ** b \
            - (1 - p.sum()) ** b
        chance.append(q)
    return float(np.mean(hits)), float(np.mean(chance))
