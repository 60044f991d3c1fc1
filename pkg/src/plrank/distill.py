"""Structural distillation: row-normalised Gram matching, relational angles,
and a frozen synthetic teacher with an on-disk feature cache."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .numerics import DTYPE, ShapeError, pca_fit

CACHE_MAGIC = b"PLRANK-TEACHER-CACHE\n"
CACHE_VERSION = 1
EXHAUSTIVE_TRIPLES_MAX_BATCH = 8
DEGENERATE_TOL = 1e-12


def gram_normalised(tokens: torch.Tensor) -> torch.Tensor:
    """``V V^T`` with every row scaled to unit Euclidean norm (zero rows stay zero)."""
    gram = tokens @ tokens.transpose(-1, -2)
    norm = gram.norm(dim=-1, keepdim=True)
    return gram / torch.where(norm > 0, norm, torch.ones((), dtype=gram.dtype))


@dataclass
class TeacherFeatures:
    """Frozen teacher outputs for a batch or corpus: tokens ``(..., L, dT)``."""

    tokens: torch.Tensor
    cls: torch.Tensor
    gram: Optional[torch.Tensor] = None

    def __post_init__(self):
        self.tokens = torch.as_tensor(self.tokens, dtype=DTYPE).detach()
        self.cls = torch.as_tensor(self.cls, dtype=DTYPE).detach()
        if self.gram is None:
            self.gram = gram_normalised(self.tokens)

    def __getitem__(self, idx) -> "TeacherFeatures":
        return TeacherFeatures(self.tokens[idx], self.cls[idx], self.gram[idx])

    @property
    def zero_rows(self) -> int:
        return int((self.gram.norm(dim=-1) == 0).sum())


@dataclass
class StudentFeatures:
    tokens: torch.Tensor  # (B, L, dS)
    cls: torch.Tensor  # (B, dS)

    @property
    def gram(self) -> torch.Tensor:
        return gram_normalised(self.tokens)


def gram_loss(student: StudentFeatures, teacher: TeacherFeatures) -> torch.Tensor:
    """Batch mean of squared Frobenius distances between normalised Grams."""
    gs, gt = student.gram, teacher.gram
    if gs.shape != gt.shape:
        raise ShapeError(f"student Gram {tuple(gs.shape)} vs teacher Gram {tuple(gt.shape)}")
    diff = gs - gt
    sq = (diff * diff).sum(dim=(-1, -2))
    return sq.mean() if sq.dim() else sq


def sample_triples(batch: int, seed: int = 0, count: Optional[int] = None) -> torch.Tensor:
    """All ordered triples of distinct indices for small batches, else ``4B`` random ones."""
    if batch < 3:
        raise ValueError("relational loss needs at least three items")
    if batch <= EXHAUSTIVE_TRIPLES_MAX_BATCH and count is None:
        return torch.tensor(list(itertools.permutations(range(batch), 3)), dtype=torch.long)
    m = count if count is not None else 4 * batch
    g = torch.Generator().manual_seed(seed)
    return torch.argsort(torch.rand(m, batch, generator=g), dim=1)[:, :3]


def _vertex_cosines(x: torch.Tensor, triples: torch.Tensor):
    a = x[triples[:, 0]] - x[triples[:, 1]]
    b = x[triples[:, 2]] - x[triples[:, 1]]
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    ok = (na > DEGENERATE_TOL) & (nb > DEGENERATE_TOL)
    one = torch.ones((), dtype=x.dtype)
    cos = (a * b).sum(-1) / (torch.where(ok, na, one) * torch.where(ok, nb, one))
    return cos, ok


def relational_loss_detail(student_cls: torch.Tensor, teacher_cls: torch.Tensor,
                           triples: Optional[torch.Tensor] = None, seed: int = 0):
    """Angle-matching loss plus the number of degenerate triples skipped."""
    if student_cls.shape[0] != teacher_cls.shape[0]:
        raise ShapeError("student and teacher batches differ in size")
    if triples is None:
        triples = sample_triples(student_cls.shape[0], seed)
    cs, ok_s = _vertex_cosines(student_cls, triples)
    ct, ok_t = _vertex_cosines(teacher_cls.detach(), triples)
    ok = ok_s & ok_t
    skipped = int((~ok).sum())
    if skipped == len(triples):
        return torch.zeros((), dtype=DTYPE), skipped
    diff = torch.where(ok, cs - ct, torch.zeros((), dtype=DTYPE))
    return (diff * diff).sum() / ok.sum(), skipped


def relational_loss(student_cls: torch.Tensor, teacher_cls: torch.Tensor,
                    triples: Optional[torch.Tensor] = None, seed: int = 0) -> torch.Tensor:
    return relational_loss_detail(student_cls, teacher_cls, triples, seed)[0]


@dataclass
class TeacherCache:
    """Teacher features pre-extracted once for a whole corpus."""

    seed: int
    features: TeacherFeatures  # tokens (n, L, k) after PCA
    basis: Optional[torch.Tensor]  # dT x k, None if unreduced
    explained: float = 1.0

    @property
    def corpus_size(self) -> int:
        return self.features.tokens.shape[0]

    @property
    def tokens_per_item(self) -> int:
        return self.features.tokens.shape[1]


def synthetic_teacher(seed: int, corpus_size: int, L: int, d_T: int, n_parts: int = 3,
                      labels=None, n_clusters: int = 8, noise: float = 0.3) -> TeacherFeatures:
    """Frozen random-feature teacher with planted part structure.

    Tokens are split into ``n_parts`` contiguous blocks; each block sits around
    a part centroid shared by all items of the same cluster, so the Gram of
    every item shows a block pattern.
    """
    rng = np.random.default_rng(seed)
    if labels is None:
        labels = np.arange(corpus_size) % n_clusters
    labels = np.asarray(labels)
    n_clusters = int(labels.max()) + 1
    centroids = rng.standard_normal((n_clusters, n_parts, d_T))
    part_of = (np.arange(L) * n_parts) // L
    item_shift = 0.3 * rng.standard_normal((corpus_size, n_parts, d_T))
    base = centroids[labels][:, part_of] + item_shift[:, part_of]
    tokens = base + noise * rng.standard_normal((corpus_size, L, d_T))
    cls = tokens.mean(axis=1) + 0.1 * rng.standard_normal((corpus_size, d_T))
    return TeacherFeatures(torch.from_numpy(tokens), torch.from_numpy(cls))


def text_projection(features: TeacherFeatures, seed: int) -> TeacherFeatures:
    """Stand-in for the teacher's text-aligned head: a fixed random linear map."""
    d_T = features.tokens.shape[-1]
    g = np.random.default_rng(seed + 7919)
    proj = torch.from_numpy(g.standard_normal((d_T, d_T)) / math.sqrt(d_T))
    return TeacherFeatures(features.tokens @ proj, features.cls @ proj)


def build_cache(features: TeacherFeatures, seed: int, target_dim: Optional[int] = None) -> TeacherCache:
    """PCA-reduce teacher tokens, with the basis fitted once on the full corpus."""
    if target_dim is None or target_dim >= features.tokens.shape[-1]:
        return TeacherCache(seed, features, None, 1.0)
    flat = features.tokens.reshape(-1, features.tokens.shape[-1])
    basis, evals = pca_fit(flat, target_dim)
    reduced = TeacherFeatures(features.tokens @ basis, features.cls)
    explained = float(evals[:target_dim].sum() / evals.sum())
    return TeacherCache(seed, reduced, basis, explained)


def save_cache(cache: TeacherCache, path) -> None:
    """Write ``magic | JSON header line | raw little-endian float64 arrays``."""
    arrays = {"tokens": cache.features.tokens, "cls": cache.features.cls}
    if cache.basis is not None:
        arrays["basis"] = cache.basis
    n, L, k = cache.features.tokens.shape
    header = {
        "version": CACHE_VERSION, "seed": cache.seed, "corpus_size": n, "L": L,
        "d_T": int(cache.basis.shape[0]) if cache.basis is not None else k,
        "target_dim": k, "explained": cache.explained,
        # a list, not a mapping, so the on-disk array order survives sort_keys
        "arrays": [[name, list(a.shape)] for name, a in arrays.items()],
    }
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for a in arrays.values():
            fh.write(a.detach().numpy().astype("<f8").tobytes())


def load_cache(path) -> TeacherCache:
    raw = Path(path).read_bytes()
    if not raw.startswith(CACHE_MAGIC):
        raise ValueError(f"{path} is not a teacher cache file")
    rest = raw[len(CACHE_MAGIC):]
    line, _, body = rest.partition(b"\n")
    header = json.loads(line)
    if header.get("version") != CACHE_VERSION:
        raise ValueError(f"unsupported teacher cache version {header.get('version')}")
    out, offset = {}, 0
    for name, shape in header["arrays"]:
        size = int(np.prod(shape)) * 8
        out[name] = torch.from_numpy(
            np.frombuffer(body[offset:offset + size], dtype="<f8").reshape(shape).copy())
        offset += size
    feats = TeacherFeatures(out["tokens"], out["cls"])
    return TeacherCache(header["seed"], feats, out.get("basis"), header["explained"])
