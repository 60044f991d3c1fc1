"""Geometry and retrieval metrics on embedding batches."""
from __future__ import annotations

import math

import numpy as np
import torch

from ..numerics import DTYPE


def cone_separation(image_emb: torch.Tensor, text_emb: torch.Tensor) -> float:
    """Angle in degrees between the (renormalised) mean image and mean text embedding."""
    if image_emb.shape != text_emb.shape:
        raise ValueError("image and text batches must have the same shape")
    mi = torch.as_tensor(image_emb, dtype=DTYPE).detach().mean(dim=0)
    mt = torch.as_tensor(text_emb, dtype=DTYPE).detach().mean(dim=0)
    ni, nt = float(mi.norm()), float(mt.norm())
    if ni < 1e-12 or nt < 1e-12:
        raise ValueError("mean embedding is zero; cone direction undefined")
    mi, mt = mi / ni, mt / nt
    # Kahan's form, exact zero for identical directions
    return math.degrees(2.0 * math.atan2(float((mi - mt).norm()), float((mi + mt).norm())))


def top1_retrieval(image_emb: torch.Tensor, text_emb: torch.Tensor) -> float:
    """Fraction of items whose matching partner is ranked first, averaged both ways."""
    sim = (image_emb @ text_emb.T).detach()
    target = torch.arange(sim.shape[0])
    i2t = (sim.argmax(dim=1) == target).double().mean()
    t2i = (sim.argmax(dim=0) == target).double().mean()
    return float(0.5 * (i2t + t2i))


def fit_linear_map(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Least-squares map ``W`` with ``source @ W ~= target``."""
    return np.linalg.lstsq(source, target, rcond=None)[0]


def gram_fidelity_histogram(students, teachers, bins: int = 20, fit: bool = True):
    """Per-item cosine between student and teacher class tokens, binned on [-1, 1].

    With ``fit`` the student features are first mapped into teacher space by a
    least-squares linear map. Returns ``(edges, counts, cosines)``.
    """
    s = np.asarray(torch.as_tensor(students).detach(), dtype=np.float64)
    t = np.asarray(torch.as_tensor(teachers).detach(), dtype=np.float64)
    if s.shape[0] != t.shape[0]:
        raise ValueError("student and teacher corpora must be aligned")
    mapped = s @ fit_linear_map(s, t) if fit else s
    cos = (mapped * t).sum(1) / (np.linalg.norm(mapped, axis=1) * np.linalg.norm(t, axis=1))
    cos = np.clip(cos, -1.0, 1.0)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    counts = np.histogram(cos, bins=edges)[0]
    return edges, counts, cos
