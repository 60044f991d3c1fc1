"""Dense float64 kernels shared by every loss in the package.

Everything is a ``torch.Tensor`` in float64; gradients come from torch's
reverse-mode autograd and are checked against central differences in
:mod:`plrank.verify`.
"""
from __future__ import annotations

import torch

DTYPE = torch.float64
LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class EmptyCandidateError(ValueError):
    pass


class DegenerateRankError(ValueError):
    pass


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def log_softmax_masked(scores: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Log-softmax along the last axis over entries where ``mask`` is False.

    ``mask[..., j] = True`` excludes candidate ``j``; excluded entries come
    back as ``-inf``. Excluded scores never enter arithmetic, so they may hold
    any value (including ``-inf``) without poisoning gradients.
    """
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.shape != scores.shape:
        mask = mask.expand_as(scores)
    if bool(mask.all(dim=-1).any()):
        raise EmptyCandidateError("every candidate is masked")
    # masked_fill routes no gradient to excluded entries, whatever they hold
    return torch.log_softmax(scores.masked_fill(mask, -torch.inf), dim=-1)


def layer_norm(x: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    """Affine-free layer norm over the last axis.

    The variance is floored at ``eps`` instead of offset by it, so non-degenerate
    inputs come out with exactly unit variance and constant inputs map to zero.
    """
    if x.shape[-1] < 2:
        raise ShapeError("layer_norm needs at least two features")
    centred = x - x.mean(dim=-1, keepdim=True)
    var = (centred * centred).mean(dim=-1, keepdim=True)
    return centred / var.clamp_min(eps).sqrt()


def pca_fit(tokens: torch.Tensor, target_dim: int, rtol: float = 1e-10):
    """Top principal axes of the row covariance of ``tokens``.

    Returns ``(basis, eigenvalues)`` with ``basis`` of shape ``D x target_dim``
    (columns sorted by decreasing variance) and all ``D`` eigenvalues in
    decreasing order.
    """
    tokens = torch.as_tensor(tokens, dtype=DTYPE)
    n, d = tokens.shape
    if target_dim < 1 or target_dim > min(n, d):
        raise DegenerateRankError(f"target_dim={target_dim} outside [1, {min(n, d)}]")
    centred = tokens - tokens.mean(dim=0, keepdim=True)
    cov = centred.T @ centred / n
    evals, evecs = torch.linalg.eigh(cov)
    evals, evecs = evals.flip(0), evecs.flip(1)
    rank = int((evals > rtol * max(float(evals[0]), 1e-300)).sum())
    if target_dim > rank:
        raise DegenerateRankError(f"target_dim={target_dim} exceeds covariance rank {rank}")
    basis = evecs[:, :target_dim]
    # fix the sign of each axis so repeated fits agree bit for bit
    flip = torch.sign(basis[basis.abs().argmax(dim=0), torch.arange(target_dim)])
    return basis * flip, evals.clamp_min(0.0)


def pca_reduce(tokens: torch.Tensor, target_dim: int) -> torch.Tensor:
    """Project (uncentred) tokens onto their top ``target_dim`` principal axes.

    Projection is not mean-subtracted so that Gram matrices are preserved
    exactly when ``target_dim`` equals the full dimension.
    """
    basis, _ = pca_fit(tokens, target_dim)
    return torch.as_tensor(tokens, dtype=DTYPE) @ basis
