"""Toy two-tower model: MLP encoders, token students, fusion and rank heads."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from ..distill import StudentFeatures
from ..fusion import FusionParams, fuse
from ..numerics import DTYPE
from ..objective import LossInputs, RankHeads
from ..transitions import GateBank, TransitionParams, xavier
from .config import RunConfig
from .data import SyntheticCorpus


@dataclass
class MLP:
    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor

    @classmethod
    def init(cls, d_in: int, hidden: int, d_out: int, g: torch.Generator) -> "MLP":
        return cls(xavier((hidden, d_in), g), torch.zeros(hidden, dtype=DTYPE, requires_grad=True),
                   xavier((d_out, hidden), g), torch.zeros(d_out, dtype=DTYPE, requires_grad=True))

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return torch.nn.functional.gelu(x @ self.w1.T + self.b1) @ self.w2.T + self.b2

    def named_parameters(self, prefix: str) -> dict[str, torch.Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in ("w1", "b1", "w2", "b2")}


@dataclass
class Student:
    w: torch.Tensor  # dS x patch_dim
    b: torch.Tensor

    @classmethod
    def init(cls, d_in: int, d_out: int, g: torch.Generator) -> "Student":
        return cls(xavier((d_out, d_in), g), torch.zeros(d_out, dtype=DTYPE, requires_grad=True))

    def __call__(self, patches: torch.Tensor) -> StudentFeatures:
        tokens = torch.tanh(patches @ self.w.T + self.b)
        return StudentFeatures(tokens, tokens.mean(dim=-2))

    def named_parameters(self, prefix: str) -> dict[str, torch.Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


def _gen(seed: int, part: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(np.random.SeedSequence([seed, part]).generate_state(1)[0]))


class ToyModel:
    """All learnable state of one run; every component draws from its own seed stream."""

    def __init__(self, cfg: RunConfig, seed: int, max_order: int = 3):
        p, D = cfg.raw_dim, cfg.dim
        self.enc_img = MLP.init(p, cfg.hidden, D, _gen(seed, 10))
        self.enc_txt = MLP.init(p, cfg.hidden, D, _gen(seed, 11))
        self.stu_img = Student.init(cfg.patch_dim, cfg.token_dim, _gen(seed, 12))
        self.stu_txt = Student.init(cfg.patch_dim, cfg.token_dim, _gen(seed, 13))
        self.fus_img = FusionParams.init(cfg.token_dim, D, generator=_gen(seed, 14))
        self.fus_txt = FusionParams.init(cfg.token_dim, D, generator=_gen(seed, 15))
        max_order = max(max_order, 3)
        self.heads_v = RankHeads(TransitionParams.init(D, cfg.head_dim, 3, "V", _gen(seed, 16)),
                                 GateBank.init(max_order, "V"))
        self.heads_t = RankHeads(TransitionParams.init(D, cfg.head_dim, 3, "T", _gen(seed, 17)),
                                 GateBank.init(max_order, "T"))
        for r in range(4, max_order + 1):
            for heads, part in ((self.heads_v, 100), (self.heads_t, 200)):
                extra = TransitionParams.init(D, cfg.head_dim, r, heads.params.modality, _gen(seed, part + r))
                heads.params.history[r] = extra.history[r]
        self.log_temperature = torch.tensor(math.log(cfg.temperature), dtype=DTYPE, requires_grad=True)

    def named_parameters(self) -> dict[str, torch.Tensor]:
        out = {}
        out.update(self.enc_img.named_parameters("enc_img"))
        out.update(self.enc_txt.named_parameters("enc_txt"))
        out.update(self.stu_img.named_parameters("stu_img"))
        out.update(self.stu_txt.named_parameters("stu_txt"))
        out.update(self.fus_img.named_parameters("fus_img."))
        out.update(self.fus_txt.named_parameters("fus_txt."))
        for heads in (self.heads_v, self.heads_t):
            out.update(heads.params.named_parameters())
            out.update(heads.gates.named_parameters())
        out["log_temperature"] = self.log_temperature
        return out

    def forward(self, corpus: SyntheticCorpus, idx: np.ndarray) -> LossInputs:
        idx_t = torch.as_tensor(idx, dtype=torch.long)
        s_img = self.stu_img(corpus.image_patches[idx_t])
        s_txt = self.stu_txt(corpus.text_patches[idx_t])
        v = fuse(self.enc_img(corpus.image[idx_t]), s_img.tokens, self.fus_img).fused
        t = fuse(self.enc_txt(corpus.text[idx_t]), s_txt.tokens, self.fus_txt).fused
        return LossInputs(v, t, self.log_temperature, self.heads_v, self.heads_t, s_img, s_txt,
                          corpus.teacher_img.features[idx_t], corpus.teacher_txt.features[idx_t])
