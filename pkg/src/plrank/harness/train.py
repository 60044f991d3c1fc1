"""Training loop, held-out evaluation and the order sweep."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..distill import save_cache
from ..objective import AdamW, LossWeights, NonFiniteError, WarmStartState, lr_at, normalise, total_loss
from ..ranking import log_factorial
from ..transitions import parameter_order
from .config import RunConfig, dump_config
from .data import SyntheticCorpus, generate_corpus, make_batches
from .metrics import cone_separation, top1_retrieval
from .model import ToyModel

log = logging.getLogger(__name__)

LOSS_COLUMNS = ["epoch", "mu", "lr", "clip", "in", "cross", "gram_img", "rel_img", "gram_txt",
                "rel_txt", "gate_l1", "total", "lambda2_v", "lambda3_v", "lambda2_t", "lambda3_t"]
SWEEP_COLUMNS = ["order", "seed", "train_nll", "heldout_nll", "top1", "cone_deg", "seconds"]
EVAL_BATCHES_TRAIN = 12


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else f"{x:.9g}"


def weights_for(cfg: RunConfig, order: int) -> LossWeights:
    etas = {2: cfg.eta2, 3: cfg.eta3}
    for r in range(4, max(order, 3) + 1):
        etas[r] = cfg.eta3 * 10.0 ** (r - 3)
    return LossWeights(mu_d=cfg.mu_d, rho=cfg.rho, order=order, etas=etas)


def frozen_names(model: ToyModel, warm: WarmStartState, order: int) -> set[str]:
    frozen_r = warm.frozen_orders(max(order, 5))
    names = set()
    for name in model.named_parameters():
        head, _, rest = name.partition(".")
        if head not in ("V", "T"):
            continue
        r = int(rest[len("gate"):]) if rest.startswith("gate") else parameter_order(name)
        # heads above the run's order never enter the loss; keep them still
        if r in frozen_r or r > order:
            names.add(name)
    return names


@dataclass
class RunResult:
    model: ToyModel
    rows: list[dict]
    initial: dict
    final: dict
    seconds: float


def evaluate(model: ToyModel, corpus: SyntheticCorpus, cfg: RunConfig, order: int, split: str,
             epoch: int) -> dict:
    """Symmetric rank NLL, total objective, retrieval top-1 and cone separation.

    Uses a fixed set of batches per split and ``mu = 1`` so values are
    comparable across epochs and orders.
    """
    rng = np.random.default_rng([corpus.seed, 2 if split == "heldout" else 3])
    n_batches = None if split == "heldout" else EVAL_BATCHES_TRAIN
    batches = make_batches(corpus, split, cfg.batch_size, cfg.triple_prob, rng, n_batches)
    warm = WarmStartState(epoch)
    w = weights_for(cfg, order)
    weights = LossWeights(mu_d=w.mu_d, rho=w.rho, order=order, etas=w.etas, mu=1.0)
    nll, total, top1, imgs, txts = [], [], [], [], []
    with torch.no_grad():
        for idx in batches:
            inputs = model.forward(corpus, idx)
            try:
                rep = total_loss(inputs, weights, warm, max(cfg.epochs, 2))
            except NonFiniteError as exc:
                raise NonFiniteError(f"{split} evaluation at epoch {epoch}: {exc}") from exc
            nll.append(0.5 * (rep.terms["in"] + rep.terms["cross"]))
            total.append(rep.terms["total"])
            v, t = normalise(inputs.image), normalise(inputs.text)
            top1.append(top1_retrieval(v, t))
            imgs.append(v)
            txts.append(t)
    return {"nll": float(np.mean(nll)), "total": float(np.mean(total)), "top1": float(np.mean(top1)),
            "cone_deg": cone_separation(torch.cat(imgs), torch.cat(txts))}


def gate_values(model: ToyModel) -> dict[str, float]:
    out = {}
    for heads, tag in ((model.heads_v, "v"), (model.heads_t, "t")):
        for r in (2, 3):
            out[f"lambda{r}_{tag}"] = float(torch.sigmoid(heads.gates.logits[r].detach()))
    return out


def run_training(cfg: RunConfig, order: int | None = None, corpus: SyntheticCorpus | None = None,
                 seed: int | None = None) -> RunResult:
    seed = cfg.seed if seed is None else seed
    order = cfg.order if order is None else order
    corpus = corpus if corpus is not None else generate_corpus(cfg, seed)
    torch.manual_seed(seed)
    model = ToyModel(cfg, seed, max(order, 3))
    params = model.named_parameters()
    # rank heads and gates start from scratch with few steps to grow; see head_lr_scale
    scale = {n: cfg.head_lr_scale for n in params if n.split(".")[0] in ("V", "T")}
    opt = AdamW(params, weight_decay=cfg.weight_decay, lr_scale=scale)
    weights = weights_for(cfg, order)
    steps_per_epoch = len(corpus.train_idx) // cfg.batch_size
    total_steps = max(1, steps_per_epoch * cfg.epochs)
    rng = np.random.default_rng([seed, 4])
    start = time.perf_counter()
    initial = {split: evaluate(model, corpus, cfg, order, split, 0) for split in ("heldout", "train")}
    rows, step = [], 0
    warm = WarmStartState(0)
    for epoch in range(cfg.epochs):
        warm.advance(epoch)
        frozen = frozen_names(model, warm, order)
        acc: dict[str, list[float]] = {}
        lr = 0.0
        for idx in make_batches(corpus, "train", cfg.batch_size, cfg.triple_prob, rng):
            try:
                report = total_loss(model.forward(corpus, idx), weights, warm, max(cfg.epochs, 2))
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch} step {step}: {exc}") from exc
            grads = report.gradients(params)
            lr = lr_at(step, total_steps, cfg.lr, cfg.warmup_frac)
            try:
                opt.step(grads, lr, frozen)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch} step {step}: {exc}") from exc
            for k, v in report.terms.items():
                acc.setdefault(k, []).append(v)
            acc.setdefault("mu", []).append(report.mu)
            step += 1
        row = {k: float(np.mean(v)) for k, v in acc.items()}
        row.update(epoch=epoch, lr=lr, **gate_values(model))
        rows.append(row)
        log.info("order %d seed %d epoch %d total %.4f", order, seed, epoch, row.get("total", float("nan")))
    if cfg.epochs == 0:
        final = initial
    else:
        final = {split: evaluate(model, corpus, cfg, order, split, cfg.epochs) for split in ("heldout", "train")}
    return RunResult(model, rows, initial, final, time.perf_counter() - start)


def losses_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_COLUMNS)
    for row in rows:
        w.writerow([fmt(row.get(c, float("nan"))) for c in LOSS_COLUMNS])
    return buf.getvalue()


def write_manifest(path: Path, cfg: RunConfig, extra: dict) -> None:
    lines = ["# plrank run manifest", dump_config(cfg).rstrip()]
    for k, v in extra.items():
        lines.append(f"{k} = {v}")
    path.write_text("\n".join(lines) + "\n")


def train(cfg: RunConfig, out_dir: str | Path | None = None) -> RunResult:
    """Train one model and write its artifacts to ``out_dir``.

    ``losses.csv`` (one row per epoch), ``metrics.json``, ``params.pt``,
    ``manifest.txt`` and the two teacher caches.
    """
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(cfg, cfg.seed)
    result = run_training(cfg, corpus=corpus)
    save_cache(corpus.teacher_img, out / "teacher_img.cache")
    save_cache(corpus.teacher_txt, out / "teacher_txt.cache")
    (out / "losses.csv").write_text(losses_csv(result.rows))
    metrics = {"initial": result.initial, "final": result.final}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    torch.save({k: v.detach() for k, v in result.model.named_parameters().items()}, out / "params.pt")
    mu_values = ",".join(fmt(row["mu"]) for row in result.rows)
    write_manifest(out / "manifest.txt", cfg, {"mu_per_epoch": mu_values,
                                               "rank_constant_ln_n_factorial": fmt(log_factorial(cfg.batch_size))})
    return result


def sweep_rows(cfg: RunConfig, orders=None, seeds=None) -> list[dict]:
    orders = tuple(cfg.orders if orders is None else orders)
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    rows = []
    for seed in seeds:
        corpus = generate_corpus(cfg, seed)
        for order in orders:
            res = run_training(cfg, order, corpus, seed)
            rows.append({"order": order, "seed": seed, "train_nll": res.final["train"]["nll"],
                         "heldout_nll": res.final["heldout"]["nll"], "top1": res.final["heldout"]["top1"],
                         "cone_deg": res.final["heldout"]["cone_deg"],
                         "seconds": res.seconds if cfg.record_wall_time else float("nan"),
                         "wall": res.seconds})
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for row in rows:
        w.writerow([fmt(row[c]) for c in SWEEP_COLUMNS])
    return buf.getvalue()


def order_sweep(cfg: RunConfig, orders=None, seeds=None, out_dir=None) -> list[dict]:
    """One run per (order, seed) on identical data; writes ``sweep.csv`` and a manifest.

    Wall time reaches the CSV only with ``record_wall_time``, so the default
    output is byte-reproducible.
    """
    rows = sweep_rows(cfg, orders, seeds)
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(sweep_csv(rows))
    write_manifest(out / "manifest.txt", cfg, {
        "sweep_orders": ",".join(str(o) for o in (orders or cfg.orders)),
        "sweep_seeds": ",".join(str(s) for s in (seeds or cfg.seeds))})
    return rows
