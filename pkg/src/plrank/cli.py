"""Command line entry point: ``plrank {oracle,gradcheck,train,sweep,analyze}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import verify
from .harness.config import RunConfig, coerce, load_config
from .harness.data import generate_corpus
from .harness.metrics import gram_fidelity_histogram
from .harness.model import ToyModel
from .harness.train import fmt, order_sweep, train

_OVERRIDABLE = [f.name for f in fields(RunConfig) if f.name != "seed"]


def write_reports(reports, path) -> None:
    # structured text: one "[name]" block of key = value lines per report
    blocks = []
    for rep in reports:
        d = rep.as_dict()
        lines = [f"[{d.pop('name')}]"]
        d["failures"] = len(rep.failures)
        lines += [f"{k} = {v}" for k, v in d.items()]
        blocks.append("\n".join(lines))
    Path(path).write_text("\n\n".join(blocks) + "\n")


def _finish(reports, out) -> int:
    for rep in reports:
        print(rep.line())
    if out:
        write_reports(reports, out)
    return 0 if all(r.passed for r in reports) else 1


def cmd_oracle(args) -> int:
    reports = [verify.normalisation_sweep(args.seed)] + verify.collapse_suite(args.seed)
    return _finish(reports, args.out)


def cmd_gradcheck(args) -> int:
    names = args.names.split(",") if args.names else None
    unknown = set(names or ()) - set(verify.GRADIENT_SUITE)
    if unknown:
        raise ValueError(f"unknown gradient checks: {sorted(unknown)}")
    return _finish(verify.gradient_suite(args.seed, args.trials, names=names), args.out)


def _config(args, **extra) -> RunConfig:
    overrides = {k: getattr(args, k) for k in _OVERRIDABLE if getattr(args, k, None) is not None}
    overrides.update(extra)
    return load_config(args.config, seed=args.seed, **overrides)


def cmd_train(args) -> int:
    cfg = _config(args)
    res = train(cfg)
    for split in ("heldout", "train"):
        a, b = res.initial[split], res.final[split]
        print(f"{split}: nll {fmt(a['nll'])} -> {fmt(b['nll'])}  top1 {fmt(a['top1'])} -> {fmt(b['top1'])}")
    print(f"wrote {cfg.out_dir}")
    return 0


def cmd_sweep(args) -> int:
    seeds = args.seeds if args.seeds is not None else str(args.seed)
    cfg = _config(args, seeds=seeds)
    rows = order_sweep(cfg)
    print(f"wrote {len(rows)} rows to {Path(cfg.out_dir) / 'sweep.csv'}")
    return analyze_dir(Path(cfg.out_dir))


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarise_sweep(rows: list[dict]) -> list[dict]:
    """Per-order mean and across-seed std (ddof 1) of the sweep metrics."""
    out = []
    for order in sorted({int(r["order"]) for r in rows}):
        sel = [r for r in rows if int(r["order"]) == order]
        entry = {"order": order, "n_seeds": len(sel)}
        for col in ("heldout_nll", "train_nll", "top1", "cone_deg"):
            vals = np.array([float(r[col]) for r in sel])
            entry[f"{col}_mean"] = float(vals.mean())
            entry[f"{col}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else float("nan")
        out.append(entry)
    return out


def monotone_gaps(summary: list[dict]) -> list[dict]:
    """Held-out NLL drop between consecutive orders against the larger of their stds."""
    gaps = []
    for lo, hi in zip(summary, summary[1:]):
        gap = lo["heldout_nll_mean"] - hi["heldout_nll_mean"]
        spread = max(lo["heldout_nll_std"], hi["heldout_nll_std"])
        gaps.append({"from": lo["order"], "to": hi["order"], "gap": gap, "std": spread,
                     "exceeds": bool(gap > spread)})
    return gaps


def _run_config(run: Path) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for line in (run / "manifest.txt").read_text().splitlines():
        key, sep, value = line.partition("=")
        if sep and key.strip() in known:
            values[key.strip()] = coerce(key.strip(), value.strip())
    return RunConfig(**values).validate()


def fidelity(run: Path, bins: int = 20) -> list[tuple[float, float, int, int]]:
    """Held-out student/teacher class-token cosine histogram for a trained run."""
    cfg = _run_config(run)
    corpus = generate_corpus(cfg, cfg.seed)
    model = ToyModel(cfg, cfg.seed, max(cfg.order, 3))
    saved = torch.load(run / "params.pt")
    with torch.no_grad():
        for name, p in model.named_parameters().items():
            p.copy_(saved[name])
        idx = torch.as_tensor(corpus.heldout_idx)
        rows = []
        for side, stu, teacher, patches in (("img", model.stu_img, corpus.teacher_img, corpus.image_patches),
                                            ("txt", model.stu_txt, corpus.teacher_txt, corpus.text_patches)):
            edges, counts, _ = gram_fidelity_histogram(stu(patches[idx]).cls, teacher.features.cls[idx], bins)
            rows += [(side, edges[i], edges[i + 1], int(c)) for i, c in enumerate(counts)]
    return rows


def analyze_dir(run: Path) -> int:
    if (run / "sweep.csv").exists():
        summary = summarise_sweep(_read_csv(run / "sweep.csv"))
        cols = list(summary[0])
        with open(run / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            w.writerows([[fmt(e[c]) for c in cols] for e in summary])
        for e in summary:
            print(f"order {e['order']}: heldout_nll {e['heldout_nll_mean']:.4f} +- {e['heldout_nll_std']:.4f}"
                  f"  top1 {e['top1_mean']:.4f}  seeds {e['n_seeds']}")
        for g in monotone_gaps(summary):
            verdict = "one seed, no spread" if np.isnan(g["std"]) else ("ok" if g["exceeds"] else "within noise")
            print(f"R{g['from']} -> R{g['to']}: drop {g['gap']:.4f} vs std {g['std']:.4f} {verdict}")
        return 0
    if (run / "params.pt").exists():
        metrics = json.loads((run / "metrics.json").read_text())
        for split in ("heldout", "train"):
            a, b = metrics["initial"][split], metrics["final"][split]
            print(f"{split}: " + "  ".join(f"{k} {fmt(a[k])} -> {fmt(b[k])}" for k in sorted(a)))
        rows = fidelity(run)
        with open(run / "fidelity.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["side", "lo", "hi", "count"])
            w.writerows([[s, fmt(lo), fmt(hi), c] for s, lo, hi, c in rows])
        for side in ("img", "txt"):
            top = sum(c for s, lo, _, c in rows if s == side and lo >= 0.8 - 1e-12)
            total = sum(c for s, *_, c in rows if s == side)
            print(f"fidelity {side}: {top}/{total} held-out items with cosine >= 0.8")
        return 0
    raise ValueError(f"{run} holds neither sweep.csv nor a trained run")


def cmd_analyze(args) -> int:
    return analyze_dir(Path(args.run))


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; flags below override it")
    group = p.add_argument_group("config overrides")
    for name in _OVERRIDABLE:
        group.add_argument("--" + name.replace("_", "-"), dest=name, metavar="V")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plrank", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("oracle", help="normalisation and collapse oracles")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write a structured-text report here")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("gradcheck", help="central-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--names", help="comma-separated subset of checks")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--seed", type=int, required=True)
    _add_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train one model per order and seed")
    p.add_argument("--seed", type=int, required=True, help="seed used when --seeds is absent")
    _add_overrides(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="summarise a sweep or a trained run")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FloatingPointError) as exc:
        print(f"plrank: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
