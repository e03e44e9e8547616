"""Model-checking benchmark: embedder + MLP classifier on (formula, trace) pairs, DFA vs syntax tree."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import nn
from .datasets import Corpus, alphabet_for, gen_corpus
from .embedder import (
    EmbedderConfig,
    EmbedderModel,
    TrainConfig,
    _sample_triplets,
    embed_prepared,
    prepare,
    separation_rate,
    stage1_step,
    train_embedder,
)
from .ltl import PRESETS, format_formula
from .nn import Tensor

REPRESENTATIONS = ("dfa", "syntax_tree")


@dataclass
class ClfConfig:
    hidden: tuple[int, ...] = (512, 128)
    lr: float = 1e-3
    epochs: int = 40
    batch_size: int = 128
    standardize: bool = True


@dataclass
class BenchConfig:
    n_formulas: int = 300
    traces_per_side: int = 10
    len_range: tuple[int, int] = (2, 8)
    corpus_seed: int = 0
    walk_len: int = 4
    readout: str = "mean"  # walk readout trails on the benchmark at desk scale
    train: TrainConfig = field(default_factory=TrainConfig)
    clf: ClfConfig = field(default_factory=ClfConfig)
    joint: bool = False


@dataclass
class CheckerResult:
    model: EmbedderModel
    clf: nn.MlpParams
    mean: np.ndarray
    scale: np.ndarray
    metrics: dict


def _pairs(model: EmbedderModel, corpus: Corpus, split: str, representation: str):
    prepped = prepare(corpus.examples(split), representation)
    zf, zs, zu = embed_prepared(model, prepped)
    xs, ys = [], []
    for f, s, u in zip(zf, zs, zu):
        for z, y in ((s, 1), (u, 0)):
            xs.append(np.concatenate([np.repeat(f[None], len(z), axis=0), z], axis=1))
            ys.append(np.full(len(z), y))
    x = np.concatenate(xs).astype(np.float32) if xs else np.zeros((0, 2 * model.cfg.d_z), np.float32)
    y = np.concatenate(ys) if ys else np.zeros(0, np.int64)
    return x, y, separation_rate(zf, zs, zu)


def predict(clf: nn.MlpParams, x: np.ndarray) -> np.ndarray:
    return nn.mlp_forward(Tensor(x), clf).data[:, 0] > 0


def _fit_classifier(xtr, ytr, xva, yva, cfg: ClfConfig, rng: np.random.Generator):
    clf = nn.MlpParams.init([xtr.shape[1], *cfg.hidden, 1], rng)
    opt = nn.Adam(clf.named("clf"), lr=cfg.lr)
    best_acc, best_state, best_epoch = -1.0, None, -1
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(xtr))
        for i in range(0, len(perm), cfg.batch_size):
            b = perm[i : i + cfg.batch_size]
            loss = nn.bce_with_logits(nn.mlp_forward(Tensor(xtr[b]), clf), ytr[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
        acc = float((predict(clf, xva) == yva).mean()) if len(yva) else 0.0
        if acc > best_acc:
            best_acc, best_epoch = acc, epoch
            best_state = [t.data.copy() for t in clf.named("clf").values()]
    for t, d in zip(clf.named("clf").values(), best_state):
        t.data = d
    return clf, best_acc, best_epoch


def train_checker(
    corpus: Corpus,
    representation: str,
    cfg: BenchConfig,
    seed: int,
    random_embedder: bool = False,
) -> CheckerResult:
    """Embedder by triplet loss on the train split, then a frozen-feature MLP; test accuracy reported."""
    if representation not in REPRESENTATIONS:
        raise ValueError(f"unknown representation {representation!r}")
    counts = {s: len(corpus.split(s)) for s in ("train", "val", "test")}
    if min(counts.values()) == 0:
        raise ValueError(f"corpus too small for train/val/test splits: {counts}")
    ecfg = EmbedderConfig(n_props=corpus.complexity.n_v, walk_len=cfg.walk_len, readout=cfg.readout, seed=seed)
    tcfg = replace(cfg.train, representation=representation, seed=seed, eval_every=10**9)
    if random_embedder:
        model, log = EmbedderModel(ecfg), []
    elif cfg.joint:
        model, log = _train_joint(corpus, ecfg, tcfg, cfg.clf, seed)
    else:
        res = train_embedder(corpus.examples("train"), ecfg, tcfg)
        model, log = res.model, res.log
    xtr, ytr, sep_train = _pairs(model, corpus, "train", representation)
    xva, yva, _ = _pairs(model, corpus, "val", representation)
    xte, yte, sep_test = _pairs(model, corpus, "test", representation)
    if cfg.clf.standardize:
        mean, scale = xtr.mean(axis=0), xtr.std(axis=0) + 1e-6
    else:
        mean, scale = np.zeros(xtr.shape[1], np.float32), np.ones(xtr.shape[1], np.float32)
    norm = lambda x: ((x - mean) / scale).astype(np.float32)
    rng = np.random.default_rng([seed, 5])
    clf, val_acc, epoch = _fit_classifier(norm(xtr), ytr, norm(xva), yva, cfg.clf, rng)
    pred = predict(clf, norm(xte))
    metrics = {
        "test_acc": float((pred == yte).mean()),
        "val_acc": val_acc,
        "train_acc": float((predict(clf, norm(xtr)) == ytr).mean()),
        "best_epoch": epoch,
        "separation_train": sep_train,
        "separation_test": sep_test,
        "collapsed": bool(pred.all() or not pred.any()),
        "final_triplet_loss": log[-1]["loss"] if log else None,
    }
    return CheckerResult(model, clf, mean, scale, metrics)


def _train_joint(corpus: Corpus, ecfg: EmbedderConfig, tcfg: TrainConfig, ccfg: ClfConfig, seed: int):
    """Guard pretraining as usual, then q_m and a classifier trained together on cross-entropy."""
    prepped = prepare(corpus.examples("train"), tcfg.representation)
    model = EmbedderModel(ecfg)
    rng = np.random.default_rng([seed, 2])
    opt1 = nn.Adam(model.stage1_params(), lr=tcfg.lr)
    for _ in range(tcfg.stage1_steps):
        stage1_step(model, opt1, _sample_triplets(prepped, tcfg.batch_size, tcfg.negatives, rng), tcfg, rng)
    model.invalidate()
    head = nn.MlpParams.init([2 * ecfg.d_z, *ccfg.hidden, 1], np.random.default_rng([seed, 6]))
    opt = nn.Adam({**model.stage2_params(), **head.named("head")}, lr=tcfg.lr)
    log = []
    for step in range(tcfg.stage2_steps):
        items, ys = [], []
        for p, pos, neg in _sample_triplets(prepped, tcfg.batch_size, tcfg.negatives, rng):
            items += [p.formula_item, pos, p.formula_item, neg]
            ys += [1, 0]
        z = model.embed_items(items, rng)
        n = len(ys)
        pair = nn.concat([nn.take(z, np.arange(0, 2 * n, 2)), nn.take(z, np.arange(1, 2 * n, 2))], axis=1)
        loss = nn.bce_with_logits(nn.mlp_forward(pair, head), np.asarray(ys))
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.append({"stage": 2, "step": step + 1, "loss": loss.item()})
    return model, log[-1:]


def _stderr(xs: Sequence[float]) -> float:
    return float(np.std(xs, ddof=1) / np.sqrt(len(xs))) if len(xs) > 1 else 0.0


def table1_experiment(
    regimes: Sequence[str],
    seeds: Sequence[int],
    cfg: BenchConfig,
    representations: Sequence[str] = REPRESENTATIONS,
    progress: Callable[[dict], None] | None = None,
) -> dict:
    """Accuracy mean and standard error over seeds for each (regime, representation) cell."""
    if len(seeds) < 3:
        raise ValueError("at least 3 seeds are needed for a standard error")
    cells = []
    for regime in regimes:
        corpus = gen_corpus(PRESETS[regime], cfg.n_formulas, cfg.traces_per_side, cfg.len_range, seed=cfg.corpus_seed)
        for rep in representations:
            runs = []
            for s in seeds:
                m = train_checker(corpus, rep, cfg, s).metrics
                runs.append({"seed": s, **m})
                if progress:
                    progress({"regime": regime, "representation": rep, **runs[-1]})
            accs = [r["test_acc"] for r in runs]
            cells.append(
                {
                    "regime": regime,
                    "representation": rep,
                    "mean_acc": float(np.mean(accs)),
                    "stderr": _stderr(accs),
                    "mean_separation_test": float(np.mean([r["separation_test"] for r in runs])),
                    "collapsed_seeds": sum(r["collapsed"] for r in runs),
                    "runs": runs,
                }
            )
    return {"config": _config_echo(cfg, regimes, seeds), "cells": cells}


def _config_echo(cfg: BenchConfig, regimes, seeds) -> dict:
    d = asdict(cfg)
    d["regimes"] = list(regimes)
    d["seeds"] = list(seeds)
    d["complexity"] = {r: {"n_v": PRESETS[r].n_v, "w_t": PRESETS[r].w_t} for r in regimes}
    return json.loads(json.dumps(d))


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1) + "\n"


def report_markdown(report: dict) -> str:
    regimes = list(dict.fromkeys(c["regime"] for c in report["cells"]))
    reps = list(dict.fromkeys(c["representation"] for c in report["cells"]))
    by = {(c["regime"], c["representation"]): c for c in report["cells"]}
    lines = ["| representation | " + " | ".join(regimes) + " |", "|---" * (len(regimes) + 1) + "|"]
    for rep in reps:
        row = []
        for r in regimes:
            c = by[(r, rep)]
            flag = " (collapsed)" if c["collapsed_seeds"] else ""
            row.append(f"{100 * c['mean_acc']:.2f} ({100 * c['stderr']:.2f}){flag}")
        lines.append(f"| {rep} | " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# embedding export


def pca_2d(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    c = z - z.mean(axis=0)
    if len(c) < 2:
        return np.zeros((len(c), 2))
    u, s, vt = np.linalg.svd(c, full_matrices=False)
    vt = vt * np.sign(vt[:, [0]] + (vt[:, [0]] == 0))  # fix the sign so output is deterministic
    out = c @ vt[:2].T
    if out.shape[1] < 2:
        out = np.pad(out, ((0, 0), (0, 2 - out.shape[1])))
    return out - out.mean(axis=0)


def export_embeddings(model: EmbedderModel, corpus: Corpus, split: str | None = None, representation: str = "dfa", limit: int | None = None) -> str:
    """CSV with one row per formula and per trace: ids, label, PCA coordinates, full embedding."""
    entries = corpus.entries if split is None else corpus.split(split)
    if limit is not None:
        entries = entries[:limit]
    examples = [e for e in corpus.examples(split)][: len(entries)]
    prepped = prepare(examples, representation)
    zf, zs, zu = embed_prepared(model, prepped)
    al = alphabet_for(corpus.complexity.n_v)
    rows, zs_all = [], []
    for i, e in enumerate(entries):
        rows.append((i, "formula", "", format_formula(e.formula, al)))
        zs_all.append(zf[i])
        for j, z in enumerate(zs[i]):
            rows.append((i, "trace", "sat", " ".join("{" + ",".join(al.name(p) for p in sorted(s)) + "}" for s in e.sat[j])))
            zs_all.append(z)
        for j, z in enumerate(zu[i]):
            rows.append((i, "trace", "unsat", " ".join("{" + ",".join(al.name(p) for p in sorted(s)) + "}" for s in e.unsat[j])))
            zs_all.append(z)
    z = np.stack(zs_all) if zs_all else np.zeros((0, model.cfg.d_z))
    xy = pca_2d(z)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["formula_idx", "kind", "label", "text", "pc1", "pc2"] + [f"z{k}" for k in range(z.shape[1])])
    for r, p, v in zip(rows, xy, z):
        w.writerow([*r, f"{p[0]:.6f}", f"{p[1]:.6f}", *(f"{x:.6f}" for x in v)])
    return buf.getvalue()
