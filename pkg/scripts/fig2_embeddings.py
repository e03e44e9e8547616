"""Embedding-space picture for held-out formulas (Low regime).

Trains one DFA embedder, exports test-split embeddings with PCA coordinates to
results/fig2.csv and, when matplotlib is installed, draws results/fig2.png with
one panel per formula.
"""

import argparse
import csv
import io
from pathlib import Path

from threadpoolctl import threadpool_limits

from tleaf import bench, datasets, nn
from tleaf.embedder import EmbedderConfig, TrainConfig, train_embedder
from tleaf.ltl import PRESETS


def _plot(rows: list[dict], path: Path, panels: int) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib not available; CSV only")
        return
    ids = sorted({int(r["formula_idx"]) for r in rows})[:panels]
    fig, axes = plt.subplots(1, len(ids), figsize=(3.2 * len(ids), 3.2), squeeze=False)
    style = {"formula": ("k", "*", 140), "sat": ("tab:green", "o", 18), "unsat": ("tab:red", "x", 18)}
    for ax, i in zip(axes[0], ids):
        for r in (r for r in rows if int(r["formula_idx"]) == i):
            kind = "formula" if r["kind"] == "formula" else r["label"]
            c, m, s = style[kind]
            ax.scatter(float(r["pc1"]), float(r["pc2"]), c=c, marker=m, s=s)
        ax.set_title(next(r["text"] for r in rows if int(r["formula_idx"]) == i and r["kind"] == "formula"), fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    print(f"wrote {path}")


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--regime", default="low", choices=list(PRESETS))
    ap.add_argument("--panels", type=int, default=4)
    ap.add_argument("--out-dir", default="results")
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = datasets.gen_corpus(PRESETS[args.regime], 300, seed=0)
    nn.keep_heap_warm()
    with threadpool_limits(1):
        res = train_embedder(corpus.examples("train"), EmbedderConfig(n_props=corpus.complexity.n_v), TrainConfig(eval_every=10**9))
    # each formula gets its own PCA so panels match the per-formula view
    parts = []
    for k, entry in enumerate(corpus.split("test")[: args.panels]):
        sub = datasets.Corpus(corpus.complexity, corpus.seed, [entry])
        text = bench.export_embeddings(res.model, sub)
        for r in csv.DictReader(io.StringIO(text)):
            r["formula_idx"] = str(k)
            parts.append(r)
    with open(out / "fig2.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(parts[0]))
        w.writeheader()
        w.writerows(parts)
    print(f"wrote {out / 'fig2.csv'} ({len(parts)} rows)")
    _plot(parts, out / "fig2.png", args.panels)


if __name__ == "__main__":
    main()
