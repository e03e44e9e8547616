"""Model-checking accuracy table at desk scale: DFA vs syntax-tree representations, three regimes, three seeds.

Writes results/table1.json and results/table1.md. About an hour on one core.
"""

import argparse
import json
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from tleaf import bench, nn
from tleaf.ltl import PRESETS


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--regimes", nargs="+", default=list(PRESETS))
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--out-dir", default="results")
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    def progress(run: dict) -> None:
        print(
            f"[{time.perf_counter() - t0:7.1f}s] {run['regime']:<8} {run['representation']:<11} "
            f"seed {run['seed']}  test {run['test_acc']:.3f}  sep {run['separation_test']:.2f}",
            flush=True,
        )

    nn.keep_heap_warm()
    with threadpool_limits(1):
        rep = bench.table1_experiment(args.regimes, list(range(args.seeds)), bench.BenchConfig(), progress=progress)
    (out / "table1.json").write_text(bench.report_json(rep))
    (out / "table1.md").write_text(bench.report_markdown(rep))
    print(bench.report_markdown(rep), end="")
    print(f"wall-clock {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
