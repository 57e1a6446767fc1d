"""Run the five-configuration ablation on the toy setup and print a table.

Results are appended to a JSON file as each run finishes, so an interrupted
sweep resumes where it stopped.

    python3 benchmarks/ablation.py --seeds 0 1 2 --out benchmarks/ablation_results.json
"""
import argparse
import json
import time
from pathlib import Path

from tednet.ablation import ABLATIONS, TOY_STEPS, markdown_table, run, toy_samples


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--configs", type=int, nargs="+", default=sorted(ABLATIONS))
    ap.add_argument("--steps", type=int, default=TOY_STEPS)
    ap.add_argument("--out", default="benchmarks/ablation_results.json")
    args = ap.parse_args()

    path = Path(args.out)
    records = json.loads(path.read_text()) if path.exists() else []
    done = {(r["config"], r["seed"], r["steps"]) for r in records}
    samples = toy_samples()
    for cid in args.configs:
        for seed in args.seeds:
            if (cid, seed, args.steps) in done:
                continue
            t = time.perf_counter()
            rec = run(cid, seed, args.steps, samples)
            rec["seconds"] = round(time.perf_counter() - t, 1)
            records.append(rec)
            path.write_text(json.dumps(records, indent=1) + "\n")
            print(f"config {cid} seed {seed}: MAE {rec['mae']:.3f} PSNR {rec['psnr']:.2f} "
                  f"({rec['seconds']} s)", flush=True)
    print(markdown_table([r for r in records if r["steps"] == args.steps]))


if __name__ == "__main__":
    main()
