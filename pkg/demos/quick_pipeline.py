"""Run the small smoke suite end to end and print its report.

    python demos/quick_pipeline.py [out_dir]

Takes a few seconds: data generation, density fit, weights, then DQN with
and without reweighting on one seed.
"""
import os
import sys

from deconfounding_rl import harness as H

HERE = os.path.dirname(os.path.abspath(__file__))


def main(out="quick-out"):
    configs = H.load_suite(os.path.join(HERE, "..", "configs", "quick.json"))
    os.makedirs(out, exist_ok=True)
    records, cells, errors = H.run_suite(configs, cache_dir=out)
    for err in errors:
        print("error:", err)
    H.emit_csv(records, os.path.join(out, "results.csv"))
    report = os.path.join(out, "report.csv")
    H.emit_report(cells, report)
    print(open(report).read())


if __name__ == "__main__":
    main(*sys.argv[1:2])
