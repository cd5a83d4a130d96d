"""Train every ablation variant on the synthetic recovery suite and report
test-set PDS plus whether the expected ordering holds.

    python3 scripts/run_ablation.py --out ablation.json
"""

import argparse
import json
import sys
import time

from audiogaze import experiments


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=None)
    ap.add_argument("--tol", type=float, default=0.01, help="tie tolerance")
    args = ap.parse_args(argv)

    cfg = experiments.recovery_train_config()
    t0 = time.time()

    def log(variant, row):
        print(f"[{time.time() - t0:6.0f}s] {variant:12s} epoch {row['epoch']:3d} "
              f"{row['stage']} val={row['val_loss']:.5f}", file=sys.stderr)

    suite, full, report = experiments.run_recovery(
        train_cfg=cfg, log_fn=lambda row: log("full", row))
    scores = experiments.ablation_pds(suite, full, cfg, log_fn=log)
    out = {"pds": scores, "ordering_holds": experiments.ordering_holds(scores, args.tol),
           "recovery": report}
    text = json.dumps(out, indent=1)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)


if __name__ == "__main__":
    main()
