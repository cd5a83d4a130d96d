"""Train the full model on the synthetic recovery suite and print a JSON report.

    python3 scripts/run_recovery.py --out recovery.json
"""

import argparse
import json
import sys
import time

from audiogaze import experiments


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=None, help="write the report here as well")
    ap.add_argument("--seed", type=int, default=None, help="training seed")
    ap.add_argument("--lr", type=float, default=None)
    args = ap.parse_args(argv)

    overrides = {k: v for k, v in (("seed", args.seed), ("lr", args.lr)) if v is not None}
    cfg = experiments.recovery_train_config(**overrides)
    t0 = time.time()

    def log(row):
        print(f"[{time.time() - t0:6.0f}s] epoch {row['epoch']:3d} {row['stage']} "
              f"val={row['val_loss']:.5f} alpha={row['alpha']:.3f}", file=sys.stderr)

    _, _, report = experiments.run_recovery(train_cfg=cfg, log_fn=log)
    text = json.dumps(report, indent=1)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)


if __name__ == "__main__":
    main()
