"""Saccade statistics (radar-plot data) for subject gaze and model rollouts
of a dataset split, written as two CSV files.

    python3 scripts/saccade_radar.py data/manifest.json run/best.json --out radar/
"""

import argparse
from pathlib import Path

from audiogaze import metrics
from audiogaze.data import load_dataset
from audiogaze.dynamics import predict
from audiogaze.training import Checkpoint


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("manifest")
    ap.add_argument("checkpoint")
    ap.add_argument("--split", default="test")
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)

    ds = load_dataset(args.manifest)
    params = Checkpoint.load(args.checkpoint).params
    scenes = ds.part(args.split)
    human = [(t.points, s.end_times()) for s in scenes for t in s.trajectories]
    model = [(s.to_pixels(predict(s, params)), s.end_times()) for s in scenes]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_saccade_csv(metrics.saccade_analysis(human), out / "human.csv")
    metrics.write_saccade_csv(metrics.saccade_analysis(model), out / "model.csv")
    print(f"wrote {out / 'human.csv'} and {out / 'model.csv'}")


if __name__ == "__main__":
    main()
