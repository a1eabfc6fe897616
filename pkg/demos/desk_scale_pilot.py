"""Scaled-down desk-scale pipeline: generate data, train, evaluate, report.

Usage: python3 demos/desk_scale_pilot.py [--fraction 0.05] [--out DIR]

Step counts of desk_scale.yaml are multiplied by --fraction.  Prints the
beta-VAE FVM, the ID-GAN/decoder FID ratio and the stage-1/stage-2 FVM
equality for each seed.
"""
import argparse
from pathlib import Path

import numpy as np
import yaml

from idgan import experiment as ex


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--fraction", type=float, default=0.05)
    p.add_argument("--out", type=Path, default=Path("desk-pilot"))
    p.add_argument("--seeds", default="0,1,2")
    args = p.parse_args()

    raw = yaml.safe_load((Path(__file__).parent / "desk_scale.yaml").read_text())
    raw["name"] = f"desk-pilot-{args.fraction:g}"
    for stage in ("stage1", "stage2"):
        steps = max(1, int(raw[stage]["steps"] * args.fraction))
        raw[stage].update(steps=steps, checkpoint_every=steps)
    for key in ("lam_delay", "lam_warmup"):
        raw["stage2"][key] = int(raw["stage2"][key] * args.fraction)
    raw["seeds"] = [int(s) for s in args.seeds.split(",")]
    raw["eval"] = {"predictor_target": 0.0, "predictor_steps": 5000, "fid_samples": 5000}
    raw["output"] = str(args.out)
    cfg = ex.config_from_dict(raw)

    ex.cmd_generate_data(cfg)
    for m in ex.cmd_train(cfg):
        print(f"seed {m['seed']}: {m['status']}")
    ex.cmd_eval(cfg)
    rows = ex.read_rows(ex.output_root(cfg) / "runs" / cfg.hash / "eval-s0.csv")
    by = {}
    for name, seed, value in rows:
        by.setdefault(name, {})[seed] = value
    s1, s2 = cfg.method("stage1"), cfg.method("stage2")
    fvm1 = by.get(f"{s1}/fvm", {})
    fid1, fid2 = by.get(f"{s1}/fid", {}), by.get(f"{s2}/fid", {})
    print(f"(a) beta-VAE FVM mean {np.mean(list(fvm1.values())):.3f} (target >= 0.55)")
    if fid1 and fid2:
        ratio = np.mean(list(fid2.values())) / np.mean(list(fid1.values()))
        print(f"(b) FID ID-GAN {np.mean(list(fid2.values())):.3f} / decoder {np.mean(list(fid1.values())):.3f}"
              f" = {ratio:.3f} (target <= 0.25)")
    same = all(by.get(f"{s2}/fvm", {}).get(k) == v for k, v in fvm1.items())
    print(f"(c) stage-2 FVM equals stage-1 FVM for every seed: {same}")
    ex.cmd_report([ex.output_root(cfg) / "runs" / cfg.hash / "eval-s0.csv"], args.out / "reports", raw["name"])


if __name__ == "__main__":
    main()
