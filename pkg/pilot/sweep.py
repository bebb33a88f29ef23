"""Train model variants on a synthetic dataset and print one JSON line per run.

Used to pick the dataset and training settings of the slow acceptance checks.

    python3 pilot/sweep.py '{"signal": 0.5, "frame_signal": 0, "visibility": 0.5,
        "T": 50, "fps": 10, "tau_frame": 46, "N": 10, "d": 32}' \
        --epochs 30 --seeds 0,1,2 --train '{"d": 32, "learning_rate": 1e-3}'
"""

import argparse
import json
import time

from dsta.features import DatasetSpec, TauRule, synthesize
from dsta.trainer import TrainConfig, train

VARIANTS = {"full": {}, "no_dsa": {"use_dsa": False}, "no_dta": {"use_dta": False}, "no_tsaa": {"use_tsaa": False}}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("dataset", help="JSON overrides for DatasetSpec.dad_like; tau_frame fixes tau")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--variants", default=",".join(VARIANTS))
    ap.add_argument("--train", default="{}", help="JSON overrides for TrainConfig")
    args = ap.parse_args()

    ds = json.loads(args.dataset)
    if "tau_frame" in ds:
        ds["tau_rule"] = TauRule("fixed", frame=ds.pop("tau_frame"))
    data = synthesize(DatasetSpec.dad_like(**ds))
    overrides = json.loads(args.train)
    for seed in (int(s) for s in args.seeds.split(",")):
        for name in args.variants.split(","):
            t0 = time.time()
            cfg = TrainConfig(epochs=args.epochs, seed=seed, **overrides, **VARIANTS[name])
            cks = train(cfg, data["train"], data["test"])
            aps = [round(c.ap, 4) for c in cks]
            print(json.dumps({
                "dataset": args.dataset, "seed": seed, "variant": name, "best_ap": max(aps),
                "final_ap": aps[-1], "final_mtta": round(cks[-1].mtta, 3), "seconds": round(time.time() - t0, 1),
            }), flush=True)


if __name__ == "__main__":
    main()
