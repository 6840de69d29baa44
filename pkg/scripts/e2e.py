"""Default-config end-to-end run, timed; used by the acceptance suite.

    python scripts/e2e.py ROOT TAG [--config FILE]

Writes data and runs under ROOT/TAG and a ``timing.json`` with the wall time
and the evaluation directory. Two tags with the same config give two
independent executions whose metrics.json files can be compared.
"""

import argparse
import json
import logging
import time
from pathlib import Path

from cranisynth import pipeline as P


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("root")
    ap.add_argument("tag")
    ap.add_argument("--config")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    base = Path(args.root) / args.tag
    cfg = P.load_config(args.config) if args.config else P.ExperimentConfig()
    cfg = cfg.replace(data_dir=str(base / "data"), out_dir=str(base / "runs"))
    t0 = time.perf_counter()
    out = P.run_all(cfg)
    seconds = time.perf_counter() - t0
    record = {"seconds": seconds, "eval_dir": str(out), "config": cfg.to_dict()}
    (base / "timing.json").write_text(json.dumps(record, indent=1, sort_keys=True))
    print(json.dumps(json.loads((out / "metrics.json").read_text())["summary"], indent=1))
    print(f"wall time {seconds / 60:.1f} min")


if __name__ == "__main__":
    main()
