"""Train (or load) the five-seed acceptance experiments and print criteria 3-10.

    python3 scripts/run_acceptance.py [--out runs/acceptance] [--only dep2sem|sem2dep]

Seeds already present with a matching manifest are skipped, so the script can be
interrupted and restarted.
"""

import argparse
import logging
import sys
from pathlib import Path

from atdt import acceptance


def main() -> int:
    p = argparse.ArgumentParser()
    p.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "runs" / "acceptance"))
    p.add_argument("--only", choices=["dep2sem", "sem2dep"])
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    out = Path(args.out)
    verdicts = []
    if args.only in (None, "sem2dep"):
        s2d = acceptance.ensure_runs(acceptance.sem2dep_plan(), acceptance.SEM2DEP_ARMS, out)
        verdicts.append(acceptance.sem2dep_gain(s2d))
        original = s2d.run_dirs[acceptance.SEEDS[0]]
        verdicts.append(acceptance.determinism(original, acceptance.ensure_rerun(original, out)))
    if args.only in (None, "dep2sem"):
        d2s = acceptance.ensure_runs(acceptance.dep2sem_plan(), acceptance.DEP2SEM_ARMS, out)
        verdicts += [
            acceptance.dep2sem_gain(d2s, acceptance.pipeline_seconds(d2s)),
            acceptance.level_trend(d2s),
            acceptance.shared_encoder(d2s),
            acceptance.batchnorm(d2s),
            acceptance.proxy_labels(d2s),
        ]
        if args.only is None:
            verdicts.append(acceptance.ordering(d2s, s2d))
    for v in sorted(verdicts, key=lambda v: v.number):
        print(v.line())
    return 0 if all(v.passed for v in verdicts) else 1


if __name__ == "__main__":
    sys.exit(main())
