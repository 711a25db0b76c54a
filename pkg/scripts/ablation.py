"""Run the seven-row ablation grid on the pinned synthetic benchmark."""

import argparse
import time
from pathlib import Path

from rescuenet.benchmarks import ABLATION


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--report", type=Path, help="also write the table as JSON")
    args = parser.parse_args()
    start = time.time()
    report = ABLATION.run(log=lambda s: print(f"{s} t={time.time() - start:.0f}s", flush=True))
    print(report.to_text(), end="")
    ce, la, lad = (report.median_of(m) for m in ("ce", "locaware", "locaware_dice"))
    print(f"locaware>=ce: {la >= ce}  locaware_dice>=locaware-0.01: {lad >= la - 0.01}")
    if args.report:
        args.report.write_text(report.to_json())


if __name__ == "__main__":
    main()
