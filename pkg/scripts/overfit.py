"""Train the miniature model on 10 synthetic scenes and report its training-set score."""

import argparse
import time

from rescuenet.benchmarks import OVERFIT


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--quiet", action="store_true", help="only print the final report")
    args = parser.parse_args()
    start = time.time()
    result, report = OVERFIT.run(log=None if args.quiet else print)
    print(report.to_text(), end="")
    print(f"elapsed={time.time() - start:.1f}s bound={OVERFIT.min_score} pass={report.overall >= OVERFIT.min_score}")


if __name__ == "__main__":
    main()
