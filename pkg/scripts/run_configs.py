"""Run every YAML config in configs/ through the CLI and collect plot tables."""
import argparse
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(ROOT / "runs"))
    ap.add_argument("configs", nargs="*", help="defaults to configs/*.yaml")
    args = ap.parse_args()
    paths = args.configs or sorted(str(p) for p in (ROOT / "configs").glob("*.yaml"))
    failed = 0
    for p in paths:
        r = subprocess.run([sys.executable, "-m", "robinhum.cli", "run", "--config", p, "--out", args.out],
                           capture_output=True, text=True)
        print(f"{Path(p).name:32s} exit={r.returncode} {r.stdout.strip() or r.stderr.strip()[-200:]}")
        failed += r.returncode != 0
    for kind in ("eps", "lambda", "observability", "cost"):
        subprocess.run([sys.executable, "-m", "robinhum.cli", "plot-data", "--records", args.out, "--kind", kind,
                        "--out", str(Path(args.out) / f"plot_{kind}.csv")], check=True)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
