"""Command line: ``python -m helmschwarz {run,sweep,analyze} --config cfg.json``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiment import ANALYSES, ExperimentConfig, ExperimentError, run_experiment, run_sweep


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="helmschwarz", description="Two-level Schwarz experiments for the CAP Helmholtz problem.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON file with ExperimentConfig fields")
        p.add_argument("--out", default="out", help="output directory (default: out)")

    common(sub.add_parser("run", help="solve once and write report.json"))
    sw = sub.add_parser("sweep", help="vary one parameter and write sweep.csv")
    common(sw)
    sw.add_argument("--param", required=True)
    sw.add_argument("--values", required=True, help="comma-separated list, e.g. 10,20,40")
    an = sub.add_parser("analyze", help="run analyses without the GMRES solve")
    common(an)
    an.add_argument("--only", default=",".join(ANALYSES), help=f"comma-separated subset of {','.join(ANALYSES)}")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        config = ExperimentConfig.from_json(args.config)
    except (OSError, ValueError, TypeError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "run":
            rep = run_experiment(config, out_dir=out, run_name="run")
            (out / "report.json").write_text(rep.to_json())
            g = rep.gmres
            print(f"iterations={g['iterations']} converged={g['converged']} dofs={rep.summary['dofs']}")
        elif args.command == "analyze":
            only = [s for s in args.only.split(",") if s]
            rep = run_experiment(config.replace(analyses=only), solve=False)
            (out / "report.json").write_text(rep.to_json())
            print(json.dumps(rep.to_dict()["analyses"], indent=2, sort_keys=True))
        else:
            values = [v for v in args.values.split(",") if v.strip()]
            reports, text = run_sweep(config, args.param, values, out_dir=out)
            (out / "report.json").write_text(
                json.dumps([r.to_dict() if r else None for r in reports], indent=2, sort_keys=True)
            )
            print(text, end="")
    except (ExperimentError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
