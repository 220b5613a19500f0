"""Regenerate the small synthetic fixture bundled under tests/data/fixture.

    python scripts/make_fixture.py [out_dir]
"""

import sys
from pathlib import Path

from trace_mrp import synth

FIXTURE_SPEC = synth.SynthSpec(seed=2022, n_trace_users=3000, n_survey=1500)


def main(out_dir: str | None = None) -> None:
    out = Path(out_dir) if out_dir else Path(__file__).resolve().parents[1] / "tests" / "data" / "fixture"
    paths = synth.write(synth.generate(FIXTURE_SPEC), out)
    for name, path in sorted(paths.items()):
        print(f"{name:8s} {path}")


if __name__ == "__main__":
    main(*sys.argv[1:])
