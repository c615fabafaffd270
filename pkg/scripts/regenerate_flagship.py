"""Regenerate the committed summary statistics of the flagship dipole experiment.

Usage: python3 scripts/regenerate_flagship.py [tests/data/flagship_summary.json]

The summary is produced by running the pipeline, never edited by hand. Rerun
this script only after an intentional change to the simulation or fit, and
review the diff before committing.
"""
import hashlib
import json
import sys
from pathlib import Path

from nvfringe import io, pipeline

FLAGSHIP_SEED = 0


def summary() -> dict:
    res = pipeline.run_simulation(pipeline.flagship_config(FLAGSHIP_SEED))
    rep = res.report
    return dict(
        seed=FLAGSHIP_SEED,
        config_sha256=hashlib.sha256(json.dumps(io.config_to_dict(res.config), sort_keys=True).encode()).hexdigest(),
        f_init=res.f_init,
        shifts=int(abs(res.record.shift_log).sum()),
        fit_status=res.model.info.status,
        fit_iterations=res.model.info.iterations,
        objective=res.model.info.objective,
        max_all=rep.max_all,
        max_interior=rep.max_interior,
        rms_interior=rep.rms_interior,
        frac_interior_below=rep.frac_interior_below,
    )


if __name__ == "__main__":
    out = Path(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parents[1] / "tests" / "data" / "flagship_summary.json")
    out.write_text(json.dumps(summary(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")
