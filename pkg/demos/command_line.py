"""
The command-line pipeline
=========================

The same steps are available as subcommands of ``sliceprof`` (also
``python -m sliceprof``). This script calls the entry point in-process on a
small phantom so it finishes in seconds. The equivalent shell session is::

    sliceprof phantom --size 64 --seed 1 --out hr.raw
    sliceprof simulate --in hr.raw --kind gaussian --fwhm 4 --scale 2 \\
        --out lr.nii --truth truth.json
    sliceprof estimate --in lr.nii --out k.json --iters 2000 --batch 32 --svg k.svg
    sliceprof evaluate --truth truth.json --est k.json --hr hr.raw --out report.json
    sliceprof measure --in lr.nii --out fwhm.json --iters 2000 --repeat 3
"""
import json
import tempfile
from pathlib import Path

from sliceprof.cli import main

work = Path(tempfile.mkdtemp())


def run(*argv):
    argv = [str(a) for a in argv]
    print("$ sliceprof", " ".join(argv))
    code = main(argv)
    print("  exit", code)
    return code


run("-q", "phantom", "--size", 64, "--seed", 1, "--out", work / "hr.raw")
run("-q", "simulate", "--in", work / "hr.raw", "--kind", "gaussian", "--fwhm", 4, "--scale", 2,
    "--out", work / "lr.nii", "--truth", work / "truth.json")
run("-q", "estimate", "--in", work / "lr.nii", "--out", work / "k.json", "--iters", 20,
    "--batch", 8, "--svg", work / "k.svg")
run("-q", "evaluate", "--truth", work / "truth.json", "--est", work / "k.json",
    "--hr", work / "hr.raw", "--out", work / "report.json")
print(json.dumps(json.loads((work / "report.json").read_text()), indent=2))

##############################################################################
# Errors map to exit codes: 64 for usage, 2 for bad input data.

run("-q", "simulate", "--in", work / "hr.raw", "--kind", "sinc", "--fwhm", 3, "--scale", 2,
    "--out", work / "x.raw", "--truth", work / "t.json")
(work / "junk.bin").write_bytes(b"\0" * 16)
run("-q", "estimate", "--in", work / "junk.bin", "--out", work / "k2.json")
print("outputs:", sorted(p.name for p in work.iterdir()))
