"""
The full experiment on the shipped synthetic demo
=================================================

Three source sites with different feature coverage, one shifted target
with 50 labeled records. Four conditions are compared over several seeds.
All numbers are synthetic.
"""

import sys
import tempfile

from fatl import pipeline as pl

seeds = [int(s) for s in sys.argv[1:]] or [1, 2, 3, 4, 5]

with tempfile.TemporaryDirectory() as out:
    config = pl.load_config(pl.demo_config_path(), {"output_dir": out, "seeds": seeds})
    summary = pl.run_pipeline(config)
    print(pl.summary_text(summary), end="")
