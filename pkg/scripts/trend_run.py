"""Run one seed of the three-method comparison (gt / drift / ours) and print
mean surface distances.  Usage: trend_run.py SEED ITERATIONS OUTDIR
"""

import sys

from sonarfield.benchmarks import run_trend_seed

seed = int(sys.argv[1])
iterations = int(sys.argv[2])
results = run_trend_seed(seed, iterations, outdir=sys.argv[3])
print(f"[seed {seed}] ours<=0.9*drift: "
      f"{results['ours']['mean'] <= 0.9 * results['drift']['mean']}, "
      f"ours<=2*gt: {results['ours']['mean'] <= 2 * results['gt']['mean']}")
