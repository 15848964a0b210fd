"""
Estimating a slice profile
==========================

The trainer alternates one discriminator step and one generator step per
iteration. It keeps an exponential moving average of the generator's profile
and reports that average as the estimate. A short run is shown here; pass a
larger iteration count on the command line for a real estimate, e.g.
``python demos/train_estimator.py 2000``.
"""
import sys
import tempfile
from pathlib import Path

from sliceprof import metrics, simulate, trainer
from sliceprof.simulate import TruthProfileSpec
from sliceprof.trainer import TrainConfig, Trainer

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 60

##############################################################################
# Simulate an acquisition whose through-plane profile we know.

hr = simulate.make_phantom(seed=0, extents=96)
truth = simulate.make_profile(TruthProfileSpec("gaussian", 3.0))
lr = simulate.degrade_volume(hr, truth, 2)
print("LR spacing", lr.spacing, "-> scale", lr.scale_factor())

##############################################################################
# Train, printing the running estimate every 20 iterations.

config = TrainConfig(iterations=iterations, batch_size=32, seed=0, report_every=20)


def show(event):
    print("iter %(iteration)5d  G %(g_adv).3f  D %(d_loss).3f  FWHM %(fwhm_mm).2f mm" % event)


t = Trainer(lr, config, progress=show)
t.run(iterations // 2)

##############################################################################
# Stop halfway, checkpoint, and resume from disk. The result is bit-identical
# to an uninterrupted run.

path = Path(tempfile.mkdtemp()) / "run.ckpt"
trainer.checkpoint_save(t.state, path, config)
state, config = trainer.checkpoint_load(path)
resumed = Trainer(lr, config, state=state, progress=show)
resumed.run()
estimate = resumed.state.ema

##############################################################################
# Compare against the truth.

print("truth FWHM %.2f mm, estimate %.2f mm" % (metrics.fwhm(truth), metrics.fwhm(estimate)))
print("profile error %.3f" % metrics.profile_error(truth, estimate))
