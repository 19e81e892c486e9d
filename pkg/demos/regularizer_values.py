"""
What AR and TAR measure
=======================

AR scores how large the final-layer outputs are; TAR scores how much they
move from one step to the next.
"""

import numpy as np

from rlm.autodiff import Tensor
from rlm.regularizers import Reduction, ar_loss, tar_loss

t = np.linspace(0, 2 * np.pi, 20)

# one sequence, batch of one, two hidden units: slow and fast oscillations
slow = np.stack([np.sin(t), np.cos(t)], axis=-1)[:, None, :]
fast = np.stack([np.sin(5 * t), np.cos(5 * t)], axis=-1)[:, None, :]

for name, h in [("slow", slow), ("fast", fast), ("slow, halved", 0.5 * slow)]:
    ar = ar_loss(Tensor(h), alpha=1.0).item()
    tar = tar_loss(Tensor(h), beta=1.0).item()
    print(f"{name:<13} AR {ar:.3f}  TAR {tar:.3f}")

# both sequences live on the unit circle, so AR cannot tell them apart;
# TAR can.  Scaling the whole sequence scales both terms.

###############################################################################
# The aggregation over timesteps and batch is configurable
for red in Reduction:
    print(f"{red.value:<13} AR {ar_loss(Tensor(fast), 1.0, red).item():.3f}")
