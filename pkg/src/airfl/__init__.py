"""airfl: a deterministic simulator and analysis toolkit for federated
averaging over analog multiple-access channels.

Subpackages / modules:

* ``numkit``   -- seeded streams, vectors, running statistics
* ``tasks``    -- linear / logistic / MLP learning tasks, partitioning, IDX files
* ``channel``  -- fading, precoding, denoising, AirComp aggregation
* ``fedalgos`` -- the training-loop variants and learning-rate schedules
* ``bounds``   -- numeric evaluators for the convergence bounds
* ``harness``  -- experiment configs, runners, metric export, CLI
"""

from . import bounds, channel, errors, fedalgos, harness, numkit, tasks

__version__ = "0.1.0"

__all__ = ["bounds", "channel", "errors", "fedalgos", "harness", "numkit", "tasks",
           "__version__"]
