"""Counter-based random streams.

Every random draw in the laboratory comes from a Philox generator keyed by
a single 64-bit experiment seed plus small integer stream identifiers.
Streams are independent of scheduling and thread count, so batched
computations reproduce bit-for-bit regardless of how work is split.
"""

import numpy as np

# Registry of stream purposes; ids are frozen, never reordered.
STREAMS = {
    "pairs": 1,
    "volume_mc": 2,
    "heat_mc": 3,
    "control_opt": 4,
    "poincare_bumps": 5,
    "holder_pairs": 6,
    "flow_pairs": 7,
    "validation": 8,
    "lift_mc": 9,
}


def stream(seed, purpose, index=0):
    """Return a Generator for (seed, purpose, index), reproducible in isolation."""
    sid = STREAMS[purpose] if isinstance(purpose, str) else int(purpose)
    key = (np.uint64(seed) << np.uint64(20)) ^ np.uint64(sid * 1048573 + index)
    return np.random.Generator(np.random.Philox(key=int(key)))
