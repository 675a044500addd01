"""Sensing metrics and resource allocation for OFDM integrated sensing and communication.

Modules
-------
grid
    Numerology, resource states, probing sequences and baseline allocations.
metrics
    Ambiguity function, resolution, sidelobe, SNR and sum-rate metrics.
convex
    Dense log-barrier solver for the convex subproblems.
alloc_resolution, alloc_sidelobe
    The two alternating allocators.
sim
    Echo synthesis, range-Doppler imaging and Monte-Carlo RMSE.
cli
    The ``isac-alloc`` command-line runner.
"""

from .grid import OfdmConfig, ResourceState, baseline_allocation
from .metrics import SidelobeRegion

__all__ = ["OfdmConfig", "ResourceState", "SidelobeRegion", "baseline_allocation"]
__version__ = "0.1.0"
