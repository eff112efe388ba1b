"""Category-level object pose estimation with an implicit space transformation.

Modules:
    tensor_core     reverse-mode autodiff over numpy arrays and Adam
    geometry        rotations, the canonical-frame mapping, Umeyama, 3D IoU
    synthdata       procedural categories, partial observations, snapshots
    pointfeat       per-point geometric, appearance and position features
    model           the network, its enhancers and the explicit variant
    prior_baseline  shape-prior deformation baseline and the prior study
    evalbench       metrics, ablation, Umeyama variant and speed harnesses
    cli             command line entry points
"""

__version__ = "0.1.0"
