"""Scale-aware multi-view 3D reconstruction at desk scale.

Subpackages: autodiff engine, geometry, prior injection, model, supervision
(losses + training), synthetic scenes, evaluation, and the CLI.
"""

from . import autodiff, geometry, priors, model, supervision, scenes, evaluation

__all__ = ["autodiff", "geometry", "priors", "model", "supervision",
           "scenes", "evaluation"]
__version__ = "0.1.0"
