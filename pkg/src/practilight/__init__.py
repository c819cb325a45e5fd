"""practilight: light-control toolkit for latent diffusion models.

Pipeline: synthesize primitive scenes -> render beauty + direct-irradiance
pairs -> train a low-rank adapter that regresses the direct-irradiance latent
-> use the regressor as a guidance energy to relight generated images under
user-authored light conditions.
"""

__version__ = "0.1.0"
