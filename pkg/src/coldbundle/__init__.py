"""Cold-start bundle recommendation with dual-view graph priors,
per-view conditional diffusion experts, and cold-aware gated fusion."""

__version__ = "0.1.0"
