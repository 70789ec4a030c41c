"""Contrastive successor features on synthetic environments with known latents."""
from .config import RunConfig
from .harness import RunReport, ablate_dim, ablate_objective, ablate_skills, evaluate_run, lemma_check, run_csf

__version__ = "0.1.0"

__all__ = ["RunConfig", "RunReport", "run_csf", "evaluate_run", "ablate_skills", "ablate_dim",
           "ablate_objective", "lemma_check"]
