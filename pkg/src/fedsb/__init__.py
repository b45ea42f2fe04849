"""Desk-scale simulator of federated low-rank fine-tuning."""
from fedsb.adapters import AdapterMethod, LoraPair, SbTriple, effective_update
from fedsb.fedsim import FederationConfig, run_federation

__version__ = "0.1.0"

__all__ = ["AdapterMethod", "FederationConfig", "LoraPair", "SbTriple", "effective_update",
           "run_federation", "__version__"]
