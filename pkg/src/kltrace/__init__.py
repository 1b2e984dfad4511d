"""Desk-scale lab for extracting optical flow from a small next-frame model.

The pipeline: synthetic clips with exact ground truth (`worlds`), a local
patch tokenizer (`tokenizer`), a random-access autoregressive next-frame
model (`seqmodel`), perturb-and-trace flow readout (`tracer`), and
TAP-Vid-style metrics (`metrics`). `cli` wires everything into batch
commands.
"""

from kltrace.errors import ConfigError, DataError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "NumericalError", "__version__"]
