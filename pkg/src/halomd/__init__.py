"""
The HaloMD project: molecular dynamics with a local deep potential
evaluated on a virtual domain decomposition
"""

import logging

from .classical import LJParams, evaluate_classical
from .decomp import MASKED_REDUCTION, WIDE_HALO, dd_evaluate, partition_ranks
from .deeppot import DPConfig, DPModel, evaluate_dp
from .engine import MDConfig, run_md
from .system import AtomSet, SimBox

logging.getLogger(__name__).addHandler(logging.NullHandler())
