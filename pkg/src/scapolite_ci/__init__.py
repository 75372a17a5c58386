"""Compile Scapolite security-configuration guides and test the results.

The pipeline: rule documents and a policy catalog are compiled into
per-profile rulepacks and OVAL checks, which a declarative test
specification exercises against simulated targets.
"""

__version__ = "0.1.0"
