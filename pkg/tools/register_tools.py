"""Register the simulator commands on the command-line parser.

This module provides a function to register the single-run and refinement
study commands as sub-commands.
"""

import argparse

from tools.tool_simulation import SimulationToolsRegistrar
from tools.tool_studies import StudyToolsRegistrar


def register_tools(subparsers: argparse._SubParsersAction) -> None:
    """Register the run, energy-check, convergence and compare commands.

    Args:
        subparsers (argparse._SubParsersAction): Sub-command collection of the main parser.
    """
    SimulationToolsRegistrar(subparsers).register()
    StudyToolsRegistrar(subparsers).register()
