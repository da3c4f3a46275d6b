"""Conic programs: representation, embedded SDP solver and SDPA exchange."""

from .ipm import SolverOptions, independent_rows, solve
from .program import ConicError, ConicProgram, ConicSolution, PsdBlock, Status, evaluate_solution
from .sdpa import (SdpaError, export_sdpa, export_sdpa_solution, import_sdpa, import_sdpa_solution, same_program,
                   sidecar_path)

__all__ = ["ConicError", "ConicProgram", "ConicSolution", "PsdBlock", "SdpaError", "SolverOptions", "Status",
           "evaluate_solution", "export_sdpa", "export_sdpa_solution", "import_sdpa", "import_sdpa_solution",
           "independent_rows", "same_program", "sidecar_path", "solve"]
