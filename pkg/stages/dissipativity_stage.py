"""
D.I.S.C.O. Stage #3: Dissipativity
Grid verification of local discounted strict dissipativity on the analysis region.
"""

from typing import Any, Dict

from core.dissipativity import default_region, verify_dissipativity
from core.errors import NotPositiveDefiniteError
from core.model import Box
from core.schemas import DissipativityVariant
from stages.base_stage import BaseStage


class DissipativityStage(BaseStage):
    """Accepts or rejects the storage certificate; a rejection stops the pipeline."""

    ZERO_TOL = 1e-12

    def __init__(self, verbose: bool = True):
        super().__init__(stage_name="dissipativity", label="Diss", verbose=verbose)

    def _execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        config = context["config"]
        system = context["system"]
        if config.region is not None:
            region = Box.from_intervals(config.region)
            region_source = "--region"
        else:
            region = default_region(system, context["equilibria"], context["local_index"])
            region_source = "half way to the nearest other equilibrium"

        self.think(f"verifying ({config.variant.value}) dissipativity on {region.intervals()}...")
        report = verify_dissipativity(
            context["problem"], context["equilibrium"], context["storage"], region,
            variant=config.variant, state_nodes=config.verify_nodes, control_nodes=config.verify_nodes,
            zero_tol=self.ZERO_TOL,
        )
        if not report.accepted:
            raise NotPositiveDefiniteError(
                f"certificate rejected: {report.violation_count} violating pairs, "
                f"min rotated cost among them {report.margin:.3e}",
                hint=self._hint(report, context),
            )
        self.log_result(f"accepted; positivity margin {report.positivity_margin:.3e}, "
                        f"ell_tilde_min {report.ell_tilde_min:.6g}")
        return {
            "region": region,
            "dissipativity": report,
            "provenance": {
                "region": f"{region.intervals()} ({region_source})",
                "ell_tilde_min": "grid minimum over X x U, polished by a bounded local search",
            },
        }

    def _hint(self, report, context: Dict[str, Any]) -> str:
        if report.margin >= -self.ZERO_TOL and report.variant == DissipativityVariant.XU:
            return "the rotated cost vanishes away from the equilibrium control; try --variant x"
        if context.get("storage_synthesized"):
            return "supply a storage function, e.g. --storage quadratic:-1"
        return "try a smaller --region, another --storage or a different --beta"
