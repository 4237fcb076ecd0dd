"""
D.I.S.C.O. Stage #2: Storage Function
Parses a supplied storage function or synthesizes a linear one from stationarity.
"""

from typing import Any, Dict

from core.dissipativity import synthesize_linear_storage
from core.model import parse_storage
from stages.base_stage import BaseStage


class StorageStage(BaseStage):
    """Storage function anchored at the selected equilibrium."""

    def __init__(self, verbose: bool = True):
        super().__init__(stage_name="storage", label="Storage", verbose=verbose)

    def _execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        config = context["config"]
        system = context["system"]
        eq = context["equilibrium"]
        storage = parse_storage(config.storage, eq.x, system.state_box)
        if storage is None:
            self.think("synthesizing a linear storage function from the stationarity conditions...")
            storage = synthesize_linear_storage(system, eq, context["problem"].beta)
            source = f"synthesized linear (residual {storage.synthesis_residual:.3e})"
        else:
            source = f"supplied: --storage {config.storage}"
        self.log_result(f"storage {storage.form.value}, coefficients {storage.coefficients.tolist()}")
        return {"storage": storage, "storage_synthesized": config.storage.strip().lower() == "auto",
                "provenance": {"storage": source}}
