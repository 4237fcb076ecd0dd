"""
D.I.S.C.O. Test Configuration
"""
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path for imports
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))


@pytest.fixture
def example1():
    """Example 1 system: x+ = x + u, quartic double-well cost."""
    from core.model import expand_model_spec
    from core.schemas import ModelKind, ModelSpec
    return expand_model_spec(ModelSpec(kind=ModelKind.EXAMPLE_1))


@pytest.fixture
def example3():
    """Example 3 system: x+ = 2x + u, cost -x^2/2 + u^2."""
    from core.model import expand_model_spec
    from core.schemas import ModelKind, ModelSpec
    return expand_model_spec(ModelSpec(kind=ModelKind.EXAMPLE_3))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
