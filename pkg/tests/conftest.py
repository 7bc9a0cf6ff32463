import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for `import support`

from samlab.harness import run_toy_experiment


@pytest.fixture(scope="session")
def toy_experiment():
    """One desk-scale four-arm toy run over three seeds, shared by the
    acceptance criteria that read its checkpoints."""
    return run_toy_experiment([0, 1, 2], scale="desk")
