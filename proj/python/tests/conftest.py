import os
import shutil

import pytest


@pytest.fixture(scope="session")
def cli():
    path = os.environ.get("IMMLAB_CLI") or shutil.which("immlab")
    if not path:
        pytest.skip("immlab executable not available")
    return path
