import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from run_config import RunConfig  # noqa: E402


@pytest.fixture
def tiny_config():
    return RunConfig.tiny()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def isolated_cwd(tmp_path, monkeypatch):
    """O log em arquivo (decouple_ssad.log) fica dentro do diretório temporário do teste"""
    monkeypatch.chdir(tmp_path)
