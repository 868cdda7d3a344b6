import numpy as np
import pytest

from geoadapt.scenegen import default_domain_config, make_dataset


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """4+4 sequences of 5 frames; enough for every trainer/eval path."""
    root = tmp_path_factory.mktemp("corpus")
    make_dataset(default_domain_config("source", 11), 4, 5, root)
    make_dataset(default_domain_config("target", 111), 4, 5, root)
    return root
