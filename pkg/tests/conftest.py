import pytest

from qapipe.fixture import build_toy_fixture, write_toy_fixture
from qapipe.matching import warm_up_matchers


@pytest.fixture(scope="session")
def toy():
    return build_toy_fixture()


@pytest.fixture(scope="session")
def toy_files(tmp_path_factory):
    out = tmp_path_factory.mktemp("toyfx")
    return write_toy_fixture(out)


@pytest.fixture(scope="session")
def jit_warm():
    warm_up_matchers()
