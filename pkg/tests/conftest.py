import pytest

from config import settings
from core.rng import SeededRng
from core.tensor import precision
from schemas.config_schema import ExperimentConfig
from services.config_service import ConfigService
from services.data_service import DataService


def pytest_collection_modifyitems(config, items):
    if settings.HDC_RUN_SLOW:
        return
    skip_slow = pytest.mark.skip(reason="full experiment; set HDC_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def float64():
    with precision("float64"):
        yield


@pytest.fixture
def rng():
    return SeededRng(1234)


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    """Narrow two-stage network and a few iterations on 32 x 32 images."""
    return ConfigService.updated(
        ExperimentConfig(),
        model={"width": 4, "depth": 2},
        train={"iterations": 6, "labeled_batch": 2, "unlabeled_batch": 3, "eval_every": 3, "log_every": 1,
               "lr": 1e-3, "ema_warmup": 2},
        eval={"batch_size": 4},
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("dataset")
    return DataService.generate_dataset(seed=3, n_total=12, labeled_fraction=0.25, height=32, width=32, out_dir=out,
                                        n_val=2, n_test=3)


@pytest.fixture(scope="session")
def three_class_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("dataset3")
    return DataService.generate_dataset(seed=5, n_total=6, labeled_fraction=0.5, height=32, width=32, out_dir=out,
                                        n_val=2, n_test=2, num_classes=3)
