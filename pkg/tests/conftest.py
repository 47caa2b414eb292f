import pytest
import torch

from unidistill.data import generate_dense_suite, generate_domain_suite

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def dense_suite():
    # seed 7, 8 images, 32x32: splits into 6/1/1
    return generate_dense_suite(7, 8, 32)


@pytest.fixture(scope="session")
def mdl_suite():
    # 4 training domains + 1 withheld, 10 classes x 20 samples each
    return generate_domain_suite(1, 4, 10, 20, hw=32)


@pytest.fixture(scope="session")
def mdl_suite_small():
    # cheaper variant for training-path tests
    return generate_domain_suite(3, 2, 6, 10, hw=16)
