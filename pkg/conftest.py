"""
Shared pytest setup: slow experiment reruns only run with GPDNN_RUN_SLOW=1
"""

import os

import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long experiment rerun (set GPDNN_RUN_SLOW=1)")
    config.addinivalue_line("markers", "mnist: needs MNIST IDX files under GPDNN_DATA_DIR")


def pytest_collection_modifyitems(config, items):
    run_slow = os.getenv("GPDNN_RUN_SLOW") == "1"
    data_dir = os.getenv("GPDNN_DATA_DIR")
    skip_slow = pytest.mark.skip(reason="slow; set GPDNN_RUN_SLOW=1")
    skip_data = pytest.mark.skip(reason="needs GPDNN_DATA_DIR with MNIST IDX files")
    for item in items:
        if "slow" in item.keywords and not run_slow:
            item.add_marker(skip_slow)
        if "mnist" in item.keywords and not (data_dir and os.path.isdir(data_dir)):
            item.add_marker(skip_data)
