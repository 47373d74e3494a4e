import pytest
from realmerge.toy import ProtocolConfig


@pytest.fixture(scope="package")
def small_protocol():
    """
    A fast protocol configuration: three seen families, one unseen, few epochs.
    """
    return ProtocolConfig(
        seed=0,
        n_seen=3,
        n_unseen=1,
        p=8,
        h=6,
        d=4,
        n_train=30,
        n_val=10,
        n_test=30,
        epochs=40,
        all_in_one=False,
        merge_configs=[
            {"method": "wa"},
            {"method": "ta", "alpha": 0.5},
            {"method": "r2m", "alpha": 0.5, "rank_frac": 0.7},
        ],
    )
