import numpy as np
import pytest

from remapsim.scenario import from_dict, load_scenario


def tiny_raw(guest_pages=256, level=0.0, meta=0, volatile_pool=0, volatile_draw=0.0,
             size_bytes=4096, seed=1, **svc_extra):
    """Small one-service guest; sizes chosen so everything fits in 256 pages."""
    return {
        "guest_pages": guest_pages,
        "page_size": 4096,
        "rng_seed": seed,
        "kernel_common": 8,
        "noise": {"level": level, "window_seconds": 0.5},
        "services": [{
            "name": "web",
            "service_common": 12,
            "volatile_pool": volatile_pool,
            "volatile_draw": volatile_draw,
            "pre_resource_fraction": 0.5,
            "target": "index",
            "other": "about",
            **svc_extra,
            "resources": [
                {"name": "index", "size_bytes": size_bytes, "meta_pages": meta},
                {"name": "about", "size_bytes": 4096, "meta_pages": meta},
                {"name": "logo", "size_bytes": 9000, "meta_pages": meta},
            ],
        }],
    }


@pytest.fixture
def tiny():
    return from_dict(tiny_raw())


@pytest.fixture(scope="session")
def desk():
    return load_scenario("desk-vm")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
