import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from skelpose.skeleton import Skeleton


@pytest.fixture
def skel():
    return Skeleton.default()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_chain_skeleton(num_joints=3, bone=(0.0, 1.0, 0.0)):
    """Simple serial chain used by hand-derived fixtures."""
    bone = np.asarray(bone, dtype=float)
    rest = np.array([i * bone for i in range(num_joints)])
    return Skeleton(
        joint_names=[f"j{i}" for i in range(num_joints)],
        parent=np.array([-1] + list(range(num_joints - 1))),
        rest_positions=rest,
    )
