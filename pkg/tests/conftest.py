from fractions import Fraction

import pytest

from qsdlab.models import closed_forms, hub_two_spoke


@pytest.fixture(scope="session")
def hub2():
    return hub_two_spoke(0.2)


@pytest.fixture(scope="session")
def hub2_exact():
    return hub_two_spoke(Fraction(1, 5))


@pytest.fixture(scope="session")
def fam():
    return closed_forms(0.2)


@pytest.fixture(scope="session")
def fam_exact():
    return closed_forms(Fraction(1, 5))
