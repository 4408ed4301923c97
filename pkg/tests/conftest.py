import os

import pytest

FIXTURES = os.path.join(os.path.dirname(__file__), "..", "fixtures")


def fixture_path(name):
    return os.path.join(FIXTURES, name)


def fixture_text(name):
    with open(fixture_path(name)) as f:
        return f.read()


@pytest.fixture
def tiny4_text():
    return fixture_text("tiny4.prototxt")


@pytest.fixture
def residual_text():
    return fixture_text("residual.prototxt")


@pytest.fixture
def resnet_text():
    return fixture_text("resnet34ish.prototxt")
