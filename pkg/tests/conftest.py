import pytest

from synthetic import load_store, synthetic_store


@pytest.fixture(scope="session")
def nav_store():
    return load_store("navigation")


@pytest.fixture(scope="session")
def weather_store():
    return load_store("weather")


@pytest.fixture(scope="session")
def medical_store():
    return load_store("medical")


@pytest.fixture(scope="session")
def meeting_store():
    return load_store("meeting")


@pytest.fixture(scope="session")
def syn_store():
    return synthetic_store()
