import pytest

from pocketnlu.corpus import generate_synthetic
from pocketnlu.ontology import load_ontology, load_triggers


def data_path(name: str) -> str:
    from importlib.resources import files

    return str(files("pocketnlu") / "data" / name)


@pytest.fixture(scope="session")
def onto():
    o = load_ontology(data_path("toy.ont"))
    load_triggers(o, data_path("triggers.tsv"))
    return o


@pytest.fixture(scope="session")
def small_corpus(onto):
    """120 conversations; enough to hit every template family."""
    return generate_synthetic(onto, n=120, seed=11)
