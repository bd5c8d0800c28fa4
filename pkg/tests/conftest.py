import numpy as np
import pytest
import torch
from PIL import Image

from drought_xai import synth
from drought_xai.model import BackboneSpec, HeadConfig, build_classifier

ACCEPTANCE_FILE = "test_acceptance.py"


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Small synthetic corpus: 12 boxes per class, XML + CSV + PNG scenes."""
    root = tmp_path_factory.mktemp("corpus")
    spec = synth.SynthSpec(n_per_class=12, seed=3)
    scenes = synth.generate_dataset(spec, root)
    return root, spec, scenes


def toy_model(seed=0, feature_dim=8, size=(64, 64), double=True):
    spec = BackboneSpec.for_name("toy_cnn", feature_dim=feature_dim, input_size=size)
    model = build_classifier(spec, HeadConfig(), seed=seed)
    return model.double() if double else model


@pytest.fixture
def toy():
    return toy_model()


def write_png(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)
    return path


def pytest_terminal_summary(terminalreporter):
    reports = []
    for key in ("passed", "failed", "error"):
        reports += [r for r in terminalreporter.stats.get(key, []) if ACCEPTANCE_FILE in r.nodeid]
    reports = [r for r in reports if r.when == "call" or r.outcome != "passed"]
    if not reports:
        return
    terminalreporter.section("acceptance criteria")
    seen = set()
    for r in sorted(reports, key=lambda r: r.nodeid):
        if r.nodeid in seen:
            continue
        seen.add(r.nodeid)
        status = "PASS" if r.outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {r.nodeid.split('::')[-1]}")


torch.set_num_threads(1)


@pytest.fixture(scope="session")
def manifest(corpus, tmp_path_factory):
    """Patches of the synthetic corpus, split 80/20 with a held-out copy of val as test."""
    from drought_xai import ingest

    _, _, scenes = corpus
    patches = ingest.extract_corpus(scenes, tmp_path_factory.mktemp("patches"))
    m = ingest.split_manifest(patches, 0.25, 42)
    m.test = list(m.val)
    return m
