from __future__ import annotations

import pytest

from scripts import clustering, detector, eval_harness, pst_baseline, synthgen, trace_model

SEED = 7


@pytest.fixture(scope="session")
def normal_corpus():
    return synthgen.gen_corpus(synthgen.WorkloadSpec(seed=SEED), 2000)


@pytest.fixture(scope="session")
def training_set(normal_corpus):
    return trace_model.load_training_set(normal_corpus)


@pytest.fixture(scope="session")
def workload_profile(training_set):
    cfg = clustering.GkmConfig(max_k=10, bound_td=1000, candidate_stride=20)
    return detector.train_profile(training_set, cfg, p0=0.05)


@pytest.fixture(scope="session")
def fresh_normals():
    return synthgen.gen_corpus(synthgen.WorkloadSpec(seed=SEED + 1), 2000)


@pytest.fixture(scope="session")
def attack_corpora():
    return eval_harness.standard_attack_corpora(seed=SEED, trials=300)


@pytest.fixture(scope="session")
def pst_models(normal_corpus):
    return {depth: pst_baseline.pst_train(normal_corpus, depth) for depth in (3, 5)}
