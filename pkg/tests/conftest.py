import time

import numpy as np
import pytest

from hporacle import dnn, driver
from hporacle.mesh import audit

ACCEPTANCE_SEED = 7
ADAPT_ITERS = 20
DNN_ITERS = 10


def audited_adapt(problem, iterations=ADAPT_ITERS):
    """Self-adaptive run at accuracy 0 with a mesh audit after every iteration."""
    violations = []

    def check(it, mesh, rec):
        violations.extend(f"iteration {it}: {v}" for v in audit(mesh))

    t = time.perf_counter()
    config = driver.AdaptConfig(max_iterations=iterations, accuracy=0.0, threshold=0.33, initial_order=2)
    result = driver.self_adaptive_loop(config, problem, on_iteration=check)
    return {"result": result, "violations": violations, "seconds": time.perf_counter() - t}


def seeded_training(records, seed=ACCEPTANCE_SEED):
    t = time.perf_counter()
    config = dnn.TrainConfig(seed=seed, val_fraction=0.2)
    model, history = dnn.train(dnn.init_model(dnn.Architecture(), seed), records, config)
    X, h, sons = dnn.as_arrays(records)
    tr, va = dnn.split_indices(len(h), config.val_fraction, np.random.default_rng(seed))
    return {"model": model, "history": history, "val": va, "train": tr,
            "acc": dnn.accuracies(model, X[va], h[va], sons[va]),
            "majority": float(np.max(np.bincount(h[va], minlength=4)) / len(va)),
            "seconds": time.perf_counter() - t}


@pytest.fixture(scope="session")
def problem():
    return driver.lshape_problem()


@pytest.fixture(scope="session")
def adaptive_run(problem):
    return audited_adapt(problem)


@pytest.fixture(scope="session")
def trained(adaptive_run):
    return seeded_training(adaptive_run["result"].dataset)


@pytest.fixture(scope="session")
def hybrid_run(problem, adaptive_run, trained):
    violations = []

    def check(it, mesh, rec):
        violations.extend(f"iteration {it}: {v}" for v in audit(mesh))

    config = driver.AdaptConfig(max_iterations=DNN_ITERS)
    mesh = adaptive_run["result"].mesh.copy()
    result = driver.dnn_driven_loop(config, problem, trained["model"], mesh=mesh,
                                    start_iteration=ADAPT_ITERS + 1, on_iteration=check)
    return {"result": result, "violations": violations}
