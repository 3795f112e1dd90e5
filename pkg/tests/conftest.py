import time

import numpy as np
import pytest

from langembed import pipeline
from langembed import tensor as T
from langembed.config import TrainConfig
from langembed.evaluation import CONDITIONS
from langembed.synthdata import build_corpus
from langembed.training import Splits

FD_STEP = 1e-5


def numeric_grad(f, arr, coords, h=FD_STEP):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` at the given flat coordinates."""
    flat = arr.reshape(-1)
    out = np.empty(len(coords))
    for k, i in enumerate(coords):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[k] = (up - down) / (2 * h)
    return out


def sample_coords(arr, rng, limit=30):
    n = arr.size
    return np.arange(n) if n <= limit else np.sort(rng.choice(n, size=limit, replace=False))


def rel_error(a, b):
    """Norm-wise relative error between two gradient vectors."""
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(build, leaves, rng=None, limit=30):
    """Worst relative error between autodiff and central differences.

    ``build()`` maps the current leaf data to a scalar Tensor; ``leaves`` is a
    list of Tensors with ``requires_grad=True``.
    """
    rng = rng or np.random.default_rng(0)
    for leaf in leaves:
        leaf.grad = None
    build().backward()
    worst = 0.0
    for leaf in leaves:
        coords = sample_coords(leaf.data, rng, limit)
        with T.no_grad():
            num = numeric_grad(lambda: float(build().data), leaf.data, coords)
        ana = leaf.grad.reshape(-1)[coords]
        worst = max(worst, rel_error(ana, num))
    return worst


def tiny_config(**over):
    base = dict(
        n_languages=3,
        speakers_per_language=3,
        train_per_speaker=6,
        eval_per_speaker=4,
        n_frames=30,
        encoder_steps=30,
        encoder_accuracy_gate=0.0,
        stage1_steps=20,
        stage2_steps=10,
        low_resource_budget=6,
        probe_steps=50,
        batch_size=4,
    )
    base.update(over)
    return TrainConfig(**base).validate()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    config = tiny_config()
    root = tmp_path_factory.mktemp("tiny") / "dataset"
    manifest = build_corpus(config, root)
    return config, manifest, Splits.load(manifest)


def _leaf(rng, *shape):
    return T.Tensor(rng.normal(size=shape), requires_grad=True)


def _away_from_zero(rng, *shape):
    x = rng.normal(size=shape)
    return T.Tensor(np.where(np.abs(x) < 0.1, 0.5, x), requires_grad=True)


def op_cases(rng):
    """(leaves, forward) pairs covering every differentiable op."""
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    v = _leaf(rng, 4)
    r = _away_from_zero(rng, 5, 3)
    x3 = _leaf(rng, 2, 5, 3)
    h2 = _leaf(rng, 2, 3)
    m1, m2 = _leaf(rng, 3, 5), _leaf(rng, 5, 2)
    xs, ks, bs = _leaf(rng, 12, 3), _leaf(rng, 3, 3, 4), _leaf(rng, 4)
    xb = _leaf(rng, 2, 15, 3)
    sp = _leaf(rng, 2, 6, 3)
    c1, c2 = _leaf(rng, 2, 5, 3), _leaf(rng, 2, 2, 3)
    lg = _leaf(rng, 5, 4)
    labels = np.array([0, 3, 1, 1, 2])
    return {
        "add": ([a, b], lambda: T.add(a, b)),
        "mul": ([a, b], lambda: T.mul(a, b)),
        "scale": ([a], lambda: T.scale(a, -2.5)),
        "relu": ([r], lambda: T.relu(r)),
        "add_bias": ([a, v], lambda: T.add_bias(a, v)),
        "sum_all": ([a], lambda: T.sum_all(a)),
        "mean_over_axis": ([x3], lambda: T.mean_over_axis(x3, 1)),
        "reshape": ([x3], lambda: T.reshape(x3, (10, 3))),
        "concat": ([c1, c2], lambda: T.concat([c1, c2], axis=1)),
        "take_last": ([x3], lambda: T.take_last(x3, 1, 3)),
        "tile_frames": ([h2], lambda: T.tile_frames(h2, 4)),
        "matmul": ([m1, m2], lambda: T.matmul(m1, m2)),
        "conv1d_d1": ([xs, ks, bs], lambda: T.conv1d(xs, ks, bs, dilation=1)),
        "conv1d_d2_batched": ([xb, ks, bs], lambda: T.conv1d(xb, ks, bs, dilation=2)),
        "conv1d_d3_nobias": ([xb, ks], lambda: T.conv1d(xb, ks, None, dilation=3)),
        "statistics_pooling": ([sp], lambda: T.statistics_pooling(sp)),
        "softmax_cross_entropy": ([lg], lambda: T.softmax_cross_entropy(lg, labels)),
    }


OP_CASES = tuple(op_cases(np.random.default_rng(0)))


def op_gradcheck(name):
    """Worst relative finite-difference error for one op under a random linear read-out."""
    rng = np.random.default_rng(sum(map(ord, name)))
    leaves, fn = op_cases(rng)[name]
    shape = fn().shape
    if shape:
        weights = T.Tensor(np.random.default_rng(7).normal(size=shape))
        return gradcheck(lambda: T.sum_all(T.mul(fn(), weights)), leaves)
    return gradcheck(fn, leaves)


# ---------------------------------------------------------------- full default runs

ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    """Print and remember one pass/fail line, then fail the test if needed."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def _timed_default_run(root):
    config = TrainConfig()
    run = pipeline.RunDir(root)
    times = {}

    def timed(key, fn, *args, **kw):
        t0 = time.perf_counter()
        out = fn(*args, **kw)
        times[key] = times.get(key, 0.0) + time.perf_counter() - t0
        return out

    t_start = time.perf_counter()
    timed("datagen", pipeline.datagen, config, run)
    splits = timed("load", Splits.load, run.manifest())
    timed("encoder", pipeline.pretrain_encoder, config, run, splits)
    for cond in CONDITIONS:
        c = config.replace(sat_enabled=cond.startswith("sat-on"), projection_enabled=cond.endswith("proj-on"))
        timed(f"stage1_{cond}", pipeline.train_stage1, c, run, splits)
        if c.projection_enabled:
            for b in pipeline.DEFAULT_BUDGETS:
                timed(f"stage2_{cond}_b{b}", pipeline.train_stage2, c.replace(low_resource_budget=b), run, splits)
    for b in pipeline.DEFAULT_BUDGETS:
        timed(f"scratch_b{b}", pipeline.train_stage2, config.replace(low_resource_budget=b), run, splits,
              from_scratch=True)
    reports = timed("ablation", pipeline.ablation, config, run, splits)
    times["total"] = time.perf_counter() - t_start
    return {"config": config, "run": run, "splits": splits, "reports": reports, "times": times}


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The pinned-seed default pipeline with every ablation condition (about 2 minutes)."""
    return _timed_default_run(tmp_path_factory.mktemp("default_run"))


@pytest.fixture(scope="session")
def second_default_run(tmp_path_factory, default_run):
    return _timed_default_run(tmp_path_factory.mktemp("default_run_again"))
