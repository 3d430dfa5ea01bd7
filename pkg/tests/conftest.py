import numpy as np
import pytest

from tgprompt import EventLog, ModelConfig, SyntheticSpec, build_index, generate_synthetic


def random_log(rng, n_events=200, num_nodes=30, d_E=3, t_max=100.0, integer_times=False,
               labels=False):
    src = rng.integers(0, num_nodes, n_events)
    dst = rng.integers(0, num_nodes, n_events)
    ts = rng.uniform(0, t_max, n_events)
    if integer_times:
        ts = np.floor(ts)
    lab = rng.integers(0, 2, n_events) if labels else None
    return EventLog(src, dst, ts, rng.standard_normal((n_events, d_E)),
                    rng.standard_normal((num_nodes, 2)), lab, num_nodes=num_nodes)


TINY_MODEL = ModelConfig(d=8, d_T=8, d_h=8, max_neighbors=5, time_scale=10.0,
                         channel_expansion=2.0)


@pytest.fixture(scope="session")
def small_synth():
    log = generate_synthetic(SyntheticSpec(num_events=400, num_users=12, num_items=20,
                                           num_classes=4, seed=3))
    return log, build_index(log)


@pytest.fixture(scope="session")
def ft_world():
    from tgprompt import PretrainConfig, make_splits, pretrain_run
    log = generate_synthetic(SyntheticSpec(num_events=1000, num_users=20, num_items=30,
                                           num_classes=4, seed=11))
    idx = build_index(log)
    plan = make_splits(log, 70, "link")
    ck = pretrain_run(log, plan.pretrain, TINY_MODEL,
                      PretrainConfig(epochs=2, batch_size=200, learning_rate=1e-3), idx)
    return log, idx, plan, ck


CONFIGS = __import__("pathlib").Path(__file__).resolve().parent.parent / "configs"
CLASSIFIER_ONLY = dict(disable_temporal=True, disable_edge=True, disable_feature=True)


def run_fixture(name: str, variants: dict) -> dict:
    """Pretrain one encoder per seed on a committed fixture, then fine-tune each variant."""
    import dataclasses
    import time

    from tgprompt import finetune_run, pretrain_run
    from tgprompt.config import load_config

    cfg = load_config(CONFIGS / name)
    t0 = time.perf_counter()
    log = generate_synthetic(cfg.synthetic)
    idx = build_index(log)
    from tgprompt import make_splits
    plan = make_splits(log, cfg.finetune.k, cfg.finetune.task)
    out = {k: [] for k in variants}
    for seed in cfg.seeds:
        ck = pretrain_run(log, plan.pretrain, cfg.model,
                          dataclasses.replace(cfg.pretrain, seed=seed), idx)
        for k, flags in variants.items():
            fcfg = dataclasses.replace(cfg.finetune, **flags)
            out[k].append(finetune_run(ck, log, plan, fcfg, seed, idx).metrics)
    return {"metrics": out, "seconds": time.perf_counter() - t0, "seeds": cfg.seeds}


@pytest.fixture(scope="session")
def noshift_bringup():
    return run_fixture("synth.toml", {"classifier": CLASSIFIER_ONLY})


@pytest.fixture(scope="session")
def shift_bringup():
    return run_fixture("synth_shift.toml", {
        "full": {}, "classifier": CLASSIFIER_ONLY,
        "w/o t.b.": dict(disable_temporal=True), "w/o e.w.": dict(disable_edge=True),
        "w/o f.m.": dict(disable_feature=True)})


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
