import csv
import json
import struct

import numpy as np
import pytest
import torch

from qualdiff import degrade
from qualdiff.denoiser import DenoiserConfig
from qualdiff.errors import FormatError, InvalidInputError, TrainingError
from qualdiff.partition import PartitionParams
from qualdiff.prompts import ComplexityParams
from qualdiff.trainer import (
    CKPT_VERSION,
    Conditioner,
    ImageSet,
    TrainConfig,
    Trainer,
    init_state,
    load_checkpoint,
    make_optimizer,
    restore,
    save_checkpoint,
)

CATS = sorted(degrade.CATEGORIES)


def small_config(**kw):
    base = dict(image_size=16, batch_size=2, steps=4, denoiser=DenoiserConfig(width=8), partition=PartitionParams(min_side=4))
    base.update(kw)
    return TrainConfig(**base)


def toy_data(n=6, size=16, offset=0):
    return ImageSet.from_samples([degrade.make_sample(500 + offset + i, size, CATS[i % 11], f"s{offset + i}") for i in range(n)])


@pytest.fixture(scope="module")
def data():
    return toy_data()


# --- config -----------------------------------------------------------------------


def test_config_json_round_trip(tmp_path):
    cfg = small_config(tau=2.5, fixed_complexity=10, complexity=ComplexityParams(c_min=2, c_max=20))
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.load(path) == cfg


@pytest.mark.parametrize(
    "kwargs",
    [dict(tau=1.0), dict(tau=5.0), dict(batch_size=0), dict(steps=0), dict(lr=0.0), dict(image_size=18)],
)
def test_config_invariants(kwargs):
    with pytest.raises(InvalidInputError):
        small_config(**kwargs)


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(InvalidInputError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(InvalidInputError, match="depth"):
        TrainConfig.from_dict({"denoiser": {"depth": 3}})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(InvalidInputError):
        TrainConfig.load(bad)


# --- batching, determinism, caching ----------------------------------------------------


def test_each_epoch_visits_every_sample_once(data):
    tr = Trainer(small_config(batch_size=3), data)
    per_epoch = len(data) // 3
    for epoch in range(3):
        seen = sum((tr.batch_indices(s) for s in range(epoch * per_epoch, (epoch + 1) * per_epoch)), [])
        assert sorted(seen) == list(range(len(data)))
    assert tr.batch_indices(0) != tr.batch_indices(per_epoch) or tr.batch_indices(1) != tr.batch_indices(per_epoch + 1)


def test_same_seed_same_trace_and_weights(data):
    a, b = Trainer(small_config(), data), Trainer(small_config(), data)
    ra, rb = a.run(4), b.run(4)
    assert ra == rb
    for pa, pb in zip(a.state.parameters(), b.state.parameters()):
        assert torch.equal(pa, pb)
    c = Trainer(small_config(seed=1), data)
    assert c.run(4) != ra


def test_cache_misses_stop_after_first_epoch(data):
    tr = Trainer(small_config(batch_size=3), data)
    tr.run(2)
    cache = tr.conditioner.cache
    assert cache.miss_count == len(data)
    tr.run(4)
    assert cache.miss_count == len(data) and cache.hit_count >= 12


class RecordingScorer:
    def __init__(self):
        from qualdiff.qualmap import NoReferenceScorer

        self.inner = NoReferenceScorer()
        self.scorer_id, self.mode = self.inner.scorer_id, self.inner.mode
        self.seen = []

    def score_batch(self, images):
        self.seen.extend(np.array(im, copy=True) for im in images)
        return self.inner.score_batch(images)


def test_quality_maps_come_from_degraded_inputs_only(data):
    scorer = RecordingScorer()
    cfg = small_config()
    tr = Trainer(cfg, data, conditioner=Conditioner(cfg, scorer=scorer))
    tr.run(9)
    assert len(scorer.seen) == len(data)
    for img in scorer.seen:
        assert any(np.array_equal(img, d) for d in data.degraded_np)


def test_non_finite_loss_aborts_with_diagnostics(data):
    tr = Trainer(small_config(), data)

    def broken(x_t, t, y, cond):
        return x_t * float("nan")

    tr.state.model.forward = broken
    with pytest.raises(TrainingError, match=r"step 1: .*noise.*samples"):
        tr.train_step()


def test_training_log_and_periodic_checkpoints(tmp_path, data):
    tr = Trainer(small_config(checkpoint_interval=2), data)
    tr.run(4, tmp_path / "log.csv", tmp_path / "ck")
    with open(tmp_path / "log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "noise", "quality", "perceptual", "total"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4]
    for r in rows[1:]:
        n, q, p, t = (np.float32(v) for v in r[1:])
        assert t == n + np.float32(0.5) * q + np.float32(0.1) * p
    assert sorted(f.name for f in (tmp_path / "ck").iterdir()) == ["step000002.aqck", "step000004.aqck"]


# --- checkpoints -----------------------------------------------------------------------


def test_resume_matches_uninterrupted_run(tmp_path, data):
    cfg = small_config()
    ref = Trainer(cfg, data)
    ref.run(3)
    resumed_from = Trainer(cfg, data)
    resumed_from.run(2)
    save_checkpoint(resumed_from.state, tmp_path / "c.aqck")
    state = load_checkpoint(tmp_path / "c.aqck")
    assert state.step == 2 and state.config == cfg
    resumed = Trainer(cfg, data, state)
    resumed.train_step()
    for pa, pb in zip(ref.state.parameters(), resumed.state.parameters()):
        assert torch.equal(pa, pb)


def test_resume_reproduces_the_next_loss(tmp_path, data):
    cfg = small_config()
    ref = Trainer(cfg, data)
    trace = ref.run(3)
    first = Trainer(cfg, data)
    first.run(2)
    save_checkpoint(first.state, tmp_path / "c.aqck")
    resumed = Trainer(cfg, data, load_checkpoint(tmp_path / "c.aqck"))
    assert resumed.run(1)[0] == trace[2]


def test_checkpoint_is_byte_deterministic(tmp_path, data):
    for name in ("a", "b"):
        tr = Trainer(small_config(), data)
        tr.run(2)
        save_checkpoint(tr.state, tmp_path / f"{name}.aqck")
    assert (tmp_path / "a.aqck").read_bytes() == (tmp_path / "b.aqck").read_bytes()


@pytest.fixture
def saved(tmp_path, data):
    tr = Trainer(small_config(), data)
    tr.run(1)
    path = tmp_path / "c.aqck"
    save_checkpoint(tr.state, path)
    return path


@pytest.mark.parametrize("keep", [0, 7, 40, -1])
def test_truncated_checkpoint_is_a_format_error(saved, keep):
    blob = saved.read_bytes()
    saved.write_bytes(blob[:keep] if keep >= 0 else blob[: len(blob) - 5])
    with pytest.raises(FormatError) as err:
        load_checkpoint(saved)
    assert err.value.field


def test_version_bump_is_rejected(saved):
    blob = bytearray(saved.read_bytes())
    struct.pack_into("<I", blob, 4, CKPT_VERSION + 1)
    saved.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="version") as err:
        load_checkpoint(saved)
    assert err.value.field == "version"


def test_bad_magic_and_trailing_bytes(saved):
    blob = saved.read_bytes()
    saved.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError) as err:
        load_checkpoint(saved)
    assert err.value.field == "magic"
    saved.write_bytes(blob + b"\0")
    with pytest.raises(FormatError):
        load_checkpoint(saved)


# --- optimizer ------------------------------------------------------------------------


def test_optimizer_solves_quadratic_toy():
    target = torch.tensor([0.7, -1.3, 2.0, 0.1], dtype=torch.float64)
    curvature = torch.tensor([1.0, 3.0, 0.5, 10.0], dtype=torch.float64)
    x = torch.zeros(4, dtype=torch.float64, requires_grad=True)
    opt = make_optimizer([x], small_config(lr=1e-2))
    for _ in range(2000):
        opt.zero_grad()
        (curvature * (x - target) ** 2).sum().backward()
        opt.step()
    assert (x - target).abs().max() < 1e-6


def test_pool_and_denoiser_share_one_optimizer(data):
    state = init_state(small_config())
    owned = {id(p) for g in state.optimizer.param_groups for p in g["params"]}
    assert {id(p) for p in state.pool.parameters()} <= owned
    assert {id(p) for p in state.model.parameters()} <= owned


@pytest.mark.slow
def test_two_hundred_steps_reduce_the_loss():
    cfg = TrainConfig(image_size=32, batch_size=4, lr=1e-3, denoiser=DenoiserConfig(width=16))
    rows = Trainer(cfg, toy_data(64, 32, offset=100)).run(200)
    total = np.array([r["total"] for r in rows])
    smoothed = np.convolve(total, np.ones(20) / 20, mode="valid")
    assert smoothed[-1] < total[0]
    assert smoothed[-1] < smoothed[0]


# --- restore --------------------------------------------------------------------------


def test_restore_is_deterministic_and_reports_budget(data):
    cfg = small_config()
    tr = Trainer(cfg, data)
    tr.run(2)
    a, reps = restore(data, tr.state, seed=5)
    b, _ = restore(data, tr.state, seed=5)
    assert torch.equal(a, b) and a.shape == data.degraded.shape
    c = cfg.complexity
    for r in reps:
        assert r.denoiser_calls == 2
        assert r.region_count * c.c_min <= r.prompt_budget <= r.region_count * c.c_max
        assert c.q_min <= r.min_q <= r.mean_q <= r.max_q <= c.q_max
    other, _ = restore(data, tr.state, seed=6)
    assert not torch.equal(a, other)
