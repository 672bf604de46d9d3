"""Container round trips, metrics CSV schema, config parsing strictness."""

import numpy as np
import pytest

from synres import numcore as nc
from synres.datagen import TaskSpec, VocabLayout, gen_kv_recall
from synres.model import GateMode, ModelConfig, forward, init_params
from synres.persist import (
    CheckpointError,
    ConfigError,
    MetricsRow,
    MetricsSink,
    RunSpec,
    config_text,
    load_checkpoint,
    load_config,
    load_dataset,
    save_checkpoint,
    save_config,
    save_dataset,
)
from synres.train import TrainConfig

CFG = ModelConfig(vocab_size=16, d_model=8, n_heads=2, n_layers=2, d_ff=16, max_seq_len=8)
TCFG = TrainConfig(epochs=2, batch_size=4, lr=0.01, ppl_threshold=24.0, seed=3)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


@pytest.mark.parametrize("seed", [1, 2, 3])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_round_trip_bitwise(tmp_path, seed, dtype):
    params = init_params(CFG, nc.Rng(seed), dtype=dtype)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, TCFG, seed=3, epoch=1)
    ckpt = load_checkpoint(path)
    assert ckpt.seed == 3 and ckpt.epoch == 1
    assert ckpt.model_config == CFG
    assert ckpt.train_config == TCFG
    for (na, ta), (nb, tb) in zip(params.named_tensors(), ckpt.params.named_tensors()):
        assert na == nb and ta.dtype == tb.dtype
        np.testing.assert_array_equal(ta.data, tb.data)


def test_checkpoint_save_load_save_byte_identical(tmp_path):
    params = init_params(CFG, nc.Rng(2))
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, params, TCFG, seed=3, epoch=0)
    ckpt = load_checkpoint(p1)
    save_checkpoint(p2, ckpt.params, ckpt.train_config, ckpt.seed, ckpt.epoch)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_forward_bitwise_after_reload(tmp_path):
    params = init_params(CFG, nc.Rng(4))
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, TCFG, seed=0, epoch=0)
    reloaded = load_checkpoint(path).params
    tokens = [1, 2, 3, 4]
    a, _ = forward(params, tokens)
    b, _ = forward(reloaded, tokens)
    np.testing.assert_array_equal(a.data, b.data)


def test_checkpoint_float64_width_preserved(tmp_path):
    params = init_params(CFG, nc.Rng(5), dtype=np.float64)
    path = tmp_path / "model64.ckpt"
    save_checkpoint(path, params, TCFG, seed=0, epoch=0)
    reloaded = load_checkpoint(path).params
    assert reloaded.dtype == np.float64


def test_checkpoint_truncation_names_entry(tmp_path):
    params = init_params(CFG, nc.Rng(6))
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, TCFG, seed=0, epoch=0)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 100])
    with pytest.raises(CheckpointError, match="unembed"):
        load_checkpoint(path)


def test_checkpoint_garbage_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


# --------------------------------------------------------------------------
# dataset artifacts
# --------------------------------------------------------------------------


def test_dataset_round_trip(tmp_path):
    spec = TaskSpec.kv_recall(distances=(4, 6), samples=30, seed=7)
    layout = VocabLayout.synthetic(32, n_keys=spec.pairs)
    batch = gen_kv_recall(spec, layout, nc.Rng(7))
    path = tmp_path / "kv.ds"
    save_dataset(path, batch, spec, layout)
    loaded, spec2, layout2 = load_dataset(path)
    assert spec2 == spec and layout2 == layout
    np.testing.assert_array_equal(loaded.tokens, batch.tokens)
    np.testing.assert_array_equal(loaded.targets, batch.targets)
    np.testing.assert_array_equal(loaded.loss_mask, batch.loss_mask)
    np.testing.assert_array_equal(loaded.meta, batch.meta)
    np.testing.assert_array_equal(loaded.protected, batch.protected)
    assert (tmp_path / "kv.ds.json").exists()


def test_dataset_kind_mismatch(tmp_path):
    params = init_params(CFG, nc.Rng(8))
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, TCFG, seed=0, epoch=0)
    with pytest.raises(CheckpointError, match="kind"):
        load_dataset(path)


# --------------------------------------------------------------------------
# metrics sink
# --------------------------------------------------------------------------


def test_metrics_sink_schema_and_append(tmp_path):
    path = tmp_path / "metrics.csv"
    row = MetricsRow(run_id="abc", epoch=0, phase="train", metric="loss",
                     value=1.5, gate_mode="learned", seed=7, wall_ms=12.5)
    with MetricsSink(path) as sink:
        sink.write(row)
    with MetricsSink(path) as sink:  # reopening appends, no second header
        sink.write(row)
    lines = path.read_text().splitlines()
    assert lines[0] == "run_id,epoch,phase,metric,value,gate_mode,seed,wall_ms"
    assert lines[1] == lines[2] == "abc,0,train,loss,1.5,learned,7,12.5"


# --------------------------------------------------------------------------
# config files
# --------------------------------------------------------------------------

GOOD_CONFIG = """\
[model]
vocab_size = 16
d_model = 8
n_heads = 2
n_layers = 2
d_ff = 16
max_seq_len = 8
sigma_init = 0.02
gate_mode = learned

[train]
epochs = 2
batch_size = 4
lr = 0.01
lr_decay = 0.5
ppl_threshold = none
reg_weight = 0.0001
grad_clip = none
seed = 3
min_lr = 1e-06

[task]
kind = copy
seq_len = 8
pairs = 0
distances = none
samples = 40
seed = 1
val_fraction = 0.1
corpus_path = none
"""


def test_config_round_trip(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(GOOD_CONFIG)
    spec = load_config(path)
    assert spec.model == CFG
    assert spec.train.ppl_threshold is None
    assert spec.task.kind == "copy" and spec.task.distances == ()
    out = tmp_path / "frozen.cfg"
    save_config(out, spec)
    assert load_config(out) == spec


def test_config_unknown_key_is_hard_error(tmp_path):
    path = tmp_path / "typo.cfg"
    path.write_text(GOOD_CONFIG.replace("lr = 0.01", "lr = 0.01\nlearningrate = 0.5"))
    with pytest.raises(ConfigError, match="learningrate"):
        load_config(path)


def test_config_unknown_section_is_hard_error(tmp_path):
    path = tmp_path / "extra.cfg"
    path.write_text(GOOD_CONFIG + "\n[optimizer]\nmomentum = 0.9\n")
    with pytest.raises(ConfigError, match="optimizer"):
        load_config(path)


def test_config_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="nope.cfg"):
        load_config(tmp_path / "nope.cfg")


def test_config_bad_value(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text(GOOD_CONFIG.replace("epochs = 2", "epochs = two"))
    with pytest.raises(ConfigError, match="epochs"):
        load_config(path)


def test_config_text_is_canonical():
    spec = RunSpec(model=CFG, train=TCFG, task=None)
    assert config_text(spec) == config_text(spec)
    assert "[model]" in config_text(spec) and "[task]" not in config_text(spec)
