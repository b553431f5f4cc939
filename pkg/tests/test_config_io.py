import json

import numpy as np
import pytest
import torch

from bodyforge.config import RunConfig, micro_config
from bodyforge.errors import ConfigError, MissingPrerequisite
from bodyforge.fileio import (file_checksum, load_arrays, load_state_dict_from,
                              module_checksum, read_raw, sample_seed, save_arrays,
                              save_checkpoint, write_raw)


def test_config_defaults_carry_published_weights():
    cfg = RunConfig()
    assert (cfg.w_sdf, cfg.w_sv, cfg.w_normal, cfg.w_depth, cfg.w_adv_sv) == (20, 40, 20, 20, 1)
    assert (cfg.w_rgb, cfg.w_tv, cfg.w_adv_tv) == (20, 40, 1)
    assert (cfg.w_refine_l1, cfg.w_refine_perc) == (1, 1)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict({"nonsense": 1})


def test_config_validates_values():
    with pytest.raises(ConfigError):
        RunConfig(c_s=3)
    with pytest.raises(ConfigError):
        RunConfig(corpus_resolution=100)
    with pytest.raises(ConfigError):
        RunConfig(points_per_sample=13)
    with pytest.raises(ConfigError):
        RunConfig(w_sdf=-1.0)
    with pytest.raises(ConfigError):
        RunConfig(unpaired_fraction=1.5)


def test_config_hash_stable_and_sensitive(tmp_path):
    a = micro_config()
    b = micro_config()
    assert a.config_hash == b.config_hash
    assert a.replace(seed=1).config_hash != a.config_hash
    p = tmp_path / "c.json"
    a.save(p)
    assert RunConfig.load(p).config_hash == a.config_hash


def test_config_load_bad_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(p)
    p.write_text("[1,2]")
    with pytest.raises(ConfigError):
        RunConfig.load(p)


def test_raw_array_roundtrip(tmp_path, rng):
    arr = rng.normal(size=(5, 4, 3)).astype(np.float32)
    write_raw(tmp_path / "x.f32", arr)
    back = read_raw(tmp_path / "x.f32", (5, 4, 3))
    assert np.array_equal(arr, back)
    assert (tmp_path / "x.f32").stat().st_size == arr.size * 4


def test_save_arrays_deterministic_bytes(tmp_path, rng):
    arrays = {"w": rng.normal(size=(3, 3)).astype(np.float32),
              "b": np.arange(7, dtype=np.int64)}
    save_arrays(tmp_path / "a.w", arrays)
    save_arrays(tmp_path / "b.w", arrays)
    assert file_checksum(tmp_path / "a.w") == file_checksum(tmp_path / "b.w")
    back = load_arrays(tmp_path / "a.w")
    assert np.array_equal(back["w"], arrays["w"])
    assert np.array_equal(back["b"], arrays["b"])


def test_checkpoint_roundtrip_and_checksum(tmp_path):
    torch.manual_seed(0)
    net = torch.nn.Linear(4, 2)
    save_checkpoint(tmp_path / "n.w", net, {"step": 3})
    meta = json.loads((tmp_path / "n.w.json").read_text())
    assert meta["step"] == 3
    assert meta["checksum"] == module_checksum(net)
    torch.manual_seed(1)
    other = torch.nn.Linear(4, 2)
    assert module_checksum(other) != meta["checksum"]
    load_state_dict_from(tmp_path / "n.w", other)
    assert module_checksum(other) == meta["checksum"]


def test_sample_seed_distinct_and_stable():
    seeds = {sample_seed(0, i, "x") for i in range(1000)}
    assert len(seeds) == 1000
    assert sample_seed(3, 14, "tag") == sample_seed(3, 14, "tag")
    assert sample_seed(3, 14, "tag") != sample_seed(3, 14, "other")


def test_rundir_requires_config(tmp_path):
    from bodyforge.rundir import RunDir

    with pytest.raises(MissingPrerequisite):
        RunDir(tmp_path / "nope")


def test_rundir_stage_prerequisites(tmp_path, micro_cfg):
    from bodyforge.rundir import RunDir

    run = RunDir(tmp_path / "r", micro_cfg)
    with pytest.raises(MissingPrerequisite):
        run.run_train_prior()
    with pytest.raises(MissingPrerequisite):
        run.run_train_shape()
    with pytest.raises(MissingPrerequisite):
        run.run_evaluate()
