import numpy as np
import pytest

from dpo3d import config, storage
from dpo3d import detector as det
from dpo3d.config import ConfigError
from dpo3d.scene_gen import SHIFT_PRESETS, GenConfig, apply_shift, generate_dataset

CFG = GenConfig(height=16, width=20, max_objects=3)

MINIMAL = """
[run]
name = t
seed = 4
"""


def test_scene_container_round_trip(tmp_path):
    src = generate_dataset(3, 0, CFG)
    scenes = [apply_shift(s, SHIFT_PRESETS["composite-heavy"], k, CFG) for k, s in enumerate(src)]
    path = tmp_path / "s.dpo1"
    storage.write_scenes(path, scenes, {"role": "test"})
    back, meta = storage.read_scenes(path)
    assert meta["role"] == "test"
    for a, b in zip(scenes, back):
        assert a.bev.values.tobytes() == b.bev.values.tobytes()
        assert a.gt_boxes == b.gt_boxes
        assert a.shift_applied == b.shift_applied and a.seed == b.seed
    # writing what was read gives the same bytes
    storage.write_scenes(tmp_path / "t.dpo1", back, {"role": "test"})
    assert path.read_bytes() == (tmp_path / "t.dpo1").read_bytes()


def test_scene_container_rejects_damage(tmp_path):
    path = tmp_path / "s.dpo1"
    storage.write_scenes(path, generate_dataset(2, 1, CFG))
    data = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(storage.FormatError):
        storage.read_scenes(tmp_path / "bad")
    (tmp_path / "short").write_bytes(data[:-10])
    with pytest.raises(storage.FormatError):
        storage.read_scenes(tmp_path / "short")
    (tmp_path / "long").write_bytes(data + b"\0")
    with pytest.raises(storage.FormatError):
        storage.read_scenes(tmp_path / "long")
    with pytest.raises(ValueError):
        storage.write_scenes(tmp_path / "none", [])


def test_params_round_trip(tmp_path):
    p = det.init_params(8, 16, seed=5)
    storage.write_params(tmp_path / "w.dpow", p)
    q = storage.read_params(tmp_path / "w.dpow")
    assert q.vector.tobytes() == p.vector.tobytes()
    assert (q.channels, q.hidden) == (8, 16)
    data = (tmp_path / "w.dpow").read_bytes()
    (tmp_path / "cut").write_bytes(data[:-8])
    with pytest.raises(storage.FormatError):
        storage.read_params(tmp_path / "cut")


def test_minimal_config_uses_defaults():
    cfg = config.parse(MINIMAL)
    assert cfg.seed == 4 and cfg.train.seed == 4
    assert cfg.adapt.rho == 1e-4 and cfg.adapt.alpha == 0.08
    assert cfg.adapt.gamma == 0.5 and cfg.adapt.eta == 1e-3 and cfg.batch_size == 8


@pytest.mark.parametrize("text,msg", [
    ("[run]\nname = t\n", "missing required key [run] seed"),
    (MINIMAL + "[bogus]\nx = 1\n", "unknown section"),
    (MINIMAL + "[adapt]\nrhoo = 1\n", "unknown key [adapt] rhoo"),
    (MINIMAL + "[adapt]\nrho = abc\n", "[adapt] rho"),
    (MINIMAL + "[adapt]\nrho = -1\n", "rho must be > 0"),
    (MINIMAL + "[shift]\npreset = nope\n", "unknown shift preset"),
    (MINIMAL + "[generator]\nlength_range = 3\n", "length_range"),
    (MINIMAL + "[stream]\nn_batches = 0\n", "n_batches"),
    ("not an ini", "section"),
])
def test_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg.replace("[", r"\[").replace("]", r"\]")):
        config.parse(text)


def test_shift_overrides_and_presets():
    cfg = config.parse(MINIMAL + "[shift]\npreset = scale\nnoise_sigma = 0.2\n")
    assert cfg.shift.scale_factor == 1.3 and cfg.shift.noise_sigma == 0.2
    assert cfg.shift_name == "scale*"
    assert {"composite-heavy", "smoke"} <= set(config.preset_names())
    heavy = config.load_preset("composite-heavy")
    assert heavy.shift == SHIFT_PRESETS["composite-heavy"] and heavy.seeds == (0, 1, 2)
    with pytest.raises(ConfigError):
        config.load_preset("missing")


def test_load_from_file_and_missing_file(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text(MINIMAL)
    assert config.load(p).name == "t"
    with pytest.raises(OSError):
        config.load(tmp_path / "absent.ini")


def test_overrides():
    cfg = config.parse(MINIMAL)
    assert config.with_seed(cfg, 9).train.seed == 9
    assert config.with_adapt(cfg, c_stop=0.5).adapt.c_stop == 0.5
    with pytest.raises(ConfigError):
        config.with_adapt(cfg, gamma=2.0)
