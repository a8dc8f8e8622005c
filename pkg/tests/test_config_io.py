from collections import OrderedDict

import numpy as np
import pytest

from thubert import config, io
from thubert.experiment import RunConfig


def test_flat_round_trip_of_nested_config():
    cfg = RunConfig()
    flat = {k: str(v) for k, v in config.flatten(cfg).items()}
    assert config.apply_flat(RunConfig(), flat) == cfg
    assert "gan.eta_pd" in flat and "pretrain.mask.p" in flat


def test_apply_overrides_typed_values():
    cfg = config.apply_flat(RunConfig(), {"seed": "4", "gan.betas": "0.1,0.2", "finetune.freeze_frontend": "false",
                                          "pretrain.mask.p": "0.5"})
    assert cfg.seed == 4 and cfg.gan.betas == (0.1, 0.2)
    assert cfg.finetune.freeze_frontend is False and cfg.pretrain.mask.p == 0.5


def test_unknown_key_rejected():
    with pytest.raises(config.ConfigError, match="gan.nope"):
        config.apply_flat(RunConfig(), {"gan.nope": "1"})


def test_bad_value_rejected():
    with pytest.raises(config.ConfigError):
        config.apply_flat(RunConfig(), {"seed": "many"})


def test_parse_text_comments_and_errors():
    assert config.parse_text("a=1  # note\n\n# skip\nb = x\n") == {"a": "1", "b": "x"}
    with pytest.raises(config.ConfigError, match=":2:"):
        config.parse_text("a=1\nnot a pair\n")
    with pytest.raises(config.ConfigError, match="duplicate"):
        config.parse_text("a=1\na=2\n")


def test_load_from_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(config.dump_text({"n_utts": 50, "encoder.layers": 3}))
    cfg = config.load(RunConfig, p)
    assert cfg.n_utts == 50 and cfg.encoder.layers == 3


def test_params_round_trip_bit_exact(tmp_path):
    params = OrderedDict(a=np.random.default_rng(0).standard_normal((3, 4)), b=np.array(2.5),
                         c=np.zeros((0, 2)))
    io.save_params(tmp_path / "p.bin", params)
    back = io.load_params(tmp_path / "p.bin")
    assert list(back) == list(params)
    for k in params:
        assert back[k].shape == params[k].shape and back[k].tobytes() == params[k].tobytes()


def test_fmat_layout(tmp_path):
    x = np.arange(6.0).reshape(2, 3)
    io.save_fmat(tmp_path / "f", x)
    raw = (tmp_path / "f").read_bytes()
    assert raw[:4] == b"FMAT" and len(raw) == 4 + 12 + 48
    np.testing.assert_array_equal(io.load_fmat(tmp_path / "f"), x)


def test_bad_magic_and_truncation(tmp_path):
    io.save_codebook(tmp_path / "c", np.ones((2, 2)))
    with pytest.raises(io.FormatError, match="magic"):
        io.load_fmat(tmp_path / "c")
    (tmp_path / "t").write_bytes((tmp_path / "c").read_bytes()[:-3])
    with pytest.raises(io.FormatError, match="truncated"):
        io.load_codebook_array(tmp_path / "t")


def test_codes_and_index_corpus(tmp_path):
    codes = OrderedDict(u1=[1, 2, 3], u2=[])
    io.write_codes(tmp_path / "codes.tsv", codes)
    back = io.read_codes(tmp_path / "codes.tsv")
    assert list(back) == ["u1", "u2"] and back["u1"].tolist() == [1, 2, 3] and len(back["u2"]) == 0
    io.write_index_corpus(tmp_path / "text.txt", [[0, 4, 0], [0, 1]])
    assert [s.tolist() for s in io.read_index_corpus(tmp_path / "text.txt")] == [[0, 4, 0], [0, 1]]


def test_tsv_column_check(tmp_path):
    (tmp_path / "m.tsv").write_text("a\tb\nc\n")
    with pytest.raises(io.FormatError, match=":2:"):
        io.read_tsv(tmp_path / "m.tsv", 2)


def test_atomic_write_leaves_no_temp(tmp_path):
    io.atomic_write_text(tmp_path / "x.txt", "hello")
    assert [p.name for p in tmp_path.iterdir()] == ["x.txt"]
