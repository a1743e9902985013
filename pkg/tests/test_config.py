import pytest

from mtgan import config
from mtgan.config import ConfigError, RunConfig


def test_round_trip_through_text():
    cfg = RunConfig(seed=7, use_semantic_input=False, smoothness_guide="rgb", lr=1e-4)
    assert config.loads(cfg.dumps()) == cfg
    assert "use_semantic_input=false\n" in cfg.dumps()


def test_comments_blank_lines_and_coercion():
    cfg = config.loads("# run\n\nseed = 3   # trailing\nuse_rec=No\nlr=5e-5\n")
    assert (cfg.seed, cfg.use_rec, cfg.lr) == (3, False, 5e-5)


@pytest.mark.parametrize("text, match", [
    ("bogus=1", "unknown config key"),
    ("seed=abc", "seed"),
    ("use_rec=maybe", "true/false"),
    ("just a line", "expected key=value"),
    ("smoothness_guide=depth", "smoothness_guide"),
    ("gan_variant=wgan", "gan_variant"),
    ("mssp_kernels=1,x", "mssp_kernels"),
    ("depth=-1", "non-negative"),
    ("batch_size=0", "batch_size"),
])
def test_rejects_bad_input(text, match):
    with pytest.raises(ConfigError, match=match):
        config.loads(text)


def test_error_reports_line_number():
    with pytest.raises(ConfigError, match=r"cfg\.txt:2"):
        config.loads("seed=1\noops\n", "cfg.txt")


def test_overrides_and_derived_objects():
    cfg = RunConfig().with_overrides({"depth": "0", "use_mssp": "false", "mssp_kernels": "2,3"})
    assert cfg.loss_weights().depth == 0.0
    assert cfg.semantic_options().use_mssp is False
    assert cfg.kernels() == ((2, 2), (3, 3))
    opt = cfg.optimizer()
    assert (opt.base_lr, opt.beta1, opt.batch_size) == (2e-4, 0.5, 4)
    d = RunConfig(use_semantic_input=False, smoothness_guide="rgb").depth_options()
    assert (d.use_semantic_input, d.smoothness_guide) == (False, "rgb")


def test_load_resolves_paths_relative_to_file(tmp_path):
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "run.cfg").write_text("data=../train\neval_data=\n")
    cfg = config.load(tmp_path / "sub" / "run.cfg")
    assert cfg.data == str((tmp_path / "train").resolve())
    assert cfg.eval_data == ""
