import pytest
from hypothesis import given
from hypothesis import strategies as st

from sapool.config import RunConfig
from sapool.errors import ConfigError


def test_defaults_roundtrip():
    cfg = RunConfig()
    assert RunConfig.from_text(cfg.to_text()) == cfg


@given(
    st.sampled_from(["sap", "lip", "strided", "avg", "max"]),
    st.sampled_from([1, 2, 4]),
    st.lists(st.sampled_from([1, 2, 4, 8]), min_size=1, max_size=4),
    st.booleans(),
    st.integers(0, 10**6),
    st.floats(0.001, 1.0),
)
def test_roundtrip_property(pool, s1, patches, sigmoid, seed, lr):
    text = (
        f"[model]\npool = {pool}\ns1 = {s1}\n"
        f"[sap]\npatch_sizes = {', '.join(map(str, patches))}\nsigmoid = {str(sigmoid).lower()}\n"
        f"[optim]\nlr = {lr!r}\n[run]\nseed = {seed}\n"
    )
    cfg = RunConfig.from_text(text)
    assert cfg.model.pool == pool and cfg.sap.patch_sizes == tuple(patches) and cfg.optim.lr == lr
    assert RunConfig.from_text(cfg.to_text()) == cfg


@pytest.mark.parametrize(
    "text,needle",
    [
        ("[model]\ns1 = 3\n", "model.s1"),
        ("[model]\npool = median\n", "model.pool"),
        ("[sap]\npatch_sizes = 3\n", "sap.patch_sizes"),
        ("[model]\nflavour = x\n", "unknown key model.flavour"),
        ("[extras]\na = 1\n", "unknown section"),
        ("[optim]\nlr = fast\n", "optim.lr"),
        ("[optim]\nmomentum = 1.0\n", "optim.momentum"),
        ("[run]\nprecision = f16\n", "run.precision"),
        ("[prune]\nratio = 0.5\n", "prune.ratio"),
        ("[data]\nsynth_layout = spiral\n", "data.synth_layout"),
        ("[sap]\nsigmoid = maybe\n", "sap.sigmoid"),
        ("not ini at all", "unparseable"),
    ],
)
def test_rejections_name_the_constraint(text, needle):
    with pytest.raises(ConfigError, match=needle):
        RunConfig.from_text(text)


def test_sap_configs_per_site():
    cfg = RunConfig.from_text("[sap]\npatch_sizes = 4, 2\nchannel_ratios = 0.5, 1\nbn2 = false\n")
    sites = cfg.sap_configs(4)
    assert [c.patch_size for c in sites] == [4, 2, 2, 2]
    assert [c.channel_ratio for c in sites] == [0.5, 1.0, 1.0, 1.0]
    assert not any(c.bn2 for c in sites)


def test_override_and_placement(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[model]\nbackbone = tiny_mobilenet\n")
    cfg = RunConfig.load(p)
    assert cfg.placement == "inner" and cfg.base_dir == str(tmp_path.resolve())
    assert cfg.override(seed=5, precision="f64").run.seed == 5
    with pytest.raises(ConfigError):
        cfg.override(precision="f8")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.ini")
