import pytest

from rainsr.config import (TrainConfig, default_config, load_config,
                           parse_config)
from rainsr.errors import ConfigError


def _parse(text, monkeypatch=None):
    return parse_config(text)


class TestParsing:
    def test_empty_desk_profile_gets_full_defaults(self, tmp_path):
        cfg = parse_config("profile = desk\n[data]\nroot = /tmp/x\n")
        assert cfg.profile == "desk"
        assert cfg.scale == 4
        assert cfg.translator.iters == 300
        assert cfg.translator.lambda_cyc == 10.0
        assert cfg.translator.lambda_id == 5.0
        assert cfg.translator.buffer_capacity == 50
        assert cfg.dsn.iters == 200
        assert cfg.srn.iters == 300
        assert cfg.srn.base_channels == 32
        assert not cfg.srn.use_domain_weights
        assert cfg.data.sunny == 40 and cfg.data.rainy == 40 and cfg.data.eval == 8

    def test_paper_profile_materialises_published_regime(self):
        cfg = parse_config("profile = paper\n[data]\nroot = /tmp/x\n")
        assert cfg.translator.epochs == 3750
        assert cfg.scale == 4
        assert cfg.data.expected_rainy == 306
        assert cfg.data.expected_sunny == 344
        assert cfg.srn.use_domain_weights
        assert cfg.translator.lr_schedule == "linear_decay"
        # epochs count passes over the smaller (rainy) folder
        assert cfg.translator_iters(306) == 3750 * -(-306 // cfg.translator.batch_size)

    def test_fixed_scale_rejected(self):
        with pytest.raises(ConfigError, match="scale"):
            parse_config("profile = desk\nscale = 2\n[data]\nroot = /x\n")

    def test_unknown_key_names_key_and_line(self):
        with pytest.raises(ConfigError, match="line 3.*bogus"):
            parse_config("profile = desk\n[data]\nbogus = 1\nroot = /x\n")

    def test_type_mismatch_names_key(self):
        with pytest.raises(ConfigError, match="iters"):
            parse_config("[translator]\niters = soon\n[data]\nroot = /x\n")

    def test_missing_dataset_root_rejected(self, monkeypatch):
        monkeypatch.delenv("RAINSR_DATA_ROOT", raising=False)
        with pytest.raises(ConfigError, match="root"):
            parse_config("profile = desk\n")

    def test_env_fallback_for_root(self, monkeypatch):
        monkeypatch.setenv("RAINSR_DATA_ROOT", "/data/somewhere")
        cfg = parse_config("profile = desk\n")
        assert cfg.data.root == "/data/somewhere"
        assert cfg.run_dir == "/data/somewhere/run"

    def test_overrides_and_comments(self):
        cfg = parse_config(
            "# a comment\nprofile = desk\nseed = 9\n"
            "[translator]\niters = 5  # short\nlambda_cyc = 2.5\n"
            "[data]\nroot = /x\n"
        )
        assert cfg.seed == 9
        assert cfg.translator.iters == 5
        assert cfg.translator.lambda_cyc == 2.5

    def test_load_config_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "none.cfg"))

    def test_load_config_round_trip(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("profile = desk\n[data]\nroot = /x\n[srn]\niters = 7\n")
        cfg = load_config(str(path))
        assert cfg.srn.iters == 7


class TestFingerprint:
    def _base(self):
        return parse_config("profile = desk\n[data]\nroot = /x\n")

    def test_formatting_and_order_do_not_matter(self):
        a = parse_config("profile = desk\n[data]\nroot = /x\n[srn]\niters = 300\n")
        b = parse_config("profile = desk\n# noise\n\n[srn]\niters   =  300\n"
                         "[data]\nroot = /x\n")
        assert a.fingerprint() == b.fingerprint()

    def test_any_effective_change_changes_fingerprint(self):
        base = self._base().fingerprint()
        changed = parse_config(
            "profile = desk\n[data]\nroot = /x\n[translator]\nlambda_id = 4.0\n")
        assert changed.fingerprint() != base
        seeded = parse_config("profile = desk\nseed = 5\n[data]\nroot = /x\n")
        assert seeded.fingerprint() != base

    def test_paths_do_not_affect_fingerprint(self):
        a = parse_config("profile = desk\n[data]\nroot = /x\n")
        b = parse_config("profile = desk\nrun_dir = /elsewhere\n[data]\nroot = /y\n")
        assert a.fingerprint() == b.fingerprint()

    def test_desk_runtime_bound_documented_defaults(self):
        # the desk profile exists to be runnable: iteration counts stay small
        cfg = default_config("desk")
        assert cfg.translator.iters <= 300
        assert cfg.dsn.iters <= 200
        assert cfg.srn.iters <= 300
