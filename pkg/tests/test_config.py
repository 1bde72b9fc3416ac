"""Config schema, parsing, serialization, and the protocol defaults."""
import numpy as np
import pytest

from fewcorr.config import Config, load_config, parse_config
from fewcorr.errors import ConfigError


class TestDefaults:
    def test_episode_protocol(self):
        cfg = Config()
        assert cfg["episode.n_way"] == 5
        assert cfg["episode.k_shot"] == 1
        assert cfg["episode.n_query"] == 15

    def test_k_shot_five_is_valid(self):
        cfg = Config()
        cfg.set("episode.k_shot", 5)
        assert cfg["episode.k_shot"] == 5

    def test_temperatures(self):
        cfg = Config()
        assert cfg["temp.tau1"] == 0.5
        assert cfg["temp.tau2"] == 0.5
        assert cfg["temp.tau3"] == 0.5

    def test_mixture_components(self):
        assert Config()["mixture.k"] == 25

    def test_optimizer(self):
        cfg = Config()
        assert cfg["train.lr"] == 5e-2
        assert cfg["train.momentum"] == 0.9
        assert cfg["train.weight_decay"] == 5e-4

    def test_loss_weights_keep_4_2_1_ratio(self):
        cfg = Config()
        a, b, g = cfg["loss.alpha"], cfg["loss.beta"], cfg["loss.gamma"]
        assert (a, b, g) == (1.0, 0.5, 0.25)
        assert a / b == pytest.approx(2.0) and a / g == pytest.approx(4.0)

    def test_branches_enabled_by_default(self):
        cfg = Config()
        assert cfg["branch.sc"] and cfg["branch.cc"] and cfg["branch.pc"]


class TestSetAndValidate:
    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            Config().set("episode.nway", 5)

    def test_bad_type(self):
        with pytest.raises(ConfigError):
            Config().set("episode.n_way", "five")

    def test_choice_keys(self):
        cfg = Config()
        cfg.set("selfcorr.softmax_axis", "channel")
        assert cfg["selfcorr.softmax_axis"] == "channel"
        with pytest.raises(ConfigError):
            cfg.set("selfcorr.softmax_axis", "diagonal")
        with pytest.raises(ConfigError):
            cfg.set("loss.pairing", "roulette")

    def test_int_list_accepts_bare_and_bracketed(self):
        cfg = Config()
        cfg.set("backbone.widths", "8,16")
        assert cfg["backbone.widths"] == [8, 16]
        cfg.set("backbone.widths", "[8, 16]")
        assert cfg["backbone.widths"] == [8, 16]

    def test_copy_is_independent(self):
        cfg = Config()
        dup = cfg.copy()
        dup.set("episode.n_way", 3)
        assert cfg["episode.n_way"] == 5 and dup["episode.n_way"] == 3


class TestParseAndSerialize:
    def test_roundtrip(self):
        cfg = Config()
        cfg.set("episode.n_way", 3)
        cfg.set("train.lr", 0.015)
        again = parse_config(cfg.serialize())
        assert again.serialize() == cfg.serialize()

    def test_parse_reports_line_numbers(self):
        text = "episode.n_way = 5\nepisode.k_shot = banana\n"
        with pytest.raises(ConfigError, match="line 2"):
            parse_config(text)

    def test_parse_skips_comments_and_blanks(self):
        cfg = parse_config("# a comment\n\nepisode.n_way = 4\n")
        assert cfg["episode.n_way"] == 4

    def test_parse_rejects_missing_equals(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config("episode.n_way 4\n")

    def test_load_config(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("episode.n_query = 7\n")
        assert load_config(p)["episode.n_query"] == 7

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.txt")


class TestDigest:
    def test_digest_stable_and_sensitive(self):
        a, b = Config(), Config()
        assert a.digest() == b.digest()
        b.set("run.seed", 99)
        assert a.digest() != b.digest()

    def test_digest_is_hex_sha256(self):
        d = Config().digest()
        assert len(d) == 64 and int(d, 16) >= 0
