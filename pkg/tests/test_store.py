import json
import struct

import numpy as np
import numpy.testing as npt
import pytest
import torch
from hypothesis import given, settings, strategies as st

from qconsol.errors import ConfigError, FormatError
from qconsol.qfield import FeatureField, LayerSpec, QuerySet
from qconsol.store import (DESK_DEFAULTS, apply_overrides, dump_config, dump_queries, load_checkpoint,
                           load_config, load_queries, parse_config, save_checkpoint)

LAYERS = (LayerSpec(0, 4, 3), LayerSpec(1, 8, 2))


class TestParseConfig:
    def test_empty_object_is_paper_profile(self):
        cfg = parse_config("{}")
        assert cfg.profile == "paper" and cfg.alpha == 60.0 and cfg.T == 50

    def test_desk_profile(self):
        cfg = parse_config({"profile": "desk"})
        assert (cfg.T, cfg.tau, cfg.qnerf.steps) == (20, 4, 2000)
        assert [(l.resolution, l.channels) for l in cfg.layers] == [(8, 16), (16, 12), (32, 8)]

    def test_tau_too_large(self):
        with pytest.raises(ConfigError, match="2τ ≤ T violated") as exc:
            parse_config({"tau": 30})
        assert exc.value.key == "tau"

    @pytest.mark.parametrize("doc,key", [
        ({"alpha": -1}, "alpha"),
        ({"profile": "desk", "tau": 0}, "tau"),
        ({"profile": "desk", "amplitude": 1.2}, "amplitude"),
        ({"profile": "desk", "cameras": {"count": 1}}, "cameras.count"),
        ({"profile": "desk", "kv_injection": {"resolutions": [12]}}, "kv_injection.resolutions"),
    ])
    def test_invariants_name_key(self, doc, key):
        with pytest.raises(ConfigError) as exc:
            parse_config(doc)
        assert exc.value.key == key

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as exc:
            parse_config({"profile": "desk", "qnerf": {"stepz": 3}})
        assert "stepz" in str(exc.value.key)

    def test_malformed(self):
        with pytest.raises(ConfigError):
            parse_config("{not json")
        with pytest.raises(ConfigError):
            parse_config("[1, 2]")
        with pytest.raises(ConfigError):
            parse_config({"profile": "laptop"})

    def test_no_silent_coercion(self):
        with pytest.raises(ConfigError):
            parse_config({"profile": "desk", "T": "20"})

    @pytest.mark.parametrize("profile", ["paper", "desk"])
    def test_round_trip(self, profile):
        cfg = parse_config({"profile": profile, "seeds": {"training": 11}})
        assert parse_config(dump_config(cfg)) == cfg

    def test_overrides(self, tmp_path):
        doc = apply_overrides({"profile": "desk"}, ["qnerf.steps=10", "mode=direct_injection", "eta=0"])
        cfg = parse_config(doc)
        assert (cfg.qnerf.steps, cfg.mode, cfg.eta) == (10, "direct_injection", 0.0)
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"profile": "desk"}))
        assert load_config(p, ["T=24"]).T == 24
        with pytest.raises(ConfigError):
            apply_overrides({}, ["novalue"])

    def test_defaults_not_mutated(self):
        before = json.dumps(DESK_DEFAULTS, sort_keys=True)
        parse_config(apply_overrides({"profile": "desk"}, ["scene.feature_frequency=3.0"]))
        assert json.dumps(DESK_DEFAULTS, sort_keys=True) == before

    def test_kv_layer_indices(self):
        assert parse_config({"profile": "desk"}).kv_layer_indices() == (1, 2)


def _field(seed=0):
    return FeatureField(LAYERS, frequencies=2, width=8, depth=2, seed=seed)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        f = _field(3)
        with torch.no_grad():
            for p in f.parameters():
                p.add_(torch.randn(p.shape, generator=torch.Generator().manual_seed(1)))
        save_checkpoint(f, tmp_path / "a.bin")
        g = load_checkpoint(tmp_path / "a.bin")
        npt.assert_array_equal(f.flat_parameters(), g.flat_parameters())
        assert [(l.resolution, l.channels) for l in g.layers] == [(4, 3), (8, 2)]
        assert (g.frequencies, g.width, g.depth) == (2, 8, 2)
        save_checkpoint(g, tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_header_layout(self, tmp_path):
        save_checkpoint(_field(), tmp_path / "a.bin")
        raw = (tmp_path / "a.bin").read_bytes()
        assert raw[:4] == b"QNRF"
        assert struct.unpack("<II", raw[4:12]) == (1, 2)

    def test_corrupted_magic(self, tmp_path):
        save_checkpoint(_field(), tmp_path / "a.bin")
        raw = bytearray((tmp_path / "a.bin").read_bytes())
        raw[0:4] = b"XNRF"
        (tmp_path / "a.bin").write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(tmp_path / "a.bin")

    def test_version_mismatch(self, tmp_path):
        save_checkpoint(_field(), tmp_path / "a.bin")
        raw = bytearray((tmp_path / "a.bin").read_bytes())
        raw[4:8] = struct.pack("<I", 7)
        (tmp_path / "a.bin").write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="found 7, expected 1"):
            load_checkpoint(tmp_path / "a.bin")

    @pytest.mark.parametrize("cut", [2, 10, 30, -4])
    def test_truncated(self, tmp_path, cut):
        save_checkpoint(_field(), tmp_path / "a.bin")
        raw = (tmp_path / "a.bin").read_bytes()
        (tmp_path / "a.bin").write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "a.bin")


def _queries(seed=0, views=3, t=7):
    rng = np.random.default_rng(seed)
    return QuerySet(t, [rng.normal(size=(views, 4, 4, 3)).astype(np.float32),
                        rng.normal(size=(views, 8, 8, 2)).astype(np.float32)])


class TestQueryDump:
    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10 ** 6), st.integers(1, 4), st.integers(-1, 60))
    def test_round_trip(self, seed, views, t):
        import tempfile
        from pathlib import Path
        qs = _queries(seed, views, t)
        with tempfile.TemporaryDirectory() as d:
            dump_queries(qs, Path(d) / "q.bin")
            back = load_queries(Path(d) / "q.bin", [(4, 3), (8, 2)])
        assert back.timestep == t and back.n_views == views
        for a, b in zip(qs.maps, back.maps):
            assert a.tobytes() == b.tobytes()

    def test_layer_table_mismatch(self, tmp_path):
        dump_queries(_queries(), tmp_path / "q.bin")
        with pytest.raises(FormatError, match="layer table"):
            load_queries(tmp_path / "q.bin", [(4, 3), (8, 3)])

    def test_header(self, tmp_path):
        dump_queries(_queries(views=3), tmp_path / "q.bin")
        raw = (tmp_path / "q.bin").read_bytes()
        assert raw[:4] == b"QDMP"
        assert struct.unpack("<IIiI", raw[4:20]) == (1, 3, 7, 2)

    def test_corrupted(self, tmp_path):
        dump_queries(_queries(), tmp_path / "q.bin")
        raw = (tmp_path / "q.bin").read_bytes()
        (tmp_path / "bad.bin").write_bytes(b"QDMX" + raw[4:])
        with pytest.raises(FormatError):
            load_queries(tmp_path / "bad.bin")
        (tmp_path / "short.bin").write_bytes(raw[:-1])
        with pytest.raises(FormatError):
            load_queries(tmp_path / "short.bin")
        (tmp_path / "ver.bin").write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
        with pytest.raises(FormatError, match="found 2"):
            load_queries(tmp_path / "ver.bin")
