import json
import math
from pathlib import Path

import numpy as np
import pytest

from fiberfield.core import DensityField, SpatialGrid
from fiberfield.errors import ConfigError, FiberFieldError
from fiberfield.harness import (
    ExperimentConfig,
    box_density,
    l2_distance_series,
    parse_config,
    radial_profile,
    run,
    serialize_config,
    write_radial_csv,
)


def doc(**over):
    base = {"mode": "stationary", "physics": {}, "numerics": {}, "output": {}}
    for key, val in over.items():
        base[key] = val
    return json.dumps(base)


class TestParseConfig:
    def test_minimal_with_defaults(self):
        cfg = parse_config(json.dumps({"mode": "micro"}))
        assert cfg.mode == "micro"
        assert cfg.d == 3 and cfg.A == 1.0 and math.isinf(cfg.H)
        assert cfg.U is None
        assert cfg.n_x == 21

    def test_paper_preset(self):
        cfg = parse_config(doc(physics={"U": "paper"}))
        assert cfg.U.kind == "smooth_heaviside"
        assert (cfg.U.C, cfg.U.R, cfg.U.k) == (10.0, 1.4, 10.0)

    def test_rejects_d4(self):
        with pytest.raises(ConfigError, match="physics.d"):
            parse_config(doc(physics={"d": 4}))

    def test_rejects_unknown_keys(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config(json.dumps({"mode": "micro", "numerics": {"bogus": 1}}))
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config(json.dumps({"mode": "micro", "what": 1}))

    def test_missing_mode(self):
        with pytest.raises(ConfigError, match="mode"):
            parse_config(json.dumps({"numerics": {}}))

    def test_out_of_range_value(self):
        with pytest.raises(ConfigError, match="n_x"):
            parse_config(doc(numerics={"n_x": 2}))
        with pytest.raises(ConfigError, match="H"):
            parse_config(doc(physics={"H": -1.0}))

    def test_roundtrip(self):
        text = json.dumps(
            {
                "mode": "meanfield",
                "physics": {"A": 0.5, "H": 0.1, "U": "paper"},
                "numerics": {"n_x": 11, "L": 3.8, "level": 0, "seed": 9},
                "output": {"snapshot_every": 0.5, "plots": False},
            }
        )
        cfg = parse_config(text)
        again = parse_config(serialize_config(cfg))
        assert again == cfg

    def test_infinite_h_spelling(self):
        cfg = parse_config(doc(physics={"H": "inf"}))
        assert math.isinf(cfg.H)
        again = parse_config(serialize_config(cfg))
        assert math.isinf(again.H)


class TestRadialProfile:
    def test_constant_field(self):
        g = SpatialGrid(11, 2.0)
        rho = DensityField(g, np.full(g.shape, 3.3))
        rows = radial_profile(rho, 8)
        for (_, mean, cnt) in rows:
            if cnt:
                assert mean == pytest.approx(3.3)

    def test_gaussian_profile_matches_radial_function(self):
        g = SpatialGrid(31, 3.0)
        r = g.radius()
        rho = DensityField(g, np.exp(-(r**2) / 2.0) / (2 * math.pi) ** 1.5)
        rows = radial_profile(rho, 12)
        for (rc, mean, cnt) in rows:
            if cnt and rc < g.L:
                expected = math.exp(-(rc**2) / 2.0) / (2 * math.pi) ** 1.5
                # shell means mix radii across the bin width
                assert abs(mean - expected) < 0.25 * expected + 2e-4

    def test_empty_bins_emitted(self, tmp_path):
        g = SpatialGrid(5, 1.0)
        rho = DensityField(g, np.ones(g.shape))
        rows = radial_profile(rho, 40)
        assert any(cnt == 0 for (_, _, cnt) in rows)
        assert len(rows) == 40
        p = tmp_path / "radial.csv"
        write_radial_csv(p, rows)
        lines = p.read_text().splitlines()
        assert lines[0] == "r,rho_mean,count"
        assert any(line.split(",")[1] == "" for line in lines[1:])

    def test_bin_centers(self):
        g = SpatialGrid(5, 1.0)
        rows = radial_profile(DensityField(g, np.ones(g.shape)), 10)
        rmax = g.L * math.sqrt(3.0)
        for j, (rc, _, _) in enumerate(rows):
            assert rc == pytest.approx((j + 0.5) * rmax / 10)


class TestL2Series:
    def test_zero_for_reference_itself(self):
        g = SpatialGrid(7, 1.0)
        ref = DensityField(g, np.random.default_rng(0).random(g.shape))
        rows = l2_distance_series([(0.0, ref), (1.0, ref)], ref)
        assert all(v == 0.0 for (_, v) in rows)

    def test_linearity(self):
        g = SpatialGrid(7, 1.0)
        ref = DensityField(g, np.random.default_rng(1).random(g.shape))
        double = DensityField(g, 2.0 * ref.values)
        rows = l2_distance_series([(0.0, double)], ref)
        norm_ref = math.sqrt(float(np.sum(ref.values**2)) * g.dx**3)
        assert rows[0][1] == pytest.approx(norm_ref)

    def test_grid_mismatch(self):
        ref = DensityField(SpatialGrid(7, 1.0), np.ones((7, 7, 7)))
        other = DensityField(SpatialGrid(9, 1.0), np.ones((9, 9, 9)))
        with pytest.raises(FiberFieldError):
            l2_distance_series([(0.0, other)], ref)


MICRO_DOC = {
    "mode": "micro",
    "physics": {"A": 1.0, "H": 0.2, "U": "paper"},
    "numerics": {"dt": 0.01, "T": 0.3, "N": 20, "groups": 2, "seed": 5, "stride": 2, "n_x": 9, "L": 4.2},
    "output": {"snapshot_every": None, "plots": False},
}


class TestRunModes:
    def test_stationary_run_produces_artifacts(self, tmp_path):
        cfg = parse_config(
            json.dumps(
                {
                    "mode": "stationary",
                    "physics": {"U": "paper"},
                    "numerics": {"n_x": 11, "L": 4.2, "tol": 1e-6, "relaxation": 0.5, "max_iter": 400},
                    "output": {"plots": True},
                }
            )
        )
        out = run(cfg, out_dir=tmp_path / "stat")
        for name in ("DONE", "manifest.json", "density.npz", "residual_history.csv", "radial_profile.csv"):
            assert (out / name).exists()
        assert (out / "residual_history.png").exists()
        assert (out / "radial_profile.png").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["stationary"]["converged"]
        assert "wall_seconds" in manifest

    def test_micro_reproducible_csv(self, tmp_path):
        cfg1 = parse_config(json.dumps(MICRO_DOC))
        cfg2 = parse_config(json.dumps(MICRO_DOC))
        out1 = run(cfg1, out_dir=tmp_path / "a")
        out2 = run(cfg2, out_dir=tmp_path / "b")
        assert (out1 / "states.csv").read_bytes() == (out2 / "states.csv").read_bytes()
        assert (out1 / "radial_profile.csv").read_bytes() == (out2 / "radial_profile.csv").read_bytes()

    def test_seed_override_changes_data(self, tmp_path):
        cfg1 = parse_config(json.dumps(MICRO_DOC))
        cfg2 = parse_config(json.dumps(MICRO_DOC))
        out1 = run(cfg1, out_dir=tmp_path / "a")
        out2 = run(cfg2, out_dir=tmp_path / "b", seed=99)
        assert (out1 / "states.csv").read_bytes() != (out2 / "states.csv").read_bytes()

    def test_compare_mode(self, tmp_path):
        g = SpatialGrid(9, 2.0)
        a = box_density(g)
        b = DensityField(g, np.exp(-g.radius() ** 2)).normalized()
        a.save(tmp_path / "a.npz")
        b.save(tmp_path / "b.npz")
        cfg = parse_config(
            json.dumps(
                {
                    "mode": "compare",
                    "compare": {"inputs": {"one": str(tmp_path / "a.npz"), "two": str(tmp_path / "b.npz")}},
                    "output": {"plots": False},
                }
            )
        )
        out = run(cfg, out_dir=tmp_path / "cmp")
        lines = (out / "comparison.csv").read_text().splitlines()
        assert lines[0] == "a,b,l2,l2_over_peak"
        name_a, name_b, l2, rel = lines[1].split(",")
        assert float(l2) == pytest.approx(a.l2_distance(b))
        # symmetric metric
        assert float(l2) == pytest.approx(b.l2_distance(a))

    def test_compare_missing_inputs_listed(self, tmp_path):
        cfg = parse_config(
            json.dumps(
                {
                    "mode": "compare",
                    "compare": {"inputs": {"one": str(tmp_path / "nope.npz"), "two": str(tmp_path / "also.npz")}},
                }
            )
        )
        with pytest.raises(FiberFieldError, match="nope.npz"):
            run(cfg, out_dir=tmp_path / "cmp")

    def test_meanfield_smoke_with_plots(self, tmp_path):
        cfg = parse_config(
            json.dumps(
                {
                    "mode": "meanfield",
                    "physics": {"A": 1.0},
                    "numerics": {"n_x": 9, "L": 4.2, "level": 0, "T": 0.2},
                    "output": {"snapshot_every": 0.1, "plots": True},
                }
            )
        )
        out = run(cfg, out_dir=tmp_path / "mf")
        for name in ("kinetic.npz", "density.npz", "decay.csv", "mass.csv", "radial_profile.csv",
                     "radial_profile.png", "decay.png", "DONE"):
            assert (out / name).exists()
        masses = [float(line.split(",")[1]) for line in (out / "mass.csv").read_text().splitlines()[1:]]
        assert all(abs(m - 1.0) < 1e-10 for m in masses)

    def test_macro_smoke(self, tmp_path):
        cfg = parse_config(
            json.dumps(
                {
                    "mode": "macro",
                    "physics": {"A": 1.0, "H": 0.0, "U": "paper"},
                    "numerics": {"n_x": 9, "L": 4.2, "T": 0.5, "ic": "gaussian"},
                    "output": {"snapshot_every": 0.25, "plots": False},
                }
            )
        )
        out = run(cfg, out_dir=tmp_path / "macro")
        assert (out / "density.npz").exists()
        assert (out / "decay.csv").exists()

    def test_verify_smoke(self, tmp_path):
        cfg = parse_config(
            json.dumps(
                {
                    "mode": "verify",
                    "physics": {"U": "paper"},
                    "numerics": {"dt": 0.05, "T": 0.2, "n_list": [6, 12], "N": 10, "seed_pairs": 1, "stride": 1},
                    "output": {"plots": False},
                }
            )
        )
        out = run(cfg, out_dir=tmp_path / "verify")
        lines = (out / "wasserstein.csv").read_text().splitlines()
        assert lines[0] == "N_a,N_b,t,W1,bound,ratio"
        assert len(lines) > 3


class TestCli:
    def test_cli_roundtrip(self, tmp_path, capsys):
        from fiberfield.cli import main

        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(MICRO_DOC))
        rc = main(["micro", "--config", str(cfg_path), "--out", str(tmp_path / "out")])
        assert rc == 0
        assert (tmp_path / "out" / "DONE").exists()

    def test_cli_mode_mismatch(self, tmp_path, capsys):
        from fiberfield.cli import main

        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(MICRO_DOC))
        rc = main(["stationary", "--config", str(cfg_path), "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "mode" in capsys.readouterr().err

    def test_cli_bad_config(self, tmp_path, capsys):
        from fiberfield.cli import main

        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text("{not json")
        rc = main(["micro", "--config", str(cfg_path)])
        assert rc == 1
        assert "error" in capsys.readouterr().err
