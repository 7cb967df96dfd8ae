import numpy as np
import pytest

from geppml import build_interval_panel, load_panel, synth_world, write_panel
from geppml.panel import (
    GravityCovariates,
    PanelFormatError,
    TradeObservation,
    validate_country_code,
)


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def toy_files(tmp_path, flows=None, covariates=None, fta=None):
    countries = ["CHL", "DEU", "USA"]
    years = [2000, 2004]
    if flows is None:
        lines = ["exporter,importer,year,flow"]
        v = 1.0
        for e in countries:
            for i in countries:
                for t in years:
                    lines.append(f"{e},{i},{t},{v}")
                    v += 0.5
        flows = "\n".join(lines) + "\n"
    if covariates is None:
        lines = ["exporter,importer,log_dist,cntg,lang,clny"]
        for e in countries:
            for i in countries:
                lines.append(f"{e},{i},{7.5 if e != i else 4.0},0,0,0")
        covariates = "\n".join(lines) + "\n"
    if fta is None:
        fta = "exporter,importer,year,fta\nCHL,USA,2004,1\nUSA,CHL,2004,1\n"
    return (
        _write(tmp_path / "flows.csv", flows),
        _write(tmp_path / "covariates.csv", covariates),
        _write(tmp_path / "fta.csv", fta),
    )


class TestCountryCode:
    @pytest.mark.parametrize("code", ["CHL", "USA", "DEU"])
    def test_valid(self, code):
        assert validate_country_code(code) == code

    @pytest.mark.parametrize("code", ["chl", "US", "USAA", "U1A", ""])
    def test_invalid(self, code):
        with pytest.raises(ValueError):
            validate_country_code(code)


class TestObservationTypes:
    def test_intra_flag(self):
        obs = TradeObservation("CHL", "CHL", 2000, 5.0)
        assert obs.intra_national

    def test_negative_flow_rejected(self):
        with pytest.raises(ValueError):
            TradeObservation("CHL", "USA", 2000, -1.0)

    def test_bad_fta_rejected(self):
        with pytest.raises(ValueError):
            TradeObservation("CHL", "USA", 2000, 1.0, fta=2)

    def test_zero_log_dist_rejected_for_distinct(self):
        with pytest.raises(ValueError):
            GravityCovariates("CHL", "USA", 0.0, 0, 0, 0)

    def test_internal_distance_may_be_small(self):
        cov = GravityCovariates("CHL", "CHL", -0.5, 0, 1, 0)
        assert cov.pair == ("CHL", "CHL")


class TestLoadPanel:
    def test_toy_cross_product(self, tmp_path):
        panel = load_panel(*toy_files(tmp_path))
        assert panel.n_obs == 18  # 3 x 3 x 2 including intra-national
        assert panel.countries == ("CHL", "DEU", "USA")
        assert panel.years == (2000, 2004)
        assert panel.has_intra

    def test_fta_joined_with_default_zero(self, tmp_path):
        panel = load_panel(*toy_files(tmp_path))
        on = {
            (e, i, int(t))
            for e, i, t, f in zip(panel.exporter, panel.importer, panel.year, panel.fta)
            if f
        }
        assert on == {("CHL", "USA", 2004), ("USA", "CHL", 2004)}

    def test_no_symmetric_closure(self, tmp_path):
        files = toy_files(tmp_path, fta="exporter,importer,year,fta\nCHL,USA,2004,1\n")
        panel = load_panel(*files)
        on = {
            (e, i)
            for e, i, f in zip(panel.exporter, panel.importer, panel.fta)
            if f
        }
        assert on == {("CHL", "USA")}

    def test_negative_flow_names_row(self, tmp_path):
        flows = "exporter,importer,year,flow\nCHL,USA,2000,5.0\nUSA,CHL,2000,-3.0\n"
        files = toy_files(tmp_path, flows=flows)
        with pytest.raises(PanelFormatError, match=r"negative flow.*:3"):
            load_panel(*files)

    def test_malformed_row_names_line(self, tmp_path):
        flows = "exporter,importer,year,flow\nCHL,USA,2000\n"
        files = toy_files(tmp_path, flows=flows)
        with pytest.raises(PanelFormatError, match=":2"):
            load_panel(*files)

    def test_duplicate_key_rejected(self, tmp_path):
        flows = (
            "exporter,importer,year,flow\nCHL,USA,2000,5.0\nCHL,USA,2000,6.0\n"
        )
        files = toy_files(tmp_path, flows=flows)
        with pytest.raises(PanelFormatError, match="duplicate key"):
            load_panel(*files)

    def test_unknown_country_in_covariates(self, tmp_path):
        cov = "exporter,importer,log_dist,cntg,lang,clny\nXXX,USA,7.0,0,0,0\n"
        files = toy_files(tmp_path, covariates=cov)
        with pytest.raises(PanelFormatError, match="unknown country code 'XXX'"):
            load_panel(*files)

    def test_unknown_country_in_fta(self, tmp_path):
        files = toy_files(tmp_path, fta="exporter,importer,year,fta\nZZZ,USA,2004,1\n")
        with pytest.raises(PanelFormatError, match="unknown country code 'ZZZ'"):
            load_panel(*files)

    def test_missing_covariate_pair(self, tmp_path):
        cov = "exporter,importer,log_dist,cntg,lang,clny\nCHL,USA,7.5,0,0,0\n"
        files = toy_files(tmp_path, covariates=cov)
        with pytest.raises(PanelFormatError, match="lack covariates"):
            load_panel(*files)

    def test_fta_zero_rows_rejected(self, tmp_path):
        files = toy_files(tmp_path, fta="exporter,importer,year,fta\nCHL,USA,2004,0\n")
        with pytest.raises(PanelFormatError, match="fta=1"):
            load_panel(*files)

    def test_empty_flows_rejected(self, tmp_path):
        files = toy_files(tmp_path, flows="exporter,importer,year,flow\n")
        with pytest.raises(PanelFormatError, match="no observations"):
            load_panel(*files)

    def test_provenance_comments_skipped(self, tmp_path):
        files = toy_files(tmp_path)
        stamped = tmp_path / "flows_stamped.csv"
        stamped.write_text("# manifest: abc123\n" + files[0].read_text(), encoding="utf-8")
        panel = load_panel(stamped, files[1], files[2])
        assert panel.n_obs == 18

    def test_loading_lossless(self, tmp_path):
        value = 0.1 + 0.2  # not exactly representable as a short decimal
        flows = f"exporter,importer,year,flow\nCHL,USA,2000,{value!r}\nUSA,CHL,2000,7.25\nCHL,CHL,2000,1.0\nUSA,USA,2000,1.0\n"
        cov = (
            "exporter,importer,log_dist,cntg,lang,clny\n"
            "CHL,USA,7.5,0,0,0\nUSA,CHL,7.5,0,0,0\n"
        )
        files = toy_files(tmp_path, flows=flows, covariates=cov, fta="exporter,importer,year,fta\n")
        panel = load_panel(*files)
        stored = panel.flow[(panel.exporter == "CHL") & (panel.importer == "USA")][0]
        assert stored == value


class TestRoundTrip:
    def test_synth_round_trip_bit_identical(self, tmp_path):
        panel, _ = synth_world(10, [1990, 1994, 1998, 2002, 2006], 0.5, 7.0, seed=4)
        write_panel(panel, tmp_path / "f.csv", tmp_path / "c.csv", tmp_path / "t.csv")
        back = load_panel(tmp_path / "f.csv", tmp_path / "c.csv", tmp_path / "t.csv")
        assert np.array_equal(back.flow, panel.flow)
        assert np.array_equal(back.fta, panel.fta)
        assert list(back.exporter) == list(panel.exporter)
        assert back.covariates == panel.covariates
        # write again: byte-identical files
        write_panel(back, tmp_path / "f2.csv", tmp_path / "c2.csv", tmp_path / "t2.csv")
        assert (tmp_path / "f.csv").read_bytes() == (tmp_path / "f2.csv").read_bytes()


class TestIntervalPanel:
    def test_paper_window(self, tmp_path):
        panel, _ = synth_world(4, [1990, 1994, 1998, 2002, 2006, 2007], 0.3, 7.0, seed=2)
        out = build_interval_panel(panel, 1990, 2006, 4)
        assert out.years == (1990, 1994, 1998, 2002, 2006)

    def test_degenerate_single_year(self, tmp_path):
        panel, _ = synth_world(4, [2000, 2001], 0.3, 7.0, seed=2)
        out = build_interval_panel(panel, 2000, 2000, 1)
        assert out.years == (2000,)
        assert set(out.year) == {2000}

    def test_missing_year_listed(self):
        panel, _ = synth_world(4, [1990, 1994, 2002, 2006], 0.3, 7.0, seed=2)
        with pytest.raises(ValueError, match=r"\[1998\]"):
            build_interval_panel(panel, 1990, 2006, 4)

    def test_idempotent(self):
        panel, _ = synth_world(4, [1990, 1994, 1998], 0.3, 7.0, seed=2)
        once = build_interval_panel(panel, 1990, 1998, 4)
        twice = build_interval_panel(once, 1990, 1998, 4)
        assert once.years == twice.years
        assert np.array_equal(once.flow, twice.flow)

    def test_preserves_pairs(self):
        panel, _ = synth_world(5, [1990, 1994, 1998], 0.3, 7.0, seed=3)
        out = build_interval_panel(panel, 1990, 1998, 8)
        assert set(zip(out.exporter, out.importer)) == set(
            zip(panel.exporter, panel.importer)
        )

    def test_bad_window_rejected(self):
        panel, _ = synth_world(4, [1990, 1994], 0.3, 7.0, seed=2)
        with pytest.raises(ValueError):
            build_interval_panel(panel, 1994, 1990, 4)
        with pytest.raises(ValueError):
            build_interval_panel(panel, 1990, 1994, 0)
        with pytest.raises(ValueError, match="not reachable"):
            build_interval_panel(panel, 1990, 1993, 2)

    def test_arrays_read_only(self):
        panel, _ = synth_world(4, [1990], 0.3, 7.0, seed=2)
        with pytest.raises(ValueError):
            panel.flow[0] = 99.0
