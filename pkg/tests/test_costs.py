import numpy as np
import pytest

from geppml import (
    complete_costs,
    costs_from_pair_fe,
    fit_ppml,
    fit_stage2,
    synth_world,
)
from geppml.costs import CostError, CostMatrix, read_cost_matrix, write_cost_matrix
from geppml.hdfe import CollinearityError, SeparationWarning
from geppml.panel import GravityCovariates

from conftest import stage1_fes


@pytest.fixture(scope="module")
def stage1_fit(small_world):
    panel, truth = small_world
    fit = fit_ppml(
        panel.flow,
        covariates={"FTA": panel.fta.astype(float)},
        fes=stage1_fes(panel, truth.reference),
    )
    return panel, truth, fit


class TestCostsFromPairFe:
    def test_reference_pair_level_one(self, stage1_fit):
        panel, truth, fit = stage1_fit
        levels = costs_from_pair_fe(fit)
        ref_pair = (truth.reference, truth.reference)
        assert levels[ref_pair] == 1.0  # exp(0) at the pinned reference

    def test_tetrad_ratios_match_planted_costs(self, stage1_fit):
        # pair effects are identified up to exporter- and importer-specific
        # shifts; tetrads (ij)(kl)/(il)(kj) are the invariant contrasts
        panel, truth, fit = stage1_fit
        levels = costs_from_pair_fe(fit)
        countries = sorted({e for e, _ in levels})
        quads = [
            (i, j, k, l)
            for i in countries[:4]
            for j in countries[:4]
            for k in countries[:4]
            for l in countries[:4]
            if len({i, j, k, l}) == 4
        ]
        for i, j, k, l in quads:
            got = (levels[(i, j)] * levels[(k, l)]) / (levels[(i, l)] * levels[(k, j)])
            want = (truth.pair_costs[(i, j)] * truth.pair_costs[(k, l)]) / (
                truth.pair_costs[(i, l)] * truth.pair_costs[(k, j)]
            )
            assert got == pytest.approx(want, rel=1e-7)

    def test_missing_dimension_rejected(self, stage1_fit):
        _, _, fit = stage1_fit
        with pytest.raises(CostError, match="'nope'"):
            costs_from_pair_fe(fit, dim="nope")

    def test_all_zero_pairs_absent(self):
        panel, truth = synth_world(5, [1990, 1994], 0.4, 7.0, seed=21)
        flows = panel.flow.copy()
        kill = (panel.exporter == "AAB") & (panel.importer == "AAC")
        flows[kill] = 0.0
        with pytest.warns(SeparationWarning):
            fit = fit_ppml(
                flows,
                covariates={"FTA": panel.fta.astype(float)},
                fes=stage1_fes(panel, truth.reference),
            )
        levels = costs_from_pair_fe(fit)
        assert ("AAB", "AAC") not in levels
        assert ("AAC", "AAB") in levels


class TestStage2:
    def test_recovers_planted_coefficients(self, small_world):
        panel, truth = small_world
        # noiseless: fit on the exact planted levels
        fit = fit_stage2(dict(truth.pair_costs), panel.covariates)
        for name, want in truth.cost_coefs.items():
            assert fit.beta[name] == pytest.approx(want, abs=1e-6)

    def test_volume_weights_accepted(self, small_world):
        panel, truth = small_world
        weights = {p: 1.0 + i for i, p in enumerate(sorted(truth.pair_costs))}
        fit = fit_stage2(dict(truth.pair_costs), panel.covariates, weights)
        for name, want in truth.cost_coefs.items():
            assert fit.beta[name] == pytest.approx(want, abs=1e-6)

    def test_identical_covariates_collinear(self):
        pairs = [(a, b) for a in ("AAA", "AAB", "AAC") for b in ("AAA", "AAB", "AAC") if a != b]
        covs = {p: GravityCovariates(p[0], p[1], 5.0, 1, 1, 1) for p in pairs}
        levels = {p: 1.0 + 0.1 * i for i, p in enumerate(pairs)}
        with pytest.raises(CollinearityError):
            fit_stage2(levels, covs)

    def test_missing_covariates_named(self, small_world):
        panel, truth = small_world
        levels = dict(truth.pair_costs)
        covs = dict(panel.covariates)
        del covs[("AAA", "AAB")]
        with pytest.raises(CostError, match="AAB"):
            fit_stage2(levels, covs)


class TestCompleteCosts:
    def test_identity_completion(self, small_world):
        panel, truth = small_world
        stage2 = fit_stage2(dict(truth.pair_costs), panel.covariates)
        matrix = complete_costs(
            dict(truth.pair_costs), stage2, panel.countries, panel.covariates, 7.0,
            include_diagonal=True,
        )
        assert matrix.values == dict(truth.pair_costs)
        assert set(matrix.source.values()) == {"estimated"}

    def test_hold_one_out_reproduces_deleted_cell(self, small_world):
        panel, truth = small_world
        full = dict(truth.pair_costs)
        deleted = ("AAC", "AAH")
        partial = {p: v for p, v in full.items() if p != deleted}
        stage2 = fit_stage2(partial, panel.covariates)
        matrix = complete_costs(
            partial, stage2, panel.countries, panel.covariates, 7.0, include_diagonal=True
        )
        assert matrix.source[deleted] == "predicted"
        assert matrix.values[deleted] == pytest.approx(full[deleted], rel=1e-6)

    def test_estimated_cells_never_altered(self, small_world):
        panel, truth = small_world
        full = dict(truth.pair_costs)
        partial = {p: v for p, v in full.items() if p != ("AAB", "AAC")}
        stage2 = fit_stage2(partial, panel.covariates)
        matrix = complete_costs(
            partial, stage2, panel.countries, panel.covariates, 7.0, include_diagonal=True
        )
        for pair, value in partial.items():
            assert matrix.values[pair] == value

    def test_completeness_feeds_constrained_fit(self, small_world):
        panel, truth = small_world
        stage2 = fit_stage2(dict(truth.pair_costs), panel.covariates)
        matrix = complete_costs(
            dict(truth.pair_costs), stage2, panel.countries, panel.covariates, 7.0,
            include_diagonal=True,
        )
        mask = panel.year == max(panel.years)
        offset = matrix.offset_for(list(panel.exporter[mask]), list(panel.importer[mask]))
        assert np.all(np.isfinite(offset))

    def test_country_missing_from_stage2_reported(self, small_world):
        panel, truth = small_world
        # drop every pair touching AAJ so stage 2 never sees it
        partial = {p: v for p, v in truth.pair_costs.items() if "AAJ" not in p}
        stage2 = fit_stage2(partial, panel.covariates)
        with pytest.raises(CostError, match="AAJ"):
            complete_costs(
                partial, stage2, panel.countries, panel.covariates, 7.0, include_diagonal=True
            )


class TestCostMatrixType:
    def test_incomplete_rejected(self):
        with pytest.raises(CostError, match="incomplete"):
            CostMatrix(("AAA", "AAB"), {("AAA", "AAB"): 1.0}, {("AAA", "AAB"): "estimated"}, 7.0)

    def test_nonpositive_rejected(self):
        values = {("AAA", "AAB"): 1.0, ("AAB", "AAA"): 0.0}
        with pytest.raises(CostError, match="strictly positive"):
            CostMatrix(("AAA", "AAB"), values, dict.fromkeys(values, "estimated"), 7.0)

    def test_sigma_bound(self):
        values = {("AAA", "AAB"): 1.0, ("AAB", "AAA"): 2.0}
        with pytest.raises(CostError, match="sigma"):
            CostMatrix(("AAA", "AAB"), values, dict.fromkeys(values, "estimated"), 1.0)

    def test_directionality_preserved(self):
        values = {("AAA", "AAB"): 1.0, ("AAB", "AAA"): 2.0}
        m = CostMatrix(("AAA", "AAB"), values, dict.fromkeys(values, "estimated"), 7.0)
        assert m.values[("AAA", "AAB")] != m.values[("AAB", "AAA")]

    def test_round_trip(self, tmp_path, small_world):
        panel, truth = small_world
        stage2 = fit_stage2(dict(truth.pair_costs), panel.covariates)
        matrix = complete_costs(
            dict(truth.pair_costs), stage2, panel.countries, panel.covariates, 7.0,
            include_diagonal=True,
        )
        write_cost_matrix(matrix, tmp_path / "costs.csv")
        back = read_cost_matrix(tmp_path / "costs.csv", sigma=7.0)
        assert back.values == matrix.values
        assert back.source == matrix.source
        assert back.has_diagonal
